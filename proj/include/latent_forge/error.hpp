#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace latent_forge {

/// Broad classification used by the CLI to pick an exit code.
enum class ErrorClass { validation, runtime };

class Error : public std::runtime_error {
public:
    Error(std::string kind, ErrorClass cls, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)), class_(cls) {}

    const std::string& kind() const noexcept { return kind_; }
    ErrorClass error_class() const noexcept { return class_; }

private:
    std::string kind_;
    ErrorClass class_;
};

#define LATENT_FORGE_DEFINE_ERROR(Name, Class)                                   \
    class Name : public Error {                                                  \
    public:                                                                      \
        explicit Name(const std::string& message) : Error(#Name, Class, message) {} \
    }

LATENT_FORGE_DEFINE_ERROR(FormatError, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(CorruptDataset, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(ShapeError, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(IndexError, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(DegenerateInput, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(DegenerateArc, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(InsufficientFeatures, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(InsufficientData, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(ConfigError, ErrorClass::validation);
LATENT_FORGE_DEFINE_ERROR(IoError, ErrorClass::runtime);
LATENT_FORGE_DEFINE_ERROR(EvaluatorError, ErrorClass::runtime);
LATENT_FORGE_DEFINE_ERROR(NumericalError, ErrorClass::runtime);
LATENT_FORGE_DEFINE_ERROR(PlotError, ErrorClass::runtime);

#undef LATENT_FORGE_DEFINE_ERROR

/// Raised when a training loss becomes non-finite; carries the offending step.
class DivergenceError : public Error {
public:
    DivergenceError(std::int64_t step, const std::string& message)
        : Error("DivergenceError", ErrorClass::runtime,
                message + " (step " + std::to_string(step) + ")"),
          step_(step) {}

    std::int64_t step() const noexcept { return step_; }

private:
    std::int64_t step_;
};

}  // namespace latent_forge
