#pragma once

#include "latent_forge/analysis.hpp"
#include "latent_forge/assignment.hpp"
#include "latent_forge/common.hpp"
#include "latent_forge/csv.hpp"
#include "latent_forge/error.hpp"
#include "latent_forge/intervention.hpp"
#include "latent_forge/latent_store.hpp"
#include "latent_forge/parallel.hpp"
#include "latent_forge/process.hpp"
#include "latent_forge/rng.hpp"
#include "latent_forge/sae.hpp"
#include "latent_forge/svg.hpp"
#include "latent_forge/toy.hpp"
