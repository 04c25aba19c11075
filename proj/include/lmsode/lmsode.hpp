#pragma once

// Umbrella header.

#include "lmsode/errors.hpp"
#include "lmsode/tensor.hpp"
#include "lmsode/nn.hpp"
#include "lmsode/odeint.hpp"
#include "lmsode/latent.hpp"
#include "lmsode/blocks.hpp"
#include "lmsode/encoder.hpp"
#include "lmsode/inference.hpp"
#include "lmsode/json_io.hpp"
#include "lmsode/synthdata.hpp"
#include "lmsode/trainer.hpp"
#include "lmsode/config.hpp"
