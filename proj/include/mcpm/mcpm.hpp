// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mcpm/errors.hpp"
#include "mcpm/kernels.hpp"
#include "mcpm/random.hpp"
#include "mcpm/data.hpp"
#include "mcpm/model.hpp"
#include "mcpm/elbo.hpp"
#include "mcpm/gradient.hpp"
#include "mcpm/trainer.hpp"
#include "mcpm/predict.hpp"
#include "mcpm/metrics.hpp"
#include "mcpm/serialization.hpp"
