// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header.

#pragma once

#include "turnwise/autodiff.hpp"
#include "turnwise/context.hpp"
#include "turnwise/corpus.hpp"
#include "turnwise/encoder.hpp"
#include "turnwise/errors.hpp"
#include "turnwise/evaluation.hpp"
#include "turnwise/rng.hpp"
#include "turnwise/training.hpp"
#include "turnwise/turns.hpp"
