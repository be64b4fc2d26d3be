// Copyright 2026 The cllora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "cllora/adapters.hpp"
#include "cllora/autodiff.hpp"
#include "cllora/backbone.hpp"
#include "cllora/binary_io.hpp"
#include "cllora/classifier.hpp"
#include "cllora/errors.hpp"
#include "cllora/harness.hpp"
#include "cllora/kernels.hpp"
#include "cllora/model.hpp"
#include "cllora/numerics.hpp"
#include "cllora/streams.hpp"
#include "cllora/trainer.hpp"
