// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "sffn/accounting.hpp"
#include "sffn/bench.hpp"
#include "sffn/checkpoint.hpp"
#include "sffn/config.hpp"
#include "sffn/grad_check.hpp"
#include "sffn/model.hpp"
#include "sffn/numeric.hpp"
#include "sffn/optimizer.hpp"
#include "sffn/run_config.hpp"
#include "sffn/scaling.hpp"
#include "sffn/spectral_init.hpp"
#include "sffn/svd.hpp"
#include "sffn/token_stream.hpp"
#include "sffn/trainer.hpp"
