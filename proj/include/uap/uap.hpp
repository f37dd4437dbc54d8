// Copyright (c) 2026 The uap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "uap/alignment.hpp"
#include "uap/config.hpp"
#include "uap/encoder.hpp"
#include "uap/error.hpp"
#include "uap/harness.hpp"
#include "uap/hash.hpp"
#include "uap/image.hpp"
#include "uap/kmeans.hpp"
#include "uap/meta_opt.hpp"
#include "uap/ntf.hpp"
#include "uap/parallel.hpp"
#include "uap/rng.hpp"
#include "uap/sampler.hpp"
#include "uap/sinkhorn.hpp"
#include "uap/synthetic.hpp"
#include "uap/target_bank.hpp"
#include "uap/tensor.hpp"
#include "uap/toy_encoder.hpp"
