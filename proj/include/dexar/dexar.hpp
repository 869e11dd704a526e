// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dexar/attribution.hpp"
#include "dexar/binary_io.hpp"
#include "dexar/experiment.hpp"
#include "dexar/image.hpp"
#include "dexar/metrics.hpp"
#include "dexar/model.hpp"
#include "dexar/report.hpp"
#include "dexar/synthdata.hpp"
#include "dexar/tensor.hpp"
#include "dexar/train.hpp"
