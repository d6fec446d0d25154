#pragma once

#include "backx/attribution.hpp"
#include "backx/backdoor.hpp"
#include "backx/datasets.hpp"
#include "backx/error.hpp"
#include "backx/evaluation.hpp"
#include "backx/harness.hpp"
#include "backx/image.hpp"
#include "backx/model.hpp"
#include "backx/nn.hpp"
#include "backx/plot.hpp"
#include "backx/png_io.hpp"
#include "backx/random.hpp"
#include "backx/tensor.hpp"
