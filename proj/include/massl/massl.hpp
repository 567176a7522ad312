#pragma once

#include "analysis.hpp"
#include "augment.hpp"
#include "config.hpp"
#include "data.hpp"
#include "layers.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "optim.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "training.hpp"
