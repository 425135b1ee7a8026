#pragma once

#include "autolora/attack.hpp"
#include "autolora/checkpoint.hpp"
#include "autolora/data.hpp"
#include "autolora/errors.hpp"
#include "autolora/nn.hpp"
#include "autolora/objectives.hpp"
#include "autolora/run_io.hpp"
#include "autolora/schedulers.hpp"
#include "autolora/tensor.hpp"
#include "autolora/trainer.hpp"
