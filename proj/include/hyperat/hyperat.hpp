#pragma once

#include "hyperat/attacks.hpp"
#include "hyperat/backbone.hpp"
#include "hyperat/dataset.hpp"
#include "hyperat/defenses.hpp"
#include "hyperat/errors.hpp"
#include "hyperat/evalbench.hpp"
#include "hyperat/hyperlora.hpp"
#include "hyperat/losses.hpp"
#include "hyperat/merging.hpp"
#include "hyperat/optim.hpp"
#include "hyperat/synthetic_digits.hpp"
#include "hyperat/tensor.hpp"
#include "hyperat/trainer.hpp"
#include "hyperat/pipeline.hpp"
#include "hyperat/checkpoint.hpp"
#include "hyperat/config.hpp"
