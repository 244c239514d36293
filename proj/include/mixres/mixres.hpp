#pragma once

#include "mixres/augment.hpp"
#include "mixres/cifar.hpp"
#include "mixres/errors.hpp"
#include "mixres/gradcheck.hpp"
#include "mixres/losses.hpp"
#include "mixres/ops.hpp"
#include "mixres/optim.hpp"
#include "mixres/resnet.hpp"
#include "mixres/runtime.hpp"
#include "mixres/sweep.hpp"
#include "mixres/tensor.hpp"
#include "mixres/trainer.hpp"
