#pragma once

#include "dualprec/adam.hpp"
#include "dualprec/config.hpp"
#include "dualprec/data.hpp"
#include "dualprec/dual.hpp"
#include "dualprec/error.hpp"
#include "dualprec/nn.hpp"
#include "dualprec/packstore.hpp"
#include "dualprec/quant.hpp"
#include "dualprec/tensor.hpp"
#include "dualprec/trainer.hpp"
