#pragma once

#include "autodistil/batch.hpp"
#include "autodistil/checkpoint.hpp"
#include "autodistil/config.hpp"
#include "autodistil/costmodel.hpp"
#include "autodistil/data.hpp"
#include "autodistil/distill.hpp"
#include "autodistil/error.hpp"
#include "autodistil/nn/tape.hpp"
#include "autodistil/nn/tensor.hpp"
#include "autodistil/optim.hpp"
#include "autodistil/random.hpp"
#include "autodistil/rational.hpp"
#include "autodistil/search.hpp"
#include "autodistil/searchspace.hpp"
#include "autodistil/supernet.hpp"
#include "autodistil/trainer.hpp"
