#pragma once

#include "sfcn/adabn.hpp"
#include "sfcn/checkpoint.hpp"
#include "sfcn/config.hpp"
#include "sfcn/data.hpp"
#include "sfcn/error.hpp"
#include "sfcn/gradcheck.hpp"
#include "sfcn/loss.hpp"
#include "sfcn/metrics.hpp"
#include "sfcn/model.hpp"
#include "sfcn/optim.hpp"
#include "sfcn/pnm.hpp"
#include "sfcn/reflection.hpp"
#include "sfcn/rng.hpp"
#include "sfcn/runner.hpp"
#include "sfcn/tensor.hpp"
#include "sfcn/trainer.hpp"
