#pragma once

#include "pyreid/errors.hpp"
#include "pyreid/tensor.hpp"
#include "pyreid/autograd.hpp"
#include "pyreid/gradcheck.hpp"
#include "pyreid/rng.hpp"
#include "pyreid/container.hpp"
#include "pyreid/backbone.hpp"
#include "pyreid/pyramid.hpp"
#include "pyreid/model.hpp"
#include "pyreid/batching.hpp"
#include "pyreid/losses.hpp"
#include "pyreid/scheduler.hpp"
#include "pyreid/trace.hpp"
#include "pyreid/data_synth.hpp"
#include "pyreid/evaluation.hpp"
#include "pyreid/trainer.hpp"
