#pragma once

// Umbrella header: exact Hessian blocks, Hessian-vector products and
// stochastic diagonal estimation for the additive cross-entropy loss of a
// miniature decoder-only transformer.

#include "hesskit/autodiff.hpp"
#include "hesskit/batching.hpp"
#include "hesskit/dual.hpp"
#include "hesskit/errors.hpp"
#include "hesskit/executor.hpp"
#include "hesskit/graph.hpp"
#include "hesskit/hessian.hpp"
#include "hesskit/io.hpp"
#include "hesskit/model.hpp"
#include "hesskit/parallel.hpp"
#include "hesskit/rng.hpp"
#include "hesskit/tensor.hpp"
#include "hesskit/version.hpp"
