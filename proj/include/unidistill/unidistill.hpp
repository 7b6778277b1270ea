#pragma once

#include "unidistill/adam.hpp"
#include "unidistill/autodiff.hpp"
#include "unidistill/config.hpp"
#include "unidistill/engine.hpp"
#include "unidistill/error.hpp"
#include "unidistill/fdivergence.hpp"
#include "unidistill/gmm.hpp"
#include "unidistill/metrics.hpp"
#include "unidistill/nn.hpp"
#include "unidistill/quadrature.hpp"
#include "unidistill/report.hpp"
#include "unidistill/rng.hpp"
#include "unidistill/runner.hpp"
#include "unidistill/sde.hpp"
#include "unidistill/surrogate.hpp"
#include "unidistill/verify.hpp"
