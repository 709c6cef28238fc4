#pragma once

#include <span>
#include <vector>

#include "baffle/nn.hpp"

namespace baffle {

// Exact-gradient references used to validate the zeroth-order estimator and
// to run conventional-gradient baselines at desk scale. Nothing in the
// simulator path depends on this header.

struct OracleConfig {
    enum class Mode { PerCoordFD, AnalyticDense };
    double step = 1e-5; // per-coordinate central-difference step, f64
    Mode mode = Mode::PerCoordFD;
};

// g[i] = (loss(W + h e_i) - loss(W - h e_i)) / (2h), every coordinate.
// Guarded to n <= 5e4; embarrassingly parallel over coordinates.
std::vector<double> exact_gradient_fd(const Model& model,
                                      std::span<const double> params,
                                      const Batch& batch,
                                      const OracleConfig& cfg = {},
                                      int workers = 1);

// Hand-derived chain rule for Dense / Activation / GroupNorm / Flatten stacks
// under mean cross-entropy. Conv layers are not supported (CapabilityError);
// callers fall back to the finite-difference oracle.
std::vector<double> exact_gradient_dense(const Model& model,
                                         std::span<const double> params,
                                         const Batch& batch);

// Activation derivatives (hinge points take the two-sided average, which is
// what a central difference straddling the hinge converges to).
double relu_grad(double x);
double selu_grad(double x);
double hardswish_grad(double x);
double activation_grad(ActKind a, double x);

} // namespace baffle
