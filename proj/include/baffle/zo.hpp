#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "baffle/nn.hpp"

namespace baffle {

// Zeroth-order gradient estimation from forward-pass loss differences under
// shared-seed Gaussian perturbations, plus the covariance diagnostics that
// control the estimator's distance from the true gradient.

enum class Scheme { Central, Forward };

struct EstimatorConfig {
    double sigma = 1e-4;
    int k = 100;
    Scheme scheme = Scheme::Central;
};

// Deterministic generator of perturbations delta_1..delta_K ~ N(0, sigma^2 I).
// delta(k) is a pure function of (seed, round, k, dim, sigma): any party
// holding the seed regenerates bit-identical vectors, so only the seed ever
// crosses the wire.
class PerturbationStream {
public:
    PerturbationStream(std::uint64_t seed, std::int64_t round, double sigma,
                       std::size_t dim);

    void fill(std::size_t k, std::span<double> out) const;
    std::vector<double> sample(std::size_t k) const;

    std::uint64_t seed() const { return seed_; }
    std::int64_t round() const { return round_; }
    double sigma() const { return sigma_; }
    std::size_t dim() const { return dim_; }

private:
    std::uint64_t seed_;
    std::int64_t round_;
    double sigma_;
    std::size_t dim_;
};

// loss(W + delta) - loss(W - delta). Exactly antisymmetric in delta.
double loss_diff_central(const Model& model, std::span<const double> params,
                         std::span<const double> delta, const Batch& batch,
                         Precision prec = Precision::F64);

// loss(W + delta) - baseline, where baseline = loss(W) is computed once per
// batch and shared across all K samples.
double loss_diff_forward(const Model& model, std::span<const double> params,
                         std::span<const double> delta, const Batch& batch,
                         double baseline_loss, Precision prec = Precision::F64);

// All K loss differences for one batch under the configured scheme.
// Individual differences may be computed in parallel; the output ordering is
// fixed by k, so results do not depend on the worker count.
std::vector<double> loss_diffs(const Model& model, std::span<const double> params,
                               const Batch& batch, const PerturbationStream& stream,
                               const EstimatorConfig& cfg,
                               Precision prec = Precision::F64, int workers = 1);

// ghat = (1/K) sum_k c * delta_k * diff_k with c = 1/(2 sigma^2) for the
// central scheme and 1/sigma^2 for the forward scheme. Perturbations are
// regenerated from the stream (O(n) live memory); accumulation runs in f64
// in ascending k, so the result is bit-reproducible.
std::vector<double> estimate_gradient(std::span<const double> diffs,
                                      const PerturbationStream& stream,
                                      const EstimatorConfig& cfg);

struct CovarianceDiag {
    std::size_t dim = 0;
    std::vector<double> sigma_hat; // dim x dim, row-major: (1/(K sigma^2)) sum delta delta^T
    std::vector<double> delta_hat; // (1/K) sum delta
    double frob_dev = 0.0;         // ||sigma_hat - I||_F
    double spec_dev = 0.0;         // ||sigma_hat - I||_2 (power iteration, rel tol 1e-6)
};

// Materializes the empirical covariance. Guarded to dim <= 2000; use
// covariance_frobenius_streamed for larger dimensions.
CovarianceDiag covariance_diagnostics(const PerturbationStream& stream, int k);

// ||sigma_hat - I||_F without materializing the dim x dim matrix, via the
// K x K Gram identity: ||S||_F^2 = (1/(K sigma^2))^2 sum_{k,l} (delta_k . delta_l)^2.
double covariance_frobenius_streamed(const PerturbationStream& stream, int k);

} // namespace baffle
