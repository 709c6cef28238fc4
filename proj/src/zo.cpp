#include "baffle/zo.hpp"

#include <cmath>
#include <string>

#include "baffle/parallel.hpp"
#include "baffle/rng.hpp"

namespace baffle {

PerturbationStream::PerturbationStream(std::uint64_t seed, std::int64_t round,
                                       double sigma, std::size_t dim)
    : seed_(seed), round_(round), sigma_(sigma), dim_(dim) {
    if (sigma <= 0.0) throw ConfigError("sigma must be > 0");
    if (dim == 0) throw ConfigError("perturbation dimension must be positive");
}

void PerturbationStream::fill(std::size_t k, std::span<double> out) const {
    if (out.size() != dim_) throw ConfigError("perturbation span has wrong length");
    CounterRng rng(derive_seed({seed_, (std::uint64_t)round_, (std::uint64_t)k, 0x5045525455524201ull}));
    rng.fill_gaussian(out, sigma_);
}

std::vector<double> PerturbationStream::sample(std::size_t k) const {
    std::vector<double> v(dim_);
    fill(k, v);
    return v;
}

namespace {

std::vector<double> shifted(std::span<const double> params,
                            std::span<const double> delta, double sign) {
    std::vector<double> w(params.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = params[i] + sign * delta[i];
    return w;
}

} // namespace

double loss_diff_central(const Model& model, std::span<const double> params,
                         std::span<const double> delta, const Batch& batch,
                         Precision prec) {
    if (delta.size() != params.size())
        throw ConfigError("perturbation length does not match parameter length");
    const std::vector<double> plus = shifted(params, delta, 1.0);
    const std::vector<double> minus = shifted(params, delta, -1.0);
    return model.loss(plus, batch, prec) - model.loss(minus, batch, prec);
}

double loss_diff_forward(const Model& model, std::span<const double> params,
                         std::span<const double> delta, const Batch& batch,
                         double baseline_loss, Precision prec) {
    if (delta.size() != params.size())
        throw ConfigError("perturbation length does not match parameter length");
    const std::vector<double> plus = shifted(params, delta, 1.0);
    return model.loss(plus, batch, prec) - baseline_loss;
}

std::vector<double> loss_diffs(const Model& model, std::span<const double> params,
                               const Batch& batch, const PerturbationStream& stream,
                               const EstimatorConfig& cfg, Precision prec,
                               int workers) {
    if (cfg.k < 1) throw ConfigError("estimator sample count must be >= 1");
    if (stream.dim() != params.size())
        throw ConfigError("stream dimension does not match parameter length");
    std::vector<double> diffs((std::size_t)cfg.k);
    double baseline = 0.0;
    if (cfg.scheme == Scheme::Forward) baseline = model.loss(params, batch, prec);
    parallel_for((std::size_t)cfg.k, workers, [&](std::size_t k) {
        std::vector<double> delta(stream.dim());
        stream.fill(k, delta);
        diffs[k] = cfg.scheme == Scheme::Central
                       ? loss_diff_central(model, params, delta, batch, prec)
                       : loss_diff_forward(model, params, delta, batch, baseline, prec);
    });
    return diffs;
}

std::vector<double> estimate_gradient(std::span<const double> diffs,
                                      const PerturbationStream& stream,
                                      const EstimatorConfig& cfg) {
    if ((int)diffs.size() != cfg.k)
        throw ProtocolError("estimator got " + std::to_string(diffs.size()) +
                            " loss differences, config says K=" + std::to_string(cfg.k));
    const double coeff = cfg.scheme == Scheme::Central
                             ? 1.0 / (2.0 * cfg.sigma * cfg.sigma)
                             : 1.0 / (cfg.sigma * cfg.sigma);
    std::vector<double> grad(stream.dim(), 0.0);
    std::vector<double> delta(stream.dim());
    for (int k = 0; k < cfg.k; ++k) {
        stream.fill((std::size_t)k, delta);
        const double scale = coeff * diffs[(std::size_t)k];
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += scale * delta[i];
    }
    const double inv_k = 1.0 / cfg.k;
    for (double& g : grad) g *= inv_k;
    return grad;
}

namespace {

// Largest singular value of the symmetric matrix a (row-major n x n) by power
// iteration; `rel_tol` on successive magnitude estimates.
double spectral_norm_sym(const std::vector<double>& a, std::size_t n, double rel_tol) {
    CounterRng rng(derive_seed({0x53504543ull, n}));
    std::vector<double> v(n), av(n);
    rng.fill_gaussian(v);
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;

    double prev = 0.0;
    for (int it = 0; it < 100000; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            const double* row = a.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += row[j] * v[j];
            av[i] = acc;
        }
        double mag = 0.0;
        for (double x : av) mag += x * x;
        mag = std::sqrt(mag);
        if (mag == 0.0) return 0.0;
        for (std::size_t i = 0; i < n; ++i) v[i] = av[i] / mag;
        if (it > 0 && std::fabs(mag - prev) <= rel_tol * mag) return mag;
        prev = mag;
    }
    return prev;
}

} // namespace

CovarianceDiag covariance_diagnostics(const PerturbationStream& stream, int k) {
    if (k < 1) throw ConfigError("covariance diagnostics need K >= 1");
    const std::size_t n = stream.dim();
    if (n > 2000)
        throw CapabilityError("dimension " + std::to_string(n) +
                              " too large to materialize the covariance; use "
                              "covariance_frobenius_streamed");
    CovarianceDiag d;
    d.dim = n;
    d.sigma_hat.assign(n * n, 0.0);
    d.delta_hat.assign(n, 0.0);

    std::vector<double> delta(n);
    for (int s = 0; s < k; ++s) {
        stream.fill((std::size_t)s, delta);
        for (std::size_t i = 0; i < n; ++i) {
            d.delta_hat[i] += delta[i];
            const double di = delta[i];
            double* row = d.sigma_hat.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += di * delta[j];
        }
    }
    const double inv_ks2 = 1.0 / (k * stream.sigma() * stream.sigma());
    for (double& x : d.sigma_hat) x *= inv_ks2;
    for (double& x : d.delta_hat) x /= k;

    std::vector<double> dev = d.sigma_hat;
    for (std::size_t i = 0; i < n; ++i) dev[i * n + i] -= 1.0;
    double frob2 = 0.0;
    for (double x : dev) frob2 += x * x;
    d.frob_dev = std::sqrt(frob2);
    d.spec_dev = spectral_norm_sym(dev, n, 1e-6);
    return d;
}

double covariance_frobenius_streamed(const PerturbationStream& stream, int k) {
    if (k < 1) throw ConfigError("covariance diagnostics need K >= 1");
    const std::size_t n = stream.dim();
    const double s2 = stream.sigma() * stream.sigma();
    // ||S - I||_F^2 = ||S||_F^2 - 2 tr(S) + n with S = (1/(K s^2)) sum dd^T.
    std::vector<std::vector<double>> deltas((std::size_t)k, std::vector<double>(n));
    for (int s = 0; s < k; ++s) stream.fill((std::size_t)s, deltas[(std::size_t)s]);
    double gram2 = 0.0, trace = 0.0;
    for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) {
            double dot = 0.0;
            const auto& da = deltas[(std::size_t)a];
            const auto& db = deltas[(std::size_t)b];
            for (std::size_t i = 0; i < n; ++i) dot += da[i] * db[i];
            gram2 += dot * dot;
            if (a == b) trace += dot;
        }
    }
    const double c = 1.0 / (k * s2);
    const double frob2 = c * c * gram2 - 2.0 * c * trace + (double)n;
    return std::sqrt(std::max(0.0, frob2));
}

} // namespace baffle
