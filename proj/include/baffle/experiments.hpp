#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "baffle/federation.hpp"
#include "baffle/io.hpp"
#include "baffle/nn.hpp"

namespace baffle {

// Scripted desk-scale studies: the covariance convergence rate, deep-linear
// finite-difference identities, training-guideline ablations, and the
// loss-difference distribution comparison used for the privacy argument.

// ---------------------------------------------------------------------------
// Deep-linear identities
// ---------------------------------------------------------------------------

// Two-layer linear network scored as h = w2[y] . (W1 x); the loss is -h, so
// every finite-difference response is pure linear algebra.
struct DeepLinearFixture {
    int n = 0, m = 0, classes = 0; // hidden width, input dim, class count
    std::vector<double> w1;        // n x m
    std::vector<double> w2;        // classes x n
    std::vector<double> x;         // m
    int y = 0;

    static DeepLinearFixture random(int n, int m, int classes, std::uint64_t seed);

    // h(d1, d2) = (w2[y] + d2) . ((W1 + d1) x)
    double score(std::span<const double> d1, std::span<const double> d2) const;
    // First-order response w2[y] d1 x + d2 W1 x.
    double first_order(std::span<const double> d1, std::span<const double> d2) const;
    // Bilinear remainder d2 d1 x (what the forward difference keeps and the
    // central difference cancels).
    double cross_term(std::span<const double> d1, std::span<const double> d2) const;
    // Standard deviation of the first-order response per unit sigma:
    // sqrt(|w2[y]|^2 |x|^2 + |W1 x|^2). Sets the absolute floor for relative
    // deviations so near-zero response draws cannot inflate them.
    double response_scale() const;
};

struct LinearCheckReport {
    int trials = 0;
    std::vector<double> sigmas;
    // | dfor/s^2 - dctr/(2 s^2) | / (|dctr/(2 s^2)| + eps), worst case.
    double max_scheme_dev = 0.0;
    // Central difference against the first-order closed form (an exact
    // identity: the bilinear parts cancel).
    double max_central_closed_dev = 0.0;
    // Forward difference against closed form + cross term (exact expansion).
    double max_forward_expansion_dev = 0.0;
    // sigma-independence of the normalized central response across the sigma
    // grid with shared standard-normal draws.
    double max_sigma_dev = 0.0;
};

// Runs `trials` draws of (d1, d2) per sigma; the same standard-normal draws
// are scaled by every sigma so sigma-independence is testable exactly.
LinearCheckReport linear_scheme_identity(const DeepLinearFixture& fixture,
                                         std::span<const double> sigmas, int trials,
                                         std::uint64_t seed);

// Aggregates the report over `fixtures` random fixtures.
LinearCheckReport linear_check_study(int fixtures, int n, int m, int classes,
                                     std::span<const double> sigmas, int trials,
                                     std::uint64_t seed);

std::string linear_check_csv(const LinearCheckReport& r);
std::string linear_check_json(const LinearCheckReport& r);

// ---------------------------------------------------------------------------
// Covariance convergence
// ---------------------------------------------------------------------------

struct CovarianceStudyRow {
    int k = 0;
    double mean_spec_dev = 0.0;
    double mean_frob_dev = 0.0;
};

struct CovarianceStudy {
    int dim = 0;
    int trials = 0;
    std::vector<CovarianceStudyRow> rows;
    double slope = 0.0; // least-squares slope of log mean_spec_dev vs log K
};

CovarianceStudy covariance_convergence_study(int dim, std::span<const int> k_grid,
                                             int trials, std::uint64_t seed,
                                             int workers = 1);

std::string covariance_study_csv(const CovarianceStudy& s);
std::string covariance_study_json(const CovarianceStudy& s);

// ---------------------------------------------------------------------------
// Guideline ablations
// ---------------------------------------------------------------------------

struct AblationResult {
    std::string variant;
    std::vector<double> final_accs;      // final EMA test accuracy per seed
    double mean_acc = 0.0, std_acc = 0.0;
    double mean_last20_var = 0.0; // variance of the last-20-round accuracy trace
};

// Trains the base configuration under the guideline variants at equal forward
// budget: twice_fd (forward scheme, 2K samples), central (K samples), the
// activation swaps, and EMA off. base.k is the central-scheme K.
std::vector<AblationResult> ablation_run(const RunConfig& base,
                                         std::span<const std::uint64_t> seeds);

std::string ablation_csv(std::span<const AblationResult> rows);
std::string ablation_json(std::span<const AblationResult> rows);

// ---------------------------------------------------------------------------
// Loss-difference distribution (privacy experiment)
// ---------------------------------------------------------------------------

struct DistributionReport {
    std::size_t sample_count = 0;
    double mean = 0.0;
    double stddev = 0.0;
    std::vector<double> bin_edges; // bins+1 edges, shared between the pair
    std::vector<int> bin_counts;   // sums to sample_count
    double ks_statistic = 0.0;     // vs the paired report
};

struct PrivacyResult {
    DistributionReport real;
    DistributionReport noise;
    double ks_statistic = 0.0;
};

// Two-sample Kolmogorov-Smirnov statistic, max |F_a - F_b|.
double ks_two_sample(std::vector<double> a, std::vector<double> b);

// Collects K central loss differences on (a) the given real batch and (b) a
// synthetic batch of standard-normal inputs with uniform labels, using one
// shared perturbation set, and compares the two empirical distributions.
PrivacyResult privacy_distribution_experiment(const Model& model,
                                              std::span<const double> params,
                                              const Batch& real_batch, int k,
                                              double sigma, std::uint64_t seed,
                                              int bins = 40, int workers = 1);

std::string privacy_csv(const PrivacyResult& r);
std::string privacy_json(const PrivacyResult& r);

} // namespace baffle
