#include "baffle/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

#include "baffle/parallel.hpp"
#include "baffle/rng.hpp"
#include "baffle/zo.hpp"

namespace baffle {

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

// ---------------------------------------------------------------------------
// Deep-linear identities
// ---------------------------------------------------------------------------

DeepLinearFixture DeepLinearFixture::random(int n, int m, int classes,
                                            std::uint64_t seed) {
    if (n < 1 || m < 1 || classes < 1)
        throw ConfigError("deep-linear fixture needs positive dimensions");
    DeepLinearFixture f;
    f.n = n;
    f.m = m;
    f.classes = classes;
    f.w1.resize((std::size_t)n * m);
    f.w2.resize((std::size_t)classes * n);
    f.x.resize((std::size_t)m);
    CounterRng rng(derive_seed({seed, 0xDEE9ull}));
    std::uint64_t c = 0;
    for (double& v : f.w1) v = rng.gaussian(c++);
    for (double& v : f.w2) v = rng.gaussian(c++);
    for (double& v : f.x) v = rng.gaussian(c++);
    f.y = (int)(rng.bits(c) % (std::uint64_t)classes);
    return f;
}

double DeepLinearFixture::score(std::span<const double> d1,
                                std::span<const double> d2) const {
    // (w2[y] + d2) . ((W1 + d1) x)
    double h = 0.0;
    const double* wy = w2.data() + (std::size_t)y * n;
    for (int i = 0; i < n; ++i) {
        double row = 0.0;
        const double* w1r = w1.data() + (std::size_t)i * m;
        const double* d1r = d1.data() + (std::size_t)i * m;
        for (int j = 0; j < m; ++j) row += (w1r[j] + d1r[j]) * x[(std::size_t)j];
        h += (wy[i] + d2[(std::size_t)i]) * row;
    }
    return h;
}

double DeepLinearFixture::first_order(std::span<const double> d1,
                                      std::span<const double> d2) const {
    double acc = 0.0;
    const double* wy = w2.data() + (std::size_t)y * n;
    for (int i = 0; i < n; ++i) {
        double pert_row = 0.0, base_row = 0.0;
        const double* w1r = w1.data() + (std::size_t)i * m;
        const double* d1r = d1.data() + (std::size_t)i * m;
        for (int j = 0; j < m; ++j) {
            pert_row += d1r[j] * x[(std::size_t)j];
            base_row += w1r[j] * x[(std::size_t)j];
        }
        acc += wy[i] * pert_row + d2[(std::size_t)i] * base_row;
    }
    return acc;
}

double DeepLinearFixture::cross_term(std::span<const double> d1,
                                     std::span<const double> d2) const {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double row = 0.0;
        const double* d1r = d1.data() + (std::size_t)i * m;
        for (int j = 0; j < m; ++j) row += d1r[j] * x[(std::size_t)j];
        acc += d2[(std::size_t)i] * row;
    }
    return acc;
}

double DeepLinearFixture::response_scale() const {
    double wy2 = 0.0, x2 = 0.0, w1x2 = 0.0;
    const double* wy = w2.data() + (std::size_t)y * n;
    for (int i = 0; i < n; ++i) wy2 += wy[i] * wy[i];
    for (int j = 0; j < m; ++j) x2 += x[(std::size_t)j] * x[(std::size_t)j];
    for (int i = 0; i < n; ++i) {
        double row = 0.0;
        const double* w1r = w1.data() + (std::size_t)i * m;
        for (int j = 0; j < m; ++j) row += w1r[j] * x[(std::size_t)j];
        w1x2 += row * row;
    }
    return std::sqrt(wy2 * x2 + w1x2);
}

LinearCheckReport linear_scheme_identity(const DeepLinearFixture& fixture,
                                         std::span<const double> sigmas, int trials,
                                         std::uint64_t seed) {
    if (trials < 1) throw ConfigError("linear check needs trials >= 1");
    if (sigmas.empty()) throw ConfigError("linear check needs at least one sigma");
    LinearCheckReport rep;
    rep.trials = trials;
    rep.sigmas.assign(sigmas.begin(), sigmas.end());

    const std::size_t n1 = (std::size_t)fixture.n * fixture.m;
    const std::size_t n2 = (std::size_t)fixture.n;
    std::vector<double> z1(n1), z2(n2), d1(n1), d2(n2);
    CounterRng rng(derive_seed({seed, 0x11CEull}));

    for (int trial = 0; trial < trials; ++trial) {
        const std::uint64_t base =
            (std::uint64_t)trial * 2 * (n1 + n2); // disjoint counter ranges
        rng.fill_gaussian(z1, 1.0, base);
        rng.fill_gaussian(z2, 1.0, base + 2 * n1);

        // eps_abs: a draw whose first-order response lands near zero would
        // otherwise divide rounding noise by an arbitrarily small number.
        const double scale = fixture.response_scale();

        double prev_q = 0.0;
        for (std::size_t si = 0; si < sigmas.size(); ++si) {
            const double s = sigmas[si];
            const double s2 = s * s;
            for (std::size_t i = 0; i < n1; ++i) d1[i] = s * z1[i];
            for (std::size_t i = 0; i < n2; ++i) d2[i] = s * z2[i];

            std::vector<double> zero1(n1, 0.0), zero2(n2, 0.0);
            std::vector<double> neg1(n1), neg2(n2);
            for (std::size_t i = 0; i < n1; ++i) neg1[i] = -d1[i];
            for (std::size_t i = 0; i < n2; ++i) neg2[i] = -d2[i];

            const double h0 = fixture.score(zero1, zero2);
            const double hp = fixture.score(d1, d2);
            const double hm = fixture.score(neg1, neg2);
            const double d_for = hp - h0;
            const double d_ctr = hp - hm;
            const double closed = fixture.first_order(d1, d2);
            const double cross = fixture.cross_term(d1, d2);

            const double eps_abs = scale / s; // response rms on the /s^2 scale
            const double nf = d_for / s2;
            const double nc = d_ctr / (2.0 * s2);
            rep.max_scheme_dev = std::max(
                rep.max_scheme_dev, std::fabs(nf - nc) / (std::fabs(nc) + eps_abs));
            rep.max_central_closed_dev = std::max(
                rep.max_central_closed_dev,
                std::fabs(nc - closed / s2) / (std::fabs(closed / s2) + eps_abs));
            rep.max_forward_expansion_dev = std::max(
                rep.max_forward_expansion_dev,
                std::fabs(nf - (closed + cross) / s2) /
                    (std::fabs((closed + cross) / s2) + eps_abs));

            // Normalized central response (d_ctr / 2 sigma) is sigma-free
            // given shared standard-normal draws.
            const double q = d_ctr / (2.0 * s);
            if (si > 0)
                rep.max_sigma_dev = std::max(rep.max_sigma_dev,
                                             std::fabs(q - prev_q) /
                                                 (std::fabs(q) + 0.5 * scale));
            prev_q = q;
        }
    }
    return rep;
}

LinearCheckReport linear_check_study(int fixtures, int n, int m, int classes,
                                     std::span<const double> sigmas, int trials,
                                     std::uint64_t seed) {
    LinearCheckReport total;
    total.sigmas.assign(sigmas.begin(), sigmas.end());
    for (int f = 0; f < fixtures; ++f) {
        const DeepLinearFixture fixture =
            DeepLinearFixture::random(n, m, classes, derive_seed({seed, (std::uint64_t)f}));
        const LinearCheckReport r = linear_scheme_identity(
            fixture, sigmas, trials, derive_seed({seed, (std::uint64_t)f, 1}));
        total.trials += r.trials;
        total.max_scheme_dev = std::max(total.max_scheme_dev, r.max_scheme_dev);
        total.max_central_closed_dev =
            std::max(total.max_central_closed_dev, r.max_central_closed_dev);
        total.max_forward_expansion_dev =
            std::max(total.max_forward_expansion_dev, r.max_forward_expansion_dev);
        total.max_sigma_dev = std::max(total.max_sigma_dev, r.max_sigma_dev);
    }
    return total;
}

std::string linear_check_csv(const LinearCheckReport& r) {
    std::ostringstream o;
    o << "metric,value\n";
    o << "trials," << r.trials << "\n";
    o << "max_scheme_dev," << fmt(r.max_scheme_dev) << "\n";
    o << "max_central_closed_dev," << fmt(r.max_central_closed_dev) << "\n";
    o << "max_forward_expansion_dev," << fmt(r.max_forward_expansion_dev) << "\n";
    o << "max_sigma_dev," << fmt(r.max_sigma_dev) << "\n";
    return o.str();
}

std::string linear_check_json(const LinearCheckReport& r) {
    nlohmann::ordered_json j;
    j["trials"] = r.trials;
    j["sigmas"] = r.sigmas;
    j["max_scheme_dev"] = r.max_scheme_dev;
    j["max_central_closed_dev"] = r.max_central_closed_dev;
    j["max_forward_expansion_dev"] = r.max_forward_expansion_dev;
    j["max_sigma_dev"] = r.max_sigma_dev;
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Covariance convergence
// ---------------------------------------------------------------------------

CovarianceStudy covariance_convergence_study(int dim, std::span<const int> k_grid,
                                             int trials, std::uint64_t seed,
                                             int workers) {
    if (dim < 1) throw ConfigError("covariance study needs dim >= 1");
    if (trials < 1) throw ConfigError("covariance study needs trials >= 1");
    if (k_grid.empty()) throw ConfigError("covariance study needs a K grid");
    for (std::size_t i = 1; i < k_grid.size(); ++i)
        if (k_grid[i] <= k_grid[i - 1])
            throw ConfigError("covariance study K grid must be ascending");

    CovarianceStudy study;
    study.dim = dim;
    study.trials = trials;
    for (int k : k_grid) {
        std::vector<double> spec((std::size_t)trials), frob((std::size_t)trials);
        parallel_for((std::size_t)trials, workers, [&](std::size_t t) {
            const PerturbationStream stream(
                derive_seed({seed, (std::uint64_t)k, (std::uint64_t)t}), 0, 1e-4,
                (std::size_t)dim);
            const CovarianceDiag d = covariance_diagnostics(stream, k);
            spec[t] = d.spec_dev;
            frob[t] = d.frob_dev;
        });
        CovarianceStudyRow row;
        row.k = k;
        for (int t = 0; t < trials; ++t) {
            row.mean_spec_dev += spec[(std::size_t)t];
            row.mean_frob_dev += frob[(std::size_t)t];
        }
        row.mean_spec_dev /= trials;
        row.mean_frob_dev /= trials;
        study.rows.push_back(row);
    }

    // Least-squares slope of log(mean spectral deviation) against log K.
    const std::size_t p = study.rows.size();
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const CovarianceStudyRow& r : study.rows) {
        const double lx = std::log((double)r.k);
        const double ly = std::log(r.mean_spec_dev);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    const double denom = (double)p * sxx - sx * sx;
    study.slope = denom != 0.0 ? ((double)p * sxy - sx * sy) / denom : 0.0;
    return study;
}

std::string covariance_study_csv(const CovarianceStudy& s) {
    std::ostringstream o;
    o << "k,mean_spec_dev,mean_frob_dev\n";
    for (const CovarianceStudyRow& r : s.rows)
        o << r.k << "," << fmt(r.mean_spec_dev) << "," << fmt(r.mean_frob_dev) << "\n";
    return o.str();
}

std::string covariance_study_json(const CovarianceStudy& s) {
    nlohmann::ordered_json j;
    j["dim"] = s.dim;
    j["trials"] = s.trials;
    j["slope"] = s.slope;
    auto rows = nlohmann::ordered_json::array();
    for (const CovarianceStudyRow& r : s.rows)
        rows.push_back({{"k", r.k},
                        {"mean_spec_dev", r.mean_spec_dev},
                        {"mean_frob_dev", r.mean_frob_dev}});
    j["rows"] = rows;
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Guideline ablations
// ---------------------------------------------------------------------------

namespace {

std::string swap_activation(const std::string& model_text, const std::string& to) {
    std::stringstream in(model_text);
    std::string tok, out;
    while (in >> tok) {
        if (tok == "hardswish" || tok == "relu" || tok == "selu") tok = to;
        if (!out.empty()) out += " ";
        out += tok;
    }
    return out;
}

double variance(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= (double)v.size();
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return var / (double)(v.size() - 1);
}

} // namespace

std::vector<AblationResult> ablation_run(const RunConfig& base,
                                         std::span<const std::uint64_t> seeds) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");

    struct Variant {
        std::string name;
        RunConfig cfg;
    };
    // Equal forward budget: central spends 2K forwards on K central
    // differences; twice-FD spends them on 2K forward differences (the shared
    // baseline forward is amortized across the batch).
    std::vector<Variant> variants;
    {
        RunConfig c = base;
        c.scheme = Scheme::Forward;
        c.k = 2 * base.k;
        variants.push_back({"twice_fd", c});
    }
    {
        RunConfig c = base;
        c.scheme = Scheme::Central;
        variants.push_back({"central", c});
    }
    {
        RunConfig c = base;
        c.scheme = Scheme::Forward;
        c.k = 2 * base.k;
        c.model_text = swap_activation(base.model_text, "relu");
        variants.push_back({"relu", c});
    }
    {
        RunConfig c = base;
        c.scheme = Scheme::Forward;
        c.k = 2 * base.k;
        c.model_text = swap_activation(base.model_text, "selu");
        variants.push_back({"selu", c});
    }
    {
        RunConfig c = base;
        c.scheme = Scheme::Forward;
        c.k = 2 * base.k;
        c.ema = 0.0;
        variants.push_back({"no_ema", c});
    }

    std::vector<AblationResult> results;
    for (const Variant& v : variants) {
        AblationResult res;
        res.variant = v.name;
        double var_sum = 0.0;
        for (std::uint64_t seed : seeds) {
            RunConfig cfg = v.cfg;
            cfg.seed = seed;
            cfg.eval_every = 1;
            const Model model = build_model(cfg);
            const DataBundle data = build_data(cfg);
            const RunResult run = run_federated(model, data, cfg);
            res.final_accs.push_back(run.rows.back().test_acc);
            const std::size_t rows = run.rows.size();
            const std::size_t take = std::min<std::size_t>(20, rows);
            std::vector<double> tail;
            for (std::size_t i = rows - take; i < rows; ++i)
                tail.push_back(run.rows[i].test_acc);
            var_sum += variance(tail);
        }
        double mean = 0.0;
        for (double a : res.final_accs) mean += a;
        mean /= (double)res.final_accs.size();
        res.mean_acc = mean;
        res.std_acc = std::sqrt(variance(res.final_accs));
        res.mean_last20_var = var_sum / (double)seeds.size();
        results.push_back(std::move(res));
    }
    return results;
}

std::string ablation_csv(std::span<const AblationResult> rows) {
    std::ostringstream o;
    o << "variant,mean_acc,std_acc,mean_last20_var,seed_accs\n";
    for (const AblationResult& r : rows) {
        o << r.variant << "," << fmt(r.mean_acc) << "," << fmt(r.std_acc) << ","
          << fmt(r.mean_last20_var) << ",";
        for (std::size_t i = 0; i < r.final_accs.size(); ++i)
            o << (i ? ";" : "") << fmt(r.final_accs[i]);
        o << "\n";
    }
    return o.str();
}

std::string ablation_json(std::span<const AblationResult> rows) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const AblationResult& r : rows)
        j.push_back({{"variant", r.variant},
                     {"mean_acc", r.mean_acc},
                     {"std_acc", r.std_acc},
                     {"mean_last20_var", r.mean_last20_var},
                     {"seed_accs", r.final_accs}});
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Loss-difference distribution (privacy experiment)
// ---------------------------------------------------------------------------

namespace {

DistributionReport summarize(std::span<const double> values,
                             std::span<const double> edges) {
    DistributionReport rep;
    rep.sample_count = values.size();
    for (double v : values) rep.mean += v;
    rep.mean /= (double)values.size();
    double var = 0.0;
    for (double v : values) var += (v - rep.mean) * (v - rep.mean);
    rep.stddev = values.size() > 1 ? std::sqrt(var / (double)(values.size() - 1)) : 0.0;
    rep.bin_edges.assign(edges.begin(), edges.end());
    rep.bin_counts.assign(edges.size() - 1, 0);
    for (double v : values) {
        std::size_t bin = edges.size() - 2;
        for (std::size_t b = 0; b + 1 < edges.size(); ++b) {
            if (v < edges[b + 1] || b + 2 == edges.size()) {
                bin = b;
                break;
            }
        }
        ++rep.bin_counts[bin];
    }
    return rep;
}

} // namespace

double ks_two_sample(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double ks = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        // Step past ties in both samples before comparing the CDFs.
        const double v = std::min(a[i], b[j]);
        while (i < a.size() && a[i] == v) ++i;
        while (j < b.size() && b[j] == v) ++j;
        const double fa = (double)i / (double)a.size();
        const double fb = (double)j / (double)b.size();
        ks = std::max(ks, std::fabs(fa - fb));
    }
    return ks;
}

PrivacyResult privacy_distribution_experiment(const Model& model,
                                              std::span<const double> params,
                                              const Batch& real_batch, int k,
                                              double sigma, std::uint64_t seed,
                                              int bins, int workers) {
    if (k < 1) throw ConfigError("privacy experiment needs k >= 1");
    if (bins < 2) throw ConfigError("privacy experiment needs bins >= 2");

    // Synthetic comparison batch: standard-normal inputs, uniform labels.
    Batch noise_batch;
    noise_batch.inputs.resize(real_batch.inputs.size());
    noise_batch.labels.resize(real_batch.labels.size());
    CounterRng rng(derive_seed({seed, 0x9012ull}));
    for (std::size_t i = 0; i < noise_batch.inputs.size(); ++i)
        noise_batch.inputs[i] = rng.gaussian(i);
    const int classes = model.spec().num_classes;
    for (std::size_t i = 0; i < noise_batch.labels.size(); ++i)
        noise_batch.labels[i] =
            (int)(rng.bits(noise_batch.inputs.size() + i) % (std::uint64_t)classes);

    const PerturbationStream stream(derive_seed({seed, 0x9013ull}), 0, sigma,
                                    model.param_count());
    EstimatorConfig cfg;
    cfg.sigma = sigma;
    cfg.k = k;
    cfg.scheme = Scheme::Central;
    const std::vector<double> real_diffs =
        loss_diffs(model, params, real_batch, stream, cfg, Precision::F64, workers);
    const std::vector<double> noise_diffs =
        loss_diffs(model, params, noise_batch, stream, cfg, Precision::F64, workers);

    double lo = real_diffs[0], hi = real_diffs[0];
    for (double v : real_diffs) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : noise_diffs) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi <= lo) hi = lo + 1e-12;
    const double pad = 1e-9 * (hi - lo);
    lo -= pad;
    hi += pad;
    std::vector<double> edges((std::size_t)bins + 1);
    for (int b = 0; b <= bins; ++b)
        edges[(std::size_t)b] = lo + (hi - lo) * (double)b / bins;

    PrivacyResult out;
    out.real = summarize(real_diffs, edges);
    out.noise = summarize(noise_diffs, edges);
    out.ks_statistic = ks_two_sample(real_diffs, noise_diffs);
    out.real.ks_statistic = out.ks_statistic;
    out.noise.ks_statistic = out.ks_statistic;
    return out;
}

std::string privacy_csv(const PrivacyResult& r) {
    std::ostringstream o;
    o << "bin_lo,bin_hi,count_real,count_noise\n";
    for (std::size_t b = 0; b + 1 < r.real.bin_edges.size(); ++b)
        o << fmt(r.real.bin_edges[b]) << "," << fmt(r.real.bin_edges[b + 1]) << ","
          << r.real.bin_counts[b] << "," << r.noise.bin_counts[b] << "\n";
    return o.str();
}

std::string privacy_json(const PrivacyResult& r) {
    nlohmann::ordered_json j;
    j["ks_statistic"] = r.ks_statistic;
    j["real"] = {{"sample_count", r.real.sample_count},
                 {"mean", r.real.mean},
                 {"stddev", r.real.stddev}};
    j["noise"] = {{"sample_count", r.noise.sample_count},
                  {"mean", r.noise.mean},
                  {"stddev", r.noise.stddev}};
    return j.dump(2) + "\n";
}

} // namespace baffle
