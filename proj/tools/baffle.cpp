// Command-line front end: training runs, one-shot estimates, and the
// analysis subcommands. Exit codes: 0 success, 2 configuration error,
// 3 numeric error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "baffle/experiments.hpp"
#include "baffle/federation.hpp"
#include "baffle/io.hpp"
#include "baffle/oracle.hpp"
#include "baffle/rng.hpp"

namespace {

using namespace baffle;

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(std::stoi(part));
    return out;
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(std::stod(part));
    return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(std::stoull(part));
    return out;
}

GradientFn make_oracle_hook(GradientSource src, int workers) {
    if (src == GradientSource::OracleFD) {
        return [workers](const Model& m, std::span<const double> p, const Batch& b) {
            return exact_gradient_fd(m, p, b, {}, workers);
        };
    }
    if (src == GradientSource::OracleDense) {
        return [](const Model& m, std::span<const double> p, const Batch& b) {
            return exact_gradient_dense(m, p, b);
        };
    }
    return {};
}

struct RunArgs {
    std::string config_path;
    std::string set_rounds, set_k, set_sigma, set_scheme, set_mode, set_clients;
    std::string set_lr, set_optimizer, set_ema, set_precision, set_seed;
    std::string set_gradient, set_out, set_workers, set_batch;
};

RunConfig load_run_config(const RunArgs& a) {
    RunConfig cfg = load_config_file(a.config_path);
    const auto override_key = [&](const std::string& key, const std::string& value) {
        if (value.empty()) return;
        // Route overrides through the strict parser so they get the same
        // validation as the file contents.
        RunConfig probe = cfg;
        std::string text = serialize_config(probe);
        std::string patched;
        std::istringstream in(text);
        std::string line;
        while (std::getline(in, line)) {
            if (line.rfind(key + " =", 0) == 0) patched += key + " = " + value + "\n";
            else patched += line + "\n";
        }
        cfg = parse_config(patched);
    };
    override_key("rounds", a.set_rounds);
    override_key("k", a.set_k);
    override_key("sigma", a.set_sigma);
    override_key("scheme", a.set_scheme);
    override_key("mode", a.set_mode);
    override_key("clients", a.set_clients);
    override_key("lr", a.set_lr);
    override_key("optimizer", a.set_optimizer);
    override_key("ema", a.set_ema);
    override_key("precision", a.set_precision);
    override_key("seed", a.set_seed);
    override_key("gradient", a.set_gradient);
    override_key("out", a.set_out);
    override_key("workers", a.set_workers);
    override_key("batch", a.set_batch);
    return cfg;
}

int cmd_run(const RunArgs& args, bool quiet) {
    const RunConfig cfg = load_run_config(args);
    const Model model = build_model(cfg);
    const DataBundle data = build_data(cfg);

    RunHooks hooks;
    hooks.gradient_override = make_oracle_hook(cfg.gradient, 1);
    std::vector<std::uint8_t> wire_bytes;
    if (cfg.write_wire) {
        hooks.wire_sink = [&wire_bytes](const WireRecord& rec) {
            const auto bytes = encode_record(rec);
            wire_bytes.insert(wire_bytes.end(), bytes.begin(), bytes.end());
        };
    }
    if (!quiet) {
        hooks.on_round = [](const MetricsRow& r) {
            std::printf("round %4d  train %.4f/%.2f%%  test %.4f/%.2f%%  up %llu B\n",
                        r.round, r.train_loss, 100.0 * r.train_acc, r.test_loss,
                        100.0 * r.test_acc, (unsigned long long)r.uplink_bytes_total);
            std::fflush(stdout);
        };
    }

    const RunResult result = run_federated(model, data, cfg, hooks);

    const std::filesystem::path out(cfg.out);
    write_metrics_csv((out / "metrics.csv").string(), result.rows);
    write_text_file((out / "summary.json").string(),
                    run_summary_json(cfg, result.rows, result.wire_header_bytes));
    write_text_file((out / "config.txt").string(), serialize_config(cfg));
    if (cfg.write_wire) {
        std::filesystem::create_directories(out);
        std::ofstream f(out / "wire.bin", std::ios::binary);
        f.write((const char*)wire_bytes.data(), (std::streamsize)wire_bytes.size());
    }
    std::printf("final test acc %.4f (EMA), metrics in %s\n",
                result.rows.back().test_acc, (out / "metrics.csv").c_str());
    return 0;
}

int cmd_estimate(const std::string& config_path, int batch_size, std::uint64_t seed,
                 const std::string& out_dir) {
    RunConfig cfg = load_config_file(config_path);
    const Model model = build_model(cfg);
    const DataBundle data = build_data(cfg);
    const std::vector<double> params = model.init_params(seed);

    std::vector<std::size_t> idx;
    SeqRng rng(derive_seed({seed, 0xE5ull}));
    for (int i = 0; i < batch_size; ++i) idx.push_back(rng.index(data.train.size()));
    const Batch batch = make_batch(data.train, idx);

    EstimatorConfig est{cfg.sigma, cfg.k, cfg.scheme};
    const PerturbationStream stream(seed, 0, cfg.sigma, model.param_count());
    const std::vector<double> diffs =
        loss_diffs(model, params, batch, stream, est, cfg.precision, cfg.workers);
    const std::vector<double> ghat = estimate_gradient(diffs, stream, est);
    const std::vector<double> oracle =
        exact_gradient_fd(model, params, batch, {}, cfg.workers);

    double dot = 0, na = 0, nb = 0, err2 = 0;
    for (std::size_t i = 0; i < ghat.size(); ++i) {
        dot += ghat[i] * oracle[i];
        na += ghat[i] * ghat[i];
        nb += oracle[i] * oracle[i];
        err2 += (ghat[i] - oracle[i]) * (ghat[i] - oracle[i]);
    }
    const double cos = dot / (std::sqrt(na) * std::sqrt(nb) + 1e-300);
    const double rel = std::sqrt(err2) / (std::sqrt(nb) + 1e-300);
    std::printf("n=%zu K=%d scheme=%s cosine=%.6f rel_l2=%.6f\n", ghat.size(), cfg.k,
                cfg.scheme == Scheme::Central ? "central" : "forward", cos, rel);

    const std::filesystem::path out(out_dir.empty() ? cfg.out : out_dir);
    std::ostringstream csv;
    csv << "index,estimate,oracle\n";
    char buf[96];
    for (std::size_t i = 0; i < ghat.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, ghat[i], oracle[i]);
        csv << buf;
    }
    write_text_file((out / "estimate.csv").string(), csv.str());
    std::ostringstream js;
    js << "{\n  \"n\": " << ghat.size() << ",\n  \"k\": " << cfg.k
       << ",\n  \"cosine\": " << cos << ",\n  \"rel_l2\": " << rel << "\n}\n";
    write_text_file((out / "estimate.json").string(), js.str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"backpropagation-free federated learning simulator"};
    app.require_subcommand(1);

    RunArgs run_args;
    bool quiet = false;
    CLI::App* run = app.add_subcommand("run", "train with FedSGD or FedAvg");
    run->add_option("--config", run_args.config_path, "run config file")->required();
    run->add_option("--rounds", run_args.set_rounds);
    run->add_option("--k", run_args.set_k);
    run->add_option("--sigma", run_args.set_sigma);
    run->add_option("--scheme", run_args.set_scheme);
    run->add_option("--mode", run_args.set_mode);
    run->add_option("--clients", run_args.set_clients);
    run->add_option("--lr", run_args.set_lr);
    run->add_option("--optimizer", run_args.set_optimizer);
    run->add_option("--ema", run_args.set_ema);
    run->add_option("--precision", run_args.set_precision);
    run->add_option("--seed", run_args.set_seed);
    run->add_option("--gradient", run_args.set_gradient);
    run->add_option("--out", run_args.set_out);
    run->add_option("--workers", run_args.set_workers);
    run->add_option("--batch", run_args.set_batch);
    run->add_flag("--quiet", quiet, "suppress per-round output");

    std::string est_config, est_out;
    int est_batch = 64;
    std::uint64_t est_seed = 1;
    CLI::App* est = app.add_subcommand(
        "estimate", "one-shot gradient estimate vs the finite-difference oracle");
    est->add_option("--config", est_config)->required();
    est->add_option("--batch", est_batch);
    est->add_option("--seed", est_seed);
    est->add_option("--out", est_out);

    int cov_n = 64, cov_trials = 50, cov_workers = 0;
    std::string cov_grid = "64,256,1024,4096", cov_out = "out";
    std::uint64_t cov_seed = 1;
    CLI::App* cov = app.add_subcommand(
        "covariance", "empirical covariance deviation against K");
    cov->add_option("--n", cov_n);
    cov->add_option("--k-grid", cov_grid);
    cov->add_option("--trials", cov_trials);
    cov->add_option("--seed", cov_seed);
    cov->add_option("--workers", cov_workers);
    cov->add_option("--out", cov_out);

    int lin_fixtures = 1000, lin_trials = 1, lin_n = 8, lin_m = 6, lin_classes = 3;
    std::string lin_sigmas = "0.0001,0.001,0.01,0.1", lin_out = "out";
    std::uint64_t lin_seed = 1;
    CLI::App* lin = app.add_subcommand(
        "linear-check", "finite-difference identities on deep linear fixtures");
    lin->add_option("--fixtures", lin_fixtures);
    lin->add_option("--trials", lin_trials);
    lin->add_option("--n", lin_n);
    lin->add_option("--m", lin_m);
    lin->add_option("--classes", lin_classes);
    lin->add_option("--sigma", lin_sigmas);
    lin->add_option("--seed", lin_seed);
    lin->add_option("--out", lin_out);

    std::string abl_config, abl_seeds = "1,2,3", abl_out;
    CLI::App* abl = app.add_subcommand("ablate", "training-guideline ablations");
    abl->add_option("--config", abl_config)->required();
    abl->add_option("--seeds", abl_seeds);
    abl->add_option("--out", abl_out);

    std::string priv_config, priv_out;
    int priv_k = 500, priv_samples = 64, priv_bins = 40;
    std::uint64_t priv_seed = 1;
    CLI::App* priv = app.add_subcommand(
        "privacy", "loss-difference distributions: real data vs random noise");
    priv->add_option("--config", priv_config)->required();
    priv->add_option("--k", priv_k);
    priv->add_option("--samples", priv_samples);
    priv->add_option("--bins", priv_bins);
    priv->add_option("--seed", priv_seed);
    priv->add_option("--out", priv_out);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(run_args, quiet);

        if (est->parsed()) return cmd_estimate(est_config, est_batch, est_seed, est_out);

        if (cov->parsed()) {
            const auto grid = parse_int_list(cov_grid);
            const CovarianceStudy s = covariance_convergence_study(
                cov_n, grid, cov_trials, cov_seed, cov_workers);
            for (const auto& r : s.rows)
                std::printf("K=%5d  mean ||S-I||_2 = %.4f  ||S-I||_F = %.4f\n", r.k,
                            r.mean_spec_dev, r.mean_frob_dev);
            std::printf("log-log slope: %.4f\n", s.slope);
            const std::filesystem::path out(cov_out);
            write_text_file((out / "covariance.csv").string(), covariance_study_csv(s));
            write_text_file((out / "covariance.json").string(), covariance_study_json(s));
            return 0;
        }

        if (lin->parsed()) {
            const auto sigmas = parse_double_list(lin_sigmas);
            const LinearCheckReport r = linear_check_study(
                lin_fixtures, lin_n, lin_m, lin_classes, sigmas, lin_trials, lin_seed);
            std::printf("fixtures=%d trials/fixture=%d\n", lin_fixtures, lin_trials);
            std::printf("max scheme deviation (literal)     : %.3e\n", r.max_scheme_dev);
            std::printf("max central vs closed form         : %.3e\n",
                        r.max_central_closed_dev);
            std::printf("max forward vs closed form + cross : %.3e\n",
                        r.max_forward_expansion_dev);
            std::printf("max sigma-independence deviation   : %.3e\n", r.max_sigma_dev);
            const std::filesystem::path out(lin_out);
            write_text_file((out / "linear_check.csv").string(), linear_check_csv(r));
            write_text_file((out / "linear_check.json").string(), linear_check_json(r));
            return 0;
        }

        if (abl->parsed()) {
            RunConfig cfg = load_config_file(abl_config);
            const auto seeds = parse_seed_list(abl_seeds);
            const auto rows = ablation_run(cfg, seeds);
            for (const auto& r : rows)
                std::printf("%-10s mean acc %.4f  std %.4f  last20 var %.3e\n",
                            r.variant.c_str(), r.mean_acc, r.std_acc, r.mean_last20_var);
            const std::filesystem::path out(abl_out.empty() ? cfg.out : abl_out);
            write_text_file((out / "ablation.csv").string(), ablation_csv(rows));
            write_text_file((out / "ablation.json").string(), ablation_json(rows));
            return 0;
        }

        if (priv->parsed()) {
            RunConfig cfg = load_config_file(priv_config);
            const Model model = build_model(cfg);
            const DataBundle data = build_data(cfg);
            const std::vector<double> params = model.init_params(priv_seed);
            std::vector<std::size_t> idx;
            SeqRng rng(derive_seed({priv_seed, 0x9Aull}));
            for (int i = 0; i < priv_samples; ++i)
                idx.push_back(rng.index(data.test.size()));
            const Batch real = make_batch(data.test, idx);
            const PrivacyResult r = privacy_distribution_experiment(
                model, params, real, priv_k, cfg.sigma, priv_seed, priv_bins,
                cfg.workers);
            std::printf("real : mean %.3e  std %.3e  (n=%zu)\n", r.real.mean,
                        r.real.stddev, r.real.sample_count);
            std::printf("noise: mean %.3e  std %.3e  (n=%zu)\n", r.noise.mean,
                        r.noise.stddev, r.noise.sample_count);
            std::printf("two-sample KS statistic: %.4f\n", r.ks_statistic);
            const std::filesystem::path out(priv_out.empty() ? cfg.out : priv_out);
            write_text_file((out / "privacy.csv").string(), privacy_csv(r));
            write_text_file((out / "privacy.json").string(), privacy_json(r));
            return 0;
        }
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const IngestError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const CapabilityError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
