#include "baffle/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "baffle/parallel.hpp"
#include "baffle/rng.hpp"

namespace baffle {

namespace {

constexpr std::uint64_t kTagIid = 0x494944ull;       // "IID"
constexpr std::uint64_t kTagDirichlet = 0x444952ull; // "DIR"
constexpr std::uint64_t kTagMask = 0x4D41534Bull;    // "MASK"
constexpr std::uint64_t kTagBatch = 0x4241544348ull; // "BATCH"
constexpr std::uint64_t kTagPart = 0x50415254ull;    // "PART"
constexpr std::uint64_t kTagOrder = 0x4F524452ull;   // "ORDR"
constexpr std::uint64_t kTagLocal = 0xFEDAull;       // fedavg local streams

// Marsaglia-Tsang gamma sampler (shape alpha, unit scale).
double gamma_draw(SeqRng& rng, double alpha) {
    if (alpha < 1.0) {
        const double u = rng.next_uniform();
        return gamma_draw(rng, alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        const double x = rng.next_gaussian();
        const double t = 1.0 + c * x;
        if (t <= 0.0) continue;
        const double v = t * t * t;
        const double u = rng.next_uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

} // namespace

std::vector<ClientShard> partition(const Dataset& data, const PartitionSpec& spec) {
    const std::size_t n = data.size();
    if (n == 0) throw ConfigError("cannot partition an empty dataset");
    if (spec.clients < 1) throw ConfigError("client count must be >= 1");
    if ((std::size_t)spec.clients > n)
        throw ConfigError("client count " + std::to_string(spec.clients) +
                          " exceeds dataset size " + std::to_string(n));

    std::vector<ClientShard> shards((std::size_t)spec.clients);
    for (int c = 0; c < spec.clients; ++c) shards[(std::size_t)c].client_id = c;

    if (spec.kind == PartitionKind::IID) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        SeqRng rng(derive_seed({spec.seed, kTagIid}));
        rng.shuffle(std::span<std::size_t>(idx));
        for (std::size_t i = 0; i < n; ++i)
            shards[i % (std::size_t)spec.clients].indices.push_back(idx[i]);
        return shards;
    }

    if (spec.alpha <= 0.0) throw ConfigError("dirichlet alpha must be > 0");
    // Group sample indices by label, then split each class by Dirichlet draws.
    int num_classes = 0;
    for (int y : data.labels) num_classes = std::max(num_classes, y + 1);
    std::vector<std::vector<std::size_t>> by_class((std::size_t)num_classes);
    for (std::size_t i = 0; i < n; ++i)
        by_class[(std::size_t)data.labels[i]].push_back(i);

    SeqRng rng(derive_seed({spec.seed, kTagDirichlet}));
    for (int cls = 0; cls < num_classes; ++cls) {
        auto& members = by_class[(std::size_t)cls];
        rng.shuffle(std::span<std::size_t>(members));
        std::vector<double> prop((std::size_t)spec.clients);
        double total = 0.0;
        for (double& p : prop) {
            p = gamma_draw(rng, spec.alpha);
            total += p;
        }
        // Largest-remainder apportionment of this class's samples.
        const std::size_t m = members.size();
        std::vector<std::size_t> count((std::size_t)spec.clients, 0);
        std::vector<std::pair<double, int>> rem;
        std::size_t assigned = 0;
        for (int c = 0; c < spec.clients; ++c) {
            const double share = (double)m * prop[(std::size_t)c] / total;
            count[(std::size_t)c] = (std::size_t)share;
            assigned += count[(std::size_t)c];
            rem.push_back({share - std::floor(share), c});
        }
        std::sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;
        });
        for (std::size_t r = 0; assigned < m; ++r, ++assigned)
            ++count[(std::size_t)rem[r % rem.size()].second];

        std::size_t pos = 0;
        for (int c = 0; c < spec.clients; ++c)
            for (std::size_t i = 0; i < count[(std::size_t)c]; ++i)
                shards[(std::size_t)c].indices.push_back(members[pos++]);
    }

    // Dirichlet can starve clients; top empty shards up to one sample.
    for (auto& shard : shards) {
        if (!shard.indices.empty()) continue;
        auto largest = std::max_element(
            shards.begin(), shards.end(), [](const auto& a, const auto& b) {
                return a.indices.size() < b.indices.size();
            });
        shard.indices.push_back(largest->indices.back());
        largest->indices.pop_back();
    }
    return shards;
}

MaskShareSet make_masks(int clients, int k, std::int64_t round,
                        std::uint64_t mask_seed, double scale) {
    if (clients < 1) throw ConfigError("mask shares need at least one client");
    if (k < 1) throw ConfigError("mask shares need k >= 1");
    MaskShareSet set;
    set.eps.assign((std::size_t)clients, std::vector<double>((std::size_t)k, 0.0));
    if (clients == 1) return set; // zero-sum forces the single share to zero
    CounterRng rng(derive_seed({mask_seed, (std::uint64_t)round, kTagMask}));
    for (int c = 0; c + 1 < clients; ++c)
        for (int i = 0; i < k; ++i)
            set.eps[(std::size_t)c][(std::size_t)i] =
                scale * rng.gaussian((std::uint64_t)c * (std::uint64_t)k + (std::uint64_t)i);
    for (int i = 0; i < k; ++i) {
        double s = 0.0;
        for (int c = 0; c + 1 < clients; ++c) s += set.eps[(std::size_t)c][(std::size_t)i];
        set.eps[(std::size_t)clients - 1][(std::size_t)i] = -s;
    }
    return set;
}

namespace {

Batch shard_batch(const Dataset& data, const ClientShard& shard, int batch_size,
                  std::uint64_t batch_seed) {
    if (shard.indices.empty()) throw ConfigError("client shard is empty");
    if (batch_size <= 0 || (std::size_t)batch_size >= shard.n_c())
        return make_batch(data, shard.indices);
    std::vector<std::size_t> pick(shard.indices);
    SeqRng rng(batch_seed);
    rng.shuffle(std::span<std::size_t>(pick));
    pick.resize((std::size_t)batch_size);
    return make_batch(data, pick);
}

} // namespace

LossDiffUpload client_round(const Model& model, std::span<const double> params,
                            const Dataset& data, const ClientShard& shard,
                            int batch_size, std::uint64_t batch_seed,
                            const PerturbationStream& stream,
                            const EstimatorConfig& cfg,
                            std::span<const double> mask, double mask_weight,
                            Precision prec, int workers) {
    const Batch batch = shard_batch(data, shard, batch_size, batch_seed);
    LossDiffUpload up;
    up.round = stream.round();
    up.client_id = shard.client_id;
    up.values = loss_diffs(model, params, batch, stream, cfg, prec, workers);
    if (!mask.empty()) {
        if ((int)mask.size() != cfg.k)
            throw ProtocolError("mask length does not match K");
        for (int i = 0; i < cfg.k; ++i)
            up.values[(std::size_t)i] += mask_weight * mask[(std::size_t)i];
    }
    for (double v : up.values)
        if (!std::isfinite(v))
            throw NumericError("client " + std::to_string(shard.client_id) +
                               " produced a non-finite loss difference");
    return up;
}

std::vector<double> server_aggregate(const std::vector<LossDiffUpload>& uploads,
                                     const std::vector<ClientShard>& shards) {
    if (shards.empty()) throw ProtocolError("no shards to aggregate over");
    if (uploads.empty()) throw ProtocolError("no uploads to aggregate");

    std::size_t total = 0;
    for (const ClientShard& s : shards) total += s.n_c();
    const std::size_t k = uploads.front().values.size();
    const std::int64_t round = uploads.front().round;

    std::vector<const LossDiffUpload*> by_client(shards.size(), nullptr);
    for (const LossDiffUpload& up : uploads) {
        std::size_t slot = shards.size();
        for (std::size_t i = 0; i < shards.size(); ++i)
            if (shards[i].client_id == up.client_id) slot = i;
        if (slot == shards.size())
            throw ProtocolError("upload from unknown client " +
                                std::to_string(up.client_id));
        if (by_client[slot])
            throw ProtocolError("duplicate upload from client " +
                                std::to_string(up.client_id));
        if (up.values.size() != k)
            throw ProtocolError("upload from client " + std::to_string(up.client_id) +
                                " has " + std::to_string(up.values.size()) +
                                " values, expected " + std::to_string(k));
        if (up.round != round)
            throw ProtocolError("upload from client " + std::to_string(up.client_id) +
                                " is for round " + std::to_string(up.round) +
                                ", expected " + std::to_string(round));
        by_client[slot] = &up;
    }
    for (std::size_t i = 0; i < shards.size(); ++i)
        if (!by_client[i])
            throw ProtocolError("missing upload from client " +
                                std::to_string(shards[i].client_id));

    std::vector<double> agg(k, 0.0);
    for (std::size_t i = 0; i < shards.size(); ++i) {
        const double w = (double)shards[i].n_c() / (double)total;
        const auto& vals = by_client[i]->values;
        for (std::size_t j = 0; j < k; ++j) agg[j] += w * vals[j];
    }
    return agg;
}

ServerState ServerState::init(std::vector<double> initial, const OptimizerConfig& opt) {
    ServerState s;
    s.ema_params = initial;
    s.params = std::move(initial);
    if (opt.kind == OptimizerConfig::Kind::Adam) {
        s.adam_m.assign(s.params.size(), 0.0);
        s.adam_v.assign(s.params.size(), 0.0);
    }
    s.round = 0;
    return s;
}

namespace {

void ema_fold(std::vector<double>& ema, const std::vector<double>& params,
              double coeff) {
    for (std::size_t i = 0; i < ema.size(); ++i)
        ema[i] = coeff * ema[i] + (1.0 - coeff) * params[i];
}

} // namespace

void server_update(ServerState& state, std::span<const double> grad,
                   const OptimizerConfig& opt, double ema_coeff) {
    if (grad.size() != state.params.size())
        throw ConfigError("gradient length does not match parameters");
    for (double g : grad)
        if (!std::isfinite(g))
            throw NumericError("non-finite gradient estimate; round " +
                               std::to_string(state.round) + " aborted");

    if (opt.kind == OptimizerConfig::Kind::SGD) {
        for (std::size_t i = 0; i < state.params.size(); ++i)
            state.params[i] -= opt.lr * grad[i];
    } else {
        const std::int64_t t = state.round + 1;
        const double bc1 = 1.0 - std::pow(opt.beta1, (double)t);
        const double bc2 = 1.0 - std::pow(opt.beta2, (double)t);
        for (std::size_t i = 0; i < state.params.size(); ++i) {
            state.adam_m[i] = opt.beta1 * state.adam_m[i] + (1.0 - opt.beta1) * grad[i];
            state.adam_v[i] =
                opt.beta2 * state.adam_v[i] + (1.0 - opt.beta2) * grad[i] * grad[i];
            const double mhat = state.adam_m[i] / bc1;
            const double vhat = state.adam_v[i] / bc2;
            state.params[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
    ema_fold(state.ema_params, state.params, ema_coeff);
    ++state.round;
}

void server_apply_delta(ServerState& state, std::span<const double> delta,
                        double ema_coeff) {
    if (delta.size() != state.params.size())
        throw ConfigError("delta length does not match parameters");
    for (double d : delta)
        if (!std::isfinite(d))
            throw NumericError("non-finite model update; round " +
                               std::to_string(state.round) + " aborted");
    for (std::size_t i = 0; i < state.params.size(); ++i) state.params[i] += delta[i];
    ema_fold(state.ema_params, state.params, ema_coeff);
    ++state.round;
}

EvalResult evaluate(const Model& model, std::span<const double> params,
                    const Dataset& data, Precision prec, int workers) {
    const std::size_t n = data.size();
    if (n == 0) throw ConfigError("cannot evaluate on an empty dataset");
    const int dim = data.dim();
    const int classes = model.spec().num_classes;
    const std::size_t chunk = 256;
    const std::size_t chunks = (n + chunk - 1) / chunk;
    std::vector<double> loss_sum(chunks, 0.0);
    std::vector<std::size_t> correct(chunks, 0);

    parallel_for(chunks, workers, [&](std::size_t ci) {
        std::vector<double> x((std::size_t)dim), z((std::size_t)classes);
        const std::size_t lo = ci * chunk, hi = std::min(n, lo + chunk);
        for (std::size_t s = lo; s < hi; ++s) {
            const float* src = data.inputs.data() + s * (std::size_t)dim;
            for (int d = 0; d < dim; ++d) x[(std::size_t)d] = (double)src[d];
            model.logits(params, x, z, prec);
            double m = z[0];
            int best = 0;
            for (int c = 1; c < classes; ++c)
                if (z[(std::size_t)c] > m) m = z[(std::size_t)c], best = c;
            double sum = 0.0;
            for (int c = 0; c < classes; ++c) sum += std::exp(z[(std::size_t)c] - m);
            loss_sum[ci] += m + std::log(sum) - z[(std::size_t)data.labels[s]];
            if (best == data.labels[s]) ++correct[ci];
        }
    });

    EvalResult r;
    std::size_t hits = 0;
    for (std::size_t ci = 0; ci < chunks; ++ci) {
        r.loss += loss_sum[ci];
        hits += correct[ci];
    }
    r.loss /= (double)n;
    r.acc = (double)hits / (double)n;
    return r;
}

// ---------------------------------------------------------------------------
// Run loops
// ---------------------------------------------------------------------------

namespace {

struct ByteCounters {
    std::uint64_t uplink = 0, downlink = 0, headers = 0;
};

std::vector<int> pick_participants(int clients, double fraction, std::uint64_t seed,
                                   std::int64_t round) {
    std::vector<int> ids((std::size_t)clients);
    std::iota(ids.begin(), ids.end(), 0);
    if (fraction >= 1.0) return ids;
    const int m = std::max(1, (int)std::lround(fraction * clients));
    SeqRng rng(derive_seed({seed, (std::uint64_t)round, kTagPart}));
    rng.shuffle(std::span<int>(ids));
    ids.resize((std::size_t)m);
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<float> to_f32(std::span<const double> v) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (float)v[i];
    return out;
}

void emit_record(const RunHooks& hooks, ByteCounters& bytes, WireRecord::Kind kind,
                 std::int64_t round, int client, std::span<const double> payload) {
    bytes.uplink += 4ull * payload.size();
    bytes.headers += kWireHeaderBytes;
    if (hooks.wire_sink) {
        WireRecord rec;
        rec.round = (std::uint32_t)round;
        rec.client_id = (std::uint32_t)client;
        rec.kind = kind;
        rec.payload = to_f32(payload);
        hooks.wire_sink(rec);
    }
}

} // namespace

std::uint64_t fedsgd_batch_seed(std::uint64_t master, std::int64_t round, int client) {
    return derive_seed({master, (std::uint64_t)round, (std::uint64_t)client, kTagBatch});
}

std::uint64_t fedavg_local_stream_seed(std::uint64_t master, int client, int step) {
    return derive_seed({master, kTagLocal, (std::uint64_t)client, (std::uint64_t)step});
}

namespace {

double central_std(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= (double)v.size();
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::sqrt(var / (double)(v.size() - 1));
}

} // namespace

RunResult run_federated(const Model& model, const DataBundle& data,
                        const RunConfig& cfg, const RunHooks& hooks) {
    using clock = std::chrono::steady_clock;
    const std::size_t n = model.param_count();
    const int workers = cfg.workers;
    if (cfg.gradient != GradientSource::Estimator && !hooks.gradient_override)
        throw ConfigError("config requests an exact-gradient baseline but no "
                          "gradient source is attached to this run");

    PartitionSpec pspec;
    pspec.kind = cfg.partition;
    pspec.clients = cfg.clients;
    pspec.alpha = cfg.alpha;
    pspec.seed = cfg.partition_seed;
    const std::vector<ClientShard> shards = partition(data.train, pspec);

    EstimatorConfig est;
    est.sigma = cfg.sigma;
    est.k = cfg.k;
    est.scheme = cfg.scheme;

    ServerState state = ServerState::init(model.init_params(cfg.seed), cfg.optimizer);

    RunResult result;
    ByteCounters bytes;
    double mask_scale = cfg.mask_scale;
    bool mask_calibrated = cfg.mask_scale > 0.0 || cfg.clients == 1 ||
                           cfg.mode == RunMode::FedAvg ||
                           cfg.gradient != GradientSource::Estimator;

    const auto push_row = [&](int round, double wall_ms) {
        MetricsRow row;
        row.round = round;
        row.wall_ms = wall_ms;
        const EvalResult tr = evaluate(model, state.ema_params, data.train,
                                       cfg.precision, workers);
        const EvalResult te = evaluate(model, state.ema_params, data.test,
                                       cfg.precision, workers);
        row.train_loss = tr.loss;
        row.train_acc = tr.acc;
        row.test_loss = te.loss;
        row.test_acc = te.acc;
        row.uplink_bytes_total = bytes.uplink;
        row.downlink_bytes_total = bytes.downlink;
        result.rows.push_back(row);
        if (hooks.on_round) hooks.on_round(row);
    };

    push_row(0, 0.0);

    for (int t = 0; t < cfg.rounds; ++t) {
        const auto started = clock::now();
        const std::vector<int> active =
            pick_participants(cfg.clients, cfg.participation, cfg.seed, t);
        std::vector<const ClientShard*> round_shards;
        std::size_t n_active = 0;
        for (int id : active) {
            round_shards.push_back(&shards[(std::size_t)id]);
            n_active += shards[(std::size_t)id].n_c();
        }
        // Broadcast: parameters (4 bytes each on the wire) plus the round seed.
        bytes.downlink += (std::uint64_t)round_shards.size() * (4ull * n + 8ull);

        if (cfg.mode == RunMode::FedSGD) {
            const PerturbationStream stream(cfg.seed, t, cfg.sigma, n);

            if (hooks.gradient_override && cfg.gradient != GradientSource::Estimator) {
                // Conventional-gradient baseline: clients upload n-vector
                // gradients, the server averages them by shard weight.
                std::vector<std::vector<double>> grads(round_shards.size());
                parallel_for(round_shards.size(), workers, [&](std::size_t i) {
                    const ClientShard& shard = *round_shards[i];
                    const Batch batch =
                        shard_batch(data.train, shard, cfg.batch,
                                    fedsgd_batch_seed(cfg.seed, t, shard.client_id));
                    grads[i] = hooks.gradient_override(model, state.params, batch);
                });
                std::vector<double> ghat(n, 0.0);
                for (std::size_t i = 0; i < round_shards.size(); ++i) {
                    const double w = (double)round_shards[i]->n_c() / (double)n_active;
                    for (std::size_t j = 0; j < n; ++j) ghat[j] += w * grads[i][j];
                    emit_record(hooks, bytes, WireRecord::Kind::ParamDelta, t,
                                round_shards[i]->client_id, grads[i]);
                }
                server_update(state, ghat, cfg.optimizer, cfg.ema);
            } else {
                if (!mask_calibrated) {
                    // Warmup: size the masks off one client's unmasked spread.
                    const ClientShard& shard = *round_shards[0];
                    const LossDiffUpload probe = client_round(
                        model, state.params, data.train, shard, cfg.batch,
                        fedsgd_batch_seed(cfg.seed, t, shard.client_id), stream, est,
                        {}, 0.0, cfg.precision, workers);
                    mask_scale = 10.0 * central_std(probe.values);
                    mask_calibrated = true;
                }
                const MaskShareSet masks =
                    make_masks((int)round_shards.size(), cfg.k, t, cfg.mask_seed,
                               mask_scale);
                std::vector<LossDiffUpload> uploads(round_shards.size());
                parallel_for(round_shards.size(), workers, [&](std::size_t i) {
                    const ClientShard& shard = *round_shards[i];
                    const double weight = (double)n_active / (double)shard.n_c();
                    uploads[i] = client_round(
                        model, state.params, data.train, shard, cfg.batch,
                        fedsgd_batch_seed(cfg.seed, t, shard.client_id), stream, est,
                        masks.eps[i], weight, cfg.precision, 1);
                });
                std::vector<ClientShard> active_shards;
                for (const ClientShard* s : round_shards) active_shards.push_back(*s);
                for (const LossDiffUpload& up : uploads)
                    emit_record(hooks, bytes, WireRecord::Kind::LossDiffs, t,
                                up.client_id, up.values);
                const std::vector<double> agg = server_aggregate(uploads, active_shards);
                const std::vector<double> ghat = estimate_gradient(agg, stream, est);
                server_update(state, ghat, cfg.optimizer, cfg.ema);
            }
        } else {
            // FedAvg: local steps on locally estimated gradients, upload deltas.
            std::vector<std::vector<double>> deltas(round_shards.size());
            parallel_for(round_shards.size(), workers, [&](std::size_t i) {
                const ClientShard& shard = *round_shards[i];
                std::vector<double> local(state.params.begin(), state.params.end());
                int step = 0;
                for (int e = 0; e < cfg.local_epochs; ++e) {
                    std::vector<std::size_t> order(shard.indices);
                    SeqRng perm(derive_seed({cfg.seed, (std::uint64_t)t,
                                             (std::uint64_t)shard.client_id,
                                             (std::uint64_t)e, kTagOrder}));
                    perm.shuffle(std::span<std::size_t>(order));
                    for (std::size_t lo = 0; lo < order.size();
                         lo += (std::size_t)cfg.local_batch) {
                        const std::size_t hi =
                            std::min(order.size(), lo + (std::size_t)cfg.local_batch);
                        const Batch batch = make_batch(
                            data.train,
                            std::span<const std::size_t>(order.data() + lo, hi - lo));
                        std::vector<double> ghat;
                        if (hooks.gradient_override &&
                            cfg.gradient != GradientSource::Estimator) {
                            ghat = hooks.gradient_override(model, local, batch);
                        } else {
                            const PerturbationStream local_stream(
                                fedavg_local_stream_seed(cfg.seed, shard.client_id,
                                                         step),
                                t, cfg.sigma, n);
                            const std::vector<double> diffs = loss_diffs(
                                model, local, batch, local_stream, est, cfg.precision, 1);
                            ghat = estimate_gradient(diffs, local_stream, est);
                        }
                        for (std::size_t j = 0; j < n; ++j)
                            local[j] -= cfg.optimizer.lr * ghat[j];
                        ++step;
                    }
                }
                deltas[i].resize(n);
                for (std::size_t j = 0; j < n; ++j) deltas[i][j] = local[j] - state.params[j];
            });
            std::vector<double> delta(n, 0.0);
            for (std::size_t i = 0; i < round_shards.size(); ++i) {
                const double w = (double)round_shards[i]->n_c() / (double)n_active;
                for (std::size_t j = 0; j < n; ++j) delta[j] += w * deltas[i][j];
                emit_record(hooks, bytes, WireRecord::Kind::ParamDelta, t,
                            round_shards[i]->client_id, deltas[i]);
            }
            server_apply_delta(state, delta, cfg.ema);
        }

        const double wall_ms =
            std::chrono::duration<double, std::milli>(clock::now() - started).count();
        if ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds)
            push_row(t + 1, wall_ms);
    }

    result.params = state.params;
    result.ema_params = state.ema_params;
    result.uplink_payload_bytes = bytes.uplink;
    result.downlink_bytes = bytes.downlink;
    result.wire_header_bytes = bytes.headers;
    result.mask_scale = mask_scale;
    return result;
}

} // namespace baffle
