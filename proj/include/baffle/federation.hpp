#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "baffle/io.hpp"
#include "baffle/nn.hpp"
#include "baffle/zo.hpp"

namespace baffle {

// Protocol runtime: dataset partitioning across simulated clients, per-round
// seed broadcast, client-side loss-difference computation with zero-sum
// masking, server-side aggregation and parameter updates, in both batch-level
// (FedSGD) and epoch-level (FedAvg) communication settings.

struct ClientShard {
    int client_id = 0;
    std::vector<std::size_t> indices; // into the global dataset
    std::size_t n_c() const { return indices.size(); }
};

struct PartitionSpec {
    PartitionKind kind = PartitionKind::IID;
    int clients = 1;
    double alpha = 0.3; // Dirichlet concentration (label non-iid only)
    std::uint64_t seed = 0;
};

// Shards are disjoint and cover the dataset. IID deals a shuffled index list
// round-robin (sizes differ by at most one). DirichletLabel samples, per
// class, client proportions from Dirichlet(alpha * 1_C) and splits that
// class's samples accordingly; empty shards are topped up to one sample from
// the largest shard.
std::vector<ClientShard> partition(const Dataset& data, const PartitionSpec& spec);

// Zero-sum mask shares for one round: the first C-1 shares are N(0, scale^2)
// draws, the last is the negated sum, so a componentwise sum in share order
// is exactly zero.
struct MaskShareSet {
    std::vector<std::vector<double>> eps; // clients x k
};

MaskShareSet make_masks(int clients, int k, std::int64_t round,
                        std::uint64_t mask_seed, double scale);

struct LossDiffUpload {
    std::int64_t round = 0;
    int client_id = 0;
    std::vector<double> values; // K masked loss differences
};

// One client's FedSGD round: sample a local batch (batch_size = 0 means the
// whole shard), compute the K scheme loss differences, then add
// (N/N_c) * mask[k] to each. `batch_seed` keys the batch draw.
LossDiffUpload client_round(const Model& model, std::span<const double> params,
                            const Dataset& data, const ClientShard& shard,
                            int batch_size, std::uint64_t batch_seed,
                            const PerturbationStream& stream,
                            const EstimatorConfig& cfg,
                            std::span<const double> mask, double mask_weight,
                            Precision prec = Precision::F64, int workers = 1);

// Weighted aggregate sum_c (N_c/N) * upload_c[k]. Masks cancel by zero-sum
// construction. Exactly one upload per shard, all for the same round.
std::vector<double> server_aggregate(const std::vector<LossDiffUpload>& uploads,
                                     const std::vector<ClientShard>& shards);

struct ServerState {
    std::vector<double> params;
    std::vector<double> ema_params;
    std::vector<double> adam_m, adam_v; // empty under SGD
    std::int64_t round = 0;

    static ServerState init(std::vector<double> initial, const OptimizerConfig& opt);
};

// Applies one optimizer step with gradient `grad`, then folds the raw
// parameters into the EMA shadow (ema <- c*ema + (1-c)*params) and advances
// the round. A non-finite gradient aborts with NumericError before any state
// changes. Evaluation reads ema_params; training continues from params.
void server_update(ServerState& state, std::span<const double> grad,
                   const OptimizerConfig& opt, double ema_coeff);

// FedAvg server step: params <- params + delta, then EMA fold and round
// advance, with the same non-finite guard.
void server_apply_delta(ServerState& state, std::span<const double> delta,
                        double ema_coeff);

struct EvalResult {
    double loss = 0.0;
    double acc = 0.0;
};

EvalResult evaluate(const Model& model, std::span<const double> params,
                    const Dataset& data, Precision prec = Precision::F64,
                    int workers = 1);

// Replaces the zeroth-order estimator with an externally supplied gradient
// (used by exact-gradient baseline runs; the simulator itself never depends
// on such a source).
using GradientFn = std::function<std::vector<double>(
    const Model&, std::span<const double>, const Batch&)>;

struct RunHooks {
    GradientFn gradient_override;
    std::function<void(const WireRecord&)> wire_sink;
    std::function<void(const MetricsRow&)> on_round;
};

struct RunResult {
    std::vector<MetricsRow> rows; // initial state + one row per round
    std::vector<double> params, ema_params;
    std::uint64_t uplink_payload_bytes = 0; // 4K (FedSGD) / 4n (FedAvg) per client-round
    std::uint64_t downlink_bytes = 0;
    std::uint64_t wire_header_bytes = 0;
    double mask_scale = 0.0; // the scale actually used
};

// Seed derivations used by the run loops. Exposed so any party (or test) can
// regenerate the same batches and perturbation streams from the master seed.
std::uint64_t fedsgd_batch_seed(std::uint64_t master, std::int64_t round, int client);
std::uint64_t fedavg_local_stream_seed(std::uint64_t master, int client, int step);

RunResult run_federated(const Model& model, const DataBundle& data,
                        const RunConfig& cfg, const RunHooks& hooks = {});

} // namespace baffle
