#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "baffle/nn.hpp"
#include "baffle/zo.hpp"

namespace baffle {

// Everything at the artifact boundary: run configuration, dataset ingestion,
// the binary wire format for simulated uploads, and metrics output.

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<float> inputs; // N x dim, row-major, values normalized
    std::vector<int> labels;
    std::vector<int> input_shape;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    int dim() const {
        int d = 1;
        for (int s : input_shape) d *= s;
        return d;
    }
};

struct DataBundle {
    Dataset train, test;
};

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices);
Batch full_batch(const Dataset& data);

// Two isotropic Gaussian blobs separated along the first coordinate.
Dataset make_two_gaussians(std::size_t n, int dim, double separation, std::uint64_t seed);

// Two interleaved spirals in the plane.
Dataset make_spirals(std::size_t n, double turns, double noise_std, std::uint64_t seed);

// IDX container (magic 0x00000803 for images, 0x00000801 for labels).
// Inputs normalized to [0,1]; optional spatial downsample by average pooling.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int downsample = 1, std::size_t limit = 0);

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

enum class DatasetKind { TwoGaussians, Spirals, IdxMnist };
enum class RunMode { FedSGD, FedAvg };
enum class PartitionKind { IID, DirichletLabel };
enum class GradientSource { Estimator, OracleFD, OracleDense };

struct OptimizerConfig {
    enum class Kind { SGD, Adam };
    Kind kind = Kind::Adam;
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;

    bool operator==(const OptimizerConfig&) const = default;
};

struct RunConfig {
    // model
    std::string model_text; // layer DSL, e.g. "dense(2,32) hardswish dense(32,2)"
    std::vector<int> input_shape;
    int num_classes = 0;
    Precision precision = Precision::F64;
    // dataset
    DatasetKind dataset = DatasetKind::Spirals;
    std::size_t data_size = 1000;
    std::size_t data_test_size = 1000;
    double data_turns = 2.0;     // spirals
    double data_noise = 0.05;    // spirals
    int data_dim = 2;            // two_gaussians
    double data_separation = 4.0;
    std::string data_images, data_labels, data_test_images, data_test_labels;
    int data_downsample = 1;
    std::size_t data_limit = 0; // 0 = all (idx datasets)
    std::uint64_t data_seed = 1234;
    // partition
    PartitionKind partition = PartitionKind::IID;
    int clients = 10;
    double alpha = 0.3;
    double participation = 1.0;
    // estimator
    double sigma = 1e-4;
    int k = 100;
    Scheme scheme = Scheme::Central;
    // communication mode
    RunMode mode = RunMode::FedSGD;
    int batch = 32;       // fedsgd local batch (0 = full shard)
    int local_epochs = 1; // fedavg
    int local_batch = 32; // fedavg
    // optimization
    OptimizerConfig optimizer;
    double ema = 0.995;
    int rounds = 0;
    std::uint64_t seed = 1;
    std::uint64_t partition_seed = 2;
    std::uint64_t mask_seed = 3;
    double mask_scale = 0.0; // 0 = calibrate from a warmup round
    GradientSource gradient = GradientSource::Estimator;
    int eval_every = 1;
    int workers = 0; // 0 = hardware concurrency
    std::string out = "out";
    bool write_wire = false;

    bool operator==(const RunConfig&) const = default;
};

// Strict line-oriented "key = value" parser: unknown keys, malformed values
// and violated invariants raise ConfigError anchored to the offending line.
RunConfig parse_config(const std::string& text);
RunConfig load_config_file(const std::string& path);

// Canonical serialization; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& cfg);

// FNV-1a over the canonical serialization.
std::uint64_t config_hash(const RunConfig& cfg);

// Layer DSL -> validated ModelSpec. Tokens: dense(IN,OUT[,nobias]),
// conv(IN_CH,OUT_CH,KERNEL[,STRIDE]), groupnorm(GROUPS,CHANNELS),
// relu | selu | hardswish | flatten.
ModelSpec parse_model_text(const std::string& text, std::vector<int> input_shape,
                           int num_classes);

Model build_model(const RunConfig& cfg);
DataBundle build_data(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// Wire records
// ---------------------------------------------------------------------------

// Layout (little-endian):
//   magic "BFFL" | version u16 | round u32 | client u32 | kind u8 | count u32
// followed by `count` IEEE-754 binary32 payload values. The 19-byte header is
// accounted separately from the 4*count payload bytes.
struct WireRecord {
    enum class Kind : std::uint8_t { LossDiffs = 1, ParamDelta = 2 };
    std::uint16_t version = 1;
    std::uint32_t round = 0;
    std::uint32_t client_id = 0;
    Kind kind = Kind::LossDiffs;
    std::vector<float> payload;

    bool operator==(const WireRecord&) const = default;
};

inline constexpr std::size_t kWireHeaderBytes = 19;
inline constexpr std::uint16_t kWireVersion = 1;

std::vector<std::uint8_t> encode_record(const WireRecord& rec);
WireRecord decode_record(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsRow {
    int round = 0;
    double wall_ms = 0.0;
    double train_loss = 0.0, train_acc = 0.0;
    double test_loss = 0.0, test_acc = 0.0;
    std::uint64_t uplink_bytes_total = 0;
    std::uint64_t downlink_bytes_total = 0;
};

std::string metrics_csv(std::span<const MetricsRow> rows);
void write_metrics_csv(const std::string& path, std::span<const MetricsRow> rows);

// JSON summary: config hash, final/best EMA accuracy, byte counters.
std::string run_summary_json(const RunConfig& cfg, std::span<const MetricsRow> rows,
                             std::uint64_t wire_header_bytes);
void write_text_file(const std::string& path, const std::string& text);

} // namespace baffle
