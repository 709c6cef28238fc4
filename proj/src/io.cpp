#include "baffle/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "baffle/rng.hpp"

namespace baffle {

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
    Batch b;
    const int dim = data.dim();
    b.inputs.resize(indices.size() * (std::size_t)dim);
    b.labels.resize(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t s = indices[i];
        if (s >= data.size()) throw ConfigError("batch index out of range");
        const float* src = data.inputs.data() + s * (std::size_t)dim;
        double* dst = b.inputs.data() + i * (std::size_t)dim;
        for (int d = 0; d < dim; ++d) dst[(std::size_t)d] = (double)src[d];
        b.labels[i] = data.labels[s];
    }
    return b;
}

Batch full_batch(const Dataset& data) {
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return make_batch(data, idx);
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

Dataset make_two_gaussians(std::size_t n, int dim, double separation,
                           std::uint64_t seed) {
    if (n < 1 || dim < 1) throw ConfigError("two_gaussians needs n >= 1, dim >= 1");
    Dataset d;
    d.input_shape = {dim};
    d.num_classes = 2;
    d.inputs.resize(n * (std::size_t)dim);
    d.labels.resize(n);
    SeqRng rng(derive_seed({seed, 0x2A55ull}));
    for (std::size_t i = 0; i < n; ++i) {
        const int y = (int)(i % 2);
        d.labels[i] = y;
        float* row = d.inputs.data() + i * (std::size_t)dim;
        for (int j = 0; j < dim; ++j) row[(std::size_t)j] = (float)rng.next_gaussian();
        row[0] += (float)((y == 1 ? 0.5 : -0.5) * separation);
    }
    return d;
}

Dataset make_spirals(std::size_t n, double turns, double noise_std,
                     std::uint64_t seed) {
    if (n < 1) throw ConfigError("spirals needs n >= 1");
    Dataset d;
    d.input_shape = {2};
    d.num_classes = 2;
    d.inputs.resize(n * 2);
    d.labels.resize(n);
    SeqRng rng(derive_seed({seed, 0x5C12ull}));
    for (std::size_t i = 0; i < n; ++i) {
        const int y = (int)(i % 2);
        const double t = rng.next_uniform();
        const double r = 0.15 + 0.85 * t;
        const double a = 2.0 * M_PI * turns * t + M_PI * y;
        d.labels[i] = y;
        d.inputs[i * 2] = (float)(r * std::cos(a) + noise_std * rng.next_gaussian());
        d.inputs[i * 2 + 1] = (float)(r * std::sin(a) + noise_std * rng.next_gaussian());
    }
    return d;
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return bytes;
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off,
                   const std::string& path) {
    if (off + 4 > b.size())
        throw IngestError("'" + path + "': truncated at byte offset " +
                          std::to_string(off) + " (need 4 bytes)");
    return ((std::uint32_t)b[off] << 24) | ((std::uint32_t)b[off + 1] << 16) |
           ((std::uint32_t)b[off + 2] << 8) | (std::uint32_t)b[off + 3];
}

char hex_digit(unsigned v) { return (char)(v < 10 ? '0' + v : 'a' + v - 10); }

std::string hex32(std::uint32_t v) {
    std::string s = "0x";
    for (int i = 7; i >= 0; --i) s += hex_digit((v >> (4 * i)) & 0xF);
    return s;
}

} // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 int downsample, std::size_t limit) {
    if (downsample < 1) throw ConfigError("downsample factor must be >= 1");
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);

    const std::uint32_t img_magic = be32(img, 0, images_path);
    if (img_magic != 0x00000803u)
        throw IngestError("'" + images_path + "': bad magic " + hex32(img_magic) +
                          " at byte offset 0 (expected 0x00000803)");
    const std::uint32_t lab_magic = be32(lab, 0, labels_path);
    if (lab_magic != 0x00000801u)
        throw IngestError("'" + labels_path + "': bad magic " + hex32(lab_magic) +
                          " at byte offset 0 (expected 0x00000801)");

    const std::size_t count = be32(img, 4, images_path);
    const std::size_t rows = be32(img, 8, images_path);
    const std::size_t cols = be32(img, 12, images_path);
    const std::size_t lab_count = be32(lab, 4, labels_path);
    if (count != lab_count)
        throw IngestError("image count " + std::to_string(count) +
                          " does not match label count " + std::to_string(lab_count));
    if (img.size() < 16 + count * rows * cols)
        throw IngestError("'" + images_path + "': truncated pixel data at byte offset " +
                          std::to_string(img.size()) + " (need " +
                          std::to_string(16 + count * rows * cols) + " bytes)");
    if (lab.size() < 8 + count)
        throw IngestError("'" + labels_path + "': truncated label data at byte offset " +
                          std::to_string(lab.size()) + " (need " +
                          std::to_string(8 + count) + " bytes)");
    if (rows % (std::size_t)downsample != 0 || cols % (std::size_t)downsample != 0)
        throw ConfigError("downsample factor " + std::to_string(downsample) +
                          " does not divide image size " + std::to_string(rows) + "x" +
                          std::to_string(cols));

    const std::size_t take = limit > 0 ? std::min(limit, count) : count;
    const std::size_t oh = rows / (std::size_t)downsample;
    const std::size_t ow = cols / (std::size_t)downsample;

    Dataset d;
    d.input_shape = {1, (int)oh, (int)ow};
    d.inputs.resize(take * oh * ow);
    d.labels.resize(take);
    int max_label = 0;
    const double pool = (double)downsample * downsample;
    for (std::size_t s = 0; s < take; ++s) {
        const std::uint8_t* px = img.data() + 16 + s * rows * cols;
        float* out = d.inputs.data() + s * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = 0.0;
                for (int dy = 0; dy < downsample; ++dy)
                    for (int dx = 0; dx < downsample; ++dx)
                        acc += px[(y * (std::size_t)downsample + (std::size_t)dy) * cols +
                                  x * (std::size_t)downsample + (std::size_t)dx];
                out[y * ow + x] = (float)(acc / pool / 255.0);
            }
        }
        d.labels[s] = lab[8 + s];
        max_label = std::max(max_label, d.labels[s]);
    }
    d.num_classes = max_label + 1;
    return d;
}

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad(int line, const std::string& msg) {
    throw ConfigError("line " + std::to_string(line) + ": " + msg);
}

double to_double(const std::string& v, int line, const std::string& key) {
    char* end = nullptr;
    const double x = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0') bad(line, key + " must be a number, got '" + v + "'");
    return x;
}

long long to_ll(const std::string& v, int line, const std::string& key) {
    char* end = nullptr;
    const long long x = std::strtoll(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0') bad(line, key + " must be an integer, got '" + v + "'");
    return x;
}

std::uint64_t to_u64(const std::string& v, int line, const std::string& key) {
    char* end = nullptr;
    const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0' || (!v.empty() && v[0] == '-'))
        bad(line, key + " must be a non-negative integer, got '" + v + "'");
    return x;
}

bool to_bool(const std::string& v, int line, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    bad(line, key + " must be true/false, got '" + v + "'");
}

std::vector<int> to_shape(const std::string& v, int line) {
    std::vector<int> shape;
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        part = trim(part);
        if (part.empty()) bad(line, "input_shape has an empty dimension");
        shape.push_back((int)to_ll(part, line, "input_shape"));
        if (shape.back() <= 0) bad(line, "input_shape dimensions must be positive");
    }
    if (shape.empty()) bad(line, "input_shape is empty");
    return shape;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::map<std::string, bool> seen;
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        std::string s = raw;
        if (std::size_t h = s.find('#'); h != std::string::npos) s = s.substr(0, h);
        s = trim(s);
        if (s.empty()) continue;
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos) bad(line, "expected 'key = value', got '" + s + "'");
        const std::string key = trim(s.substr(0, eq));
        const std::string val = trim(s.substr(eq + 1));
        if (key.empty()) bad(line, "empty key");
        if (seen.count(key)) bad(line, "duplicate key '" + key + "'");
        seen[key] = true;

        if (key == "model") {
            if (val.empty()) bad(line, "model must not be empty");
            cfg.model_text = val;
        } else if (key == "input_shape") {
            cfg.input_shape = to_shape(val, line);
        } else if (key == "classes") {
            cfg.num_classes = (int)to_ll(val, line, key);
            if (cfg.num_classes < 2) bad(line, "classes must be >= 2");
        } else if (key == "precision") {
            if (val == "f32") cfg.precision = Precision::F32;
            else if (val == "f64") cfg.precision = Precision::F64;
            else bad(line, "precision must be f32 or f64, got '" + val + "'");
        } else if (key == "dataset") {
            if (val == "two_gaussians") cfg.dataset = DatasetKind::TwoGaussians;
            else if (val == "spirals") cfg.dataset = DatasetKind::Spirals;
            else if (val == "idx_mnist") cfg.dataset = DatasetKind::IdxMnist;
            else bad(line, "dataset must be two_gaussians, spirals or idx_mnist");
        } else if (key == "data.size") {
            cfg.data_size = (std::size_t)to_u64(val, line, key);
            if (cfg.data_size < 1) bad(line, "data.size must be >= 1");
        } else if (key == "data.test_size") {
            cfg.data_test_size = (std::size_t)to_u64(val, line, key);
            if (cfg.data_test_size < 1) bad(line, "data.test_size must be >= 1");
        } else if (key == "data.turns") {
            cfg.data_turns = to_double(val, line, key);
            if (cfg.data_turns <= 0) bad(line, "data.turns must be > 0");
        } else if (key == "data.noise") {
            cfg.data_noise = to_double(val, line, key);
            if (cfg.data_noise < 0) bad(line, "data.noise must be >= 0");
        } else if (key == "data.dim") {
            cfg.data_dim = (int)to_ll(val, line, key);
            if (cfg.data_dim < 1) bad(line, "data.dim must be >= 1");
        } else if (key == "data.separation") {
            cfg.data_separation = to_double(val, line, key);
            if (cfg.data_separation < 0) bad(line, "data.separation must be >= 0");
        } else if (key == "data.images") {
            cfg.data_images = val;
        } else if (key == "data.labels") {
            cfg.data_labels = val;
        } else if (key == "data.test_images") {
            cfg.data_test_images = val;
        } else if (key == "data.test_labels") {
            cfg.data_test_labels = val;
        } else if (key == "data.downsample") {
            cfg.data_downsample = (int)to_ll(val, line, key);
            if (cfg.data_downsample < 1) bad(line, "data.downsample must be >= 1");
        } else if (key == "data.limit") {
            cfg.data_limit = (std::size_t)to_u64(val, line, key);
        } else if (key == "data.seed") {
            cfg.data_seed = to_u64(val, line, key);
        } else if (key == "partition") {
            if (val == "iid") cfg.partition = PartitionKind::IID;
            else if (val == "dirichlet") cfg.partition = PartitionKind::DirichletLabel;
            else bad(line, "partition must be iid or dirichlet");
        } else if (key == "clients") {
            cfg.clients = (int)to_ll(val, line, key);
            if (cfg.clients < 1) bad(line, "clients must be >= 1");
        } else if (key == "alpha") {
            cfg.alpha = to_double(val, line, key);
            if (cfg.alpha <= 0) bad(line, "alpha must be > 0");
        } else if (key == "participation") {
            cfg.participation = to_double(val, line, key);
            if (cfg.participation <= 0 || cfg.participation > 1)
                bad(line, "participation must be in (0, 1]");
        } else if (key == "sigma") {
            cfg.sigma = to_double(val, line, key);
            if (cfg.sigma <= 0) bad(line, "sigma must be > 0");
        } else if (key == "k") {
            cfg.k = (int)to_ll(val, line, key);
            if (cfg.k < 1) bad(line, "k must be >= 1");
        } else if (key == "scheme") {
            if (val == "central") cfg.scheme = Scheme::Central;
            else if (val == "forward") cfg.scheme = Scheme::Forward;
            else bad(line, "scheme must be central or forward");
        } else if (key == "mode") {
            if (val == "fedsgd") cfg.mode = RunMode::FedSGD;
            else if (val == "fedavg") cfg.mode = RunMode::FedAvg;
            else bad(line, "mode must be fedsgd or fedavg");
        } else if (key == "batch") {
            cfg.batch = (int)to_ll(val, line, key);
            if (cfg.batch < 0) bad(line, "batch must be >= 0 (0 = full shard)");
        } else if (key == "local_epochs") {
            cfg.local_epochs = (int)to_ll(val, line, key);
            if (cfg.local_epochs < 1) bad(line, "local_epochs must be >= 1");
        } else if (key == "local_batch") {
            cfg.local_batch = (int)to_ll(val, line, key);
            if (cfg.local_batch < 1) bad(line, "local_batch must be >= 1");
        } else if (key == "optimizer") {
            if (val == "sgd") cfg.optimizer.kind = OptimizerConfig::Kind::SGD;
            else if (val == "adam") cfg.optimizer.kind = OptimizerConfig::Kind::Adam;
            else bad(line, "optimizer must be sgd or adam");
        } else if (key == "lr") {
            cfg.optimizer.lr = to_double(val, line, key);
            if (cfg.optimizer.lr <= 0) bad(line, "lr must be > 0");
        } else if (key == "beta1") {
            cfg.optimizer.beta1 = to_double(val, line, key);
            if (cfg.optimizer.beta1 < 0 || cfg.optimizer.beta1 >= 1)
                bad(line, "beta1 must be in [0, 1)");
        } else if (key == "beta2") {
            cfg.optimizer.beta2 = to_double(val, line, key);
            if (cfg.optimizer.beta2 < 0 || cfg.optimizer.beta2 >= 1)
                bad(line, "beta2 must be in [0, 1)");
        } else if (key == "adam_eps") {
            cfg.optimizer.eps = to_double(val, line, key);
            if (cfg.optimizer.eps <= 0) bad(line, "adam_eps must be > 0");
        } else if (key == "ema") {
            cfg.ema = to_double(val, line, key);
            if (cfg.ema < 0 || cfg.ema >= 1) bad(line, "ema must be in [0, 1)");
        } else if (key == "rounds") {
            cfg.rounds = (int)to_ll(val, line, key);
            if (cfg.rounds < 0) bad(line, "rounds must be >= 0");
        } else if (key == "seed") {
            cfg.seed = to_u64(val, line, key);
        } else if (key == "partition_seed") {
            cfg.partition_seed = to_u64(val, line, key);
        } else if (key == "mask_seed") {
            cfg.mask_seed = to_u64(val, line, key);
        } else if (key == "mask_scale") {
            cfg.mask_scale = to_double(val, line, key);
            if (cfg.mask_scale < 0) bad(line, "mask_scale must be >= 0 (0 = auto)");
        } else if (key == "gradient") {
            if (val == "estimator") cfg.gradient = GradientSource::Estimator;
            else if (val == "oracle_fd") cfg.gradient = GradientSource::OracleFD;
            else if (val == "oracle_dense") cfg.gradient = GradientSource::OracleDense;
            else bad(line, "gradient must be estimator, oracle_fd or oracle_dense");
        } else if (key == "eval_every") {
            cfg.eval_every = (int)to_ll(val, line, key);
            if (cfg.eval_every < 1) bad(line, "eval_every must be >= 1");
        } else if (key == "workers") {
            cfg.workers = (int)to_ll(val, line, key);
            if (cfg.workers < 0) bad(line, "workers must be >= 0 (0 = hardware)");
        } else if (key == "out") {
            cfg.out = val;
        } else if (key == "write_wire") {
            cfg.write_wire = to_bool(val, line, key);
        } else {
            bad(line, "unknown key '" + key + "'");
        }
    }

    std::vector<std::string> missing;
    for (const char* req : {"model", "input_shape", "classes", "dataset", "rounds"})
        if (!seen.count(req)) missing.push_back(req);
    if (!missing.empty()) {
        std::string msg = "missing required keys:";
        for (const auto& m : missing) msg += " " + m;
        throw ConfigError(msg);
    }
    if (cfg.dataset == DatasetKind::IdxMnist &&
        (cfg.data_images.empty() || cfg.data_labels.empty()))
        throw ConfigError("dataset idx_mnist requires data.images and data.labels");
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
    std::ostringstream o;
    o << "model = " << c.model_text << "\n";
    o << "input_shape = ";
    for (std::size_t i = 0; i < c.input_shape.size(); ++i)
        o << (i ? "x" : "") << c.input_shape[i];
    o << "\n";
    o << "classes = " << c.num_classes << "\n";
    o << "precision = " << (c.precision == Precision::F32 ? "f32" : "f64") << "\n";
    o << "dataset = "
      << (c.dataset == DatasetKind::TwoGaussians ? "two_gaussians"
          : c.dataset == DatasetKind::Spirals    ? "spirals"
                                                 : "idx_mnist")
      << "\n";
    o << "data.size = " << c.data_size << "\n";
    o << "data.test_size = " << c.data_test_size << "\n";
    o << "data.turns = " << fmt_double(c.data_turns) << "\n";
    o << "data.noise = " << fmt_double(c.data_noise) << "\n";
    o << "data.dim = " << c.data_dim << "\n";
    o << "data.separation = " << fmt_double(c.data_separation) << "\n";
    o << "data.images = " << c.data_images << "\n";
    o << "data.labels = " << c.data_labels << "\n";
    o << "data.test_images = " << c.data_test_images << "\n";
    o << "data.test_labels = " << c.data_test_labels << "\n";
    o << "data.downsample = " << c.data_downsample << "\n";
    o << "data.limit = " << c.data_limit << "\n";
    o << "data.seed = " << c.data_seed << "\n";
    o << "partition = " << (c.partition == PartitionKind::IID ? "iid" : "dirichlet") << "\n";
    o << "clients = " << c.clients << "\n";
    o << "alpha = " << fmt_double(c.alpha) << "\n";
    o << "participation = " << fmt_double(c.participation) << "\n";
    o << "sigma = " << fmt_double(c.sigma) << "\n";
    o << "k = " << c.k << "\n";
    o << "scheme = " << (c.scheme == Scheme::Central ? "central" : "forward") << "\n";
    o << "mode = " << (c.mode == RunMode::FedSGD ? "fedsgd" : "fedavg") << "\n";
    o << "batch = " << c.batch << "\n";
    o << "local_epochs = " << c.local_epochs << "\n";
    o << "local_batch = " << c.local_batch << "\n";
    o << "optimizer = " << (c.optimizer.kind == OptimizerConfig::Kind::SGD ? "sgd" : "adam")
      << "\n";
    o << "lr = " << fmt_double(c.optimizer.lr) << "\n";
    o << "beta1 = " << fmt_double(c.optimizer.beta1) << "\n";
    o << "beta2 = " << fmt_double(c.optimizer.beta2) << "\n";
    o << "adam_eps = " << fmt_double(c.optimizer.eps) << "\n";
    o << "ema = " << fmt_double(c.ema) << "\n";
    o << "rounds = " << c.rounds << "\n";
    o << "seed = " << c.seed << "\n";
    o << "partition_seed = " << c.partition_seed << "\n";
    o << "mask_seed = " << c.mask_seed << "\n";
    o << "mask_scale = " << fmt_double(c.mask_scale) << "\n";
    o << "gradient = "
      << (c.gradient == GradientSource::Estimator  ? "estimator"
          : c.gradient == GradientSource::OracleFD ? "oracle_fd"
                                                   : "oracle_dense")
      << "\n";
    o << "eval_every = " << c.eval_every << "\n";
    o << "workers = " << c.workers << "\n";
    o << "out = " << c.out << "\n";
    o << "write_wire = " << (c.write_wire ? "true" : "false") << "\n";
    return o.str();
}

std::uint64_t config_hash(const RunConfig& cfg) {
    const std::string s = serialize_config(cfg);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Model DSL
// ---------------------------------------------------------------------------

namespace {

std::vector<int> parse_int_args(const std::string& tok, const std::string& args,
                                std::size_t min_n, std::size_t max_n,
                                std::vector<std::string>* tail = nullptr) {
    std::vector<int> out;
    std::stringstream ss(args);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        char* end = nullptr;
        const long v = std::strtol(part.c_str(), &end, 10);
        if (end != part.c_str() && *end == '\0') {
            out.push_back((int)v);
        } else if (tail) {
            tail->push_back(part);
        } else {
            throw ConfigError("model: bad argument '" + part + "' in '" + tok + "'");
        }
    }
    if (out.size() < min_n || out.size() > max_n)
        throw ConfigError("model: '" + tok + "' takes " + std::to_string(min_n) +
                          (max_n > min_n ? ".." + std::to_string(max_n) : "") +
                          " integer arguments");
    return out;
}

} // namespace

ModelSpec parse_model_text(const std::string& text, std::vector<int> input_shape,
                           int num_classes) {
    ModelSpec spec;
    spec.input_shape = std::move(input_shape);
    spec.num_classes = num_classes;
    std::stringstream ss(text);
    std::string tok;
    while (ss >> tok) {
        const std::size_t open = tok.find('(');
        std::string head = tok, args;
        if (open != std::string::npos) {
            if (tok.back() != ')')
                throw ConfigError("model: missing ')' in '" + tok + "'");
            head = tok.substr(0, open);
            args = tok.substr(open + 1, tok.size() - open - 2);
        }
        if (head == "dense") {
            std::vector<std::string> tail;
            const auto a = parse_int_args(tok, args, 2, 2, &tail);
            bool bias = true;
            for (const auto& t : tail) {
                if (t == "nobias") bias = false;
                else throw ConfigError("model: bad argument '" + t + "' in '" + tok + "'");
            }
            spec.layers.push_back(LayerSpec::dense(a[0], a[1], bias));
        } else if (head == "conv") {
            const auto a = parse_int_args(tok, args, 3, 4);
            spec.layers.push_back(
                LayerSpec::conv2d(a[0], a[1], a[2], a.size() > 3 ? a[3] : 1));
        } else if (head == "groupnorm") {
            const auto a = parse_int_args(tok, args, 2, 2);
            spec.layers.push_back(LayerSpec::group_norm(a[0], a[1]));
        } else if (head == "relu") {
            spec.layers.push_back(LayerSpec::activation(ActKind::ReLU));
        } else if (head == "selu") {
            spec.layers.push_back(LayerSpec::activation(ActKind::SELU));
        } else if (head == "hardswish") {
            spec.layers.push_back(LayerSpec::activation(ActKind::Hardswish));
        } else if (head == "flatten") {
            spec.layers.push_back(LayerSpec::flatten());
        } else {
            throw ConfigError("model: unknown layer '" + tok + "'");
        }
    }
    return spec;
}

Model build_model(const RunConfig& cfg) {
    return Model(parse_model_text(cfg.model_text, cfg.input_shape, cfg.num_classes));
}

DataBundle build_data(const RunConfig& cfg) {
    DataBundle d;
    switch (cfg.dataset) {
    case DatasetKind::TwoGaussians:
        d.train = make_two_gaussians(cfg.data_size, cfg.data_dim, cfg.data_separation,
                                     cfg.data_seed);
        d.test = make_two_gaussians(cfg.data_test_size, cfg.data_dim,
                                    cfg.data_separation, derive_seed({cfg.data_seed, 1}));
        break;
    case DatasetKind::Spirals:
        d.train = make_spirals(cfg.data_size, cfg.data_turns, cfg.data_noise,
                               cfg.data_seed);
        d.test = make_spirals(cfg.data_test_size, cfg.data_turns, cfg.data_noise,
                              derive_seed({cfg.data_seed, 1}));
        break;
    case DatasetKind::IdxMnist: {
        d.train = load_idx(cfg.data_images, cfg.data_labels, cfg.data_downsample,
                           cfg.data_limit);
        if (!cfg.data_test_images.empty())
            d.test = load_idx(cfg.data_test_images, cfg.data_test_labels,
                              cfg.data_downsample, cfg.data_limit);
        else
            d.test = d.train;
        break;
    }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Wire records
// ---------------------------------------------------------------------------

namespace {

void put16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back((std::uint8_t)(v & 0xFF));
    b.push_back((std::uint8_t)(v >> 8));
}

void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((std::uint8_t)((v >> (8 * i)) & 0xFF));
}

std::uint32_t get32(std::span<const std::uint8_t> b, std::size_t off) {
    return (std::uint32_t)b[off] | ((std::uint32_t)b[off + 1] << 8) |
           ((std::uint32_t)b[off + 2] << 16) | ((std::uint32_t)b[off + 3] << 24);
}

} // namespace

std::vector<std::uint8_t> encode_record(const WireRecord& rec) {
    std::vector<std::uint8_t> b;
    b.reserve(kWireHeaderBytes + 4 * rec.payload.size());
    b.push_back('B');
    b.push_back('F');
    b.push_back('F');
    b.push_back('L');
    put16(b, rec.version);
    put32(b, rec.round);
    put32(b, rec.client_id);
    b.push_back((std::uint8_t)rec.kind);
    put32(b, (std::uint32_t)rec.payload.size());
    for (float f : rec.payload) put32(b, std::bit_cast<std::uint32_t>(f));
    return b;
}

WireRecord decode_record(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kWireHeaderBytes)
        throw ProtocolError("wire record truncated at byte 0: " +
                            std::to_string(bytes.size()) + " bytes, header needs " +
                            std::to_string(kWireHeaderBytes));
    if (bytes[0] != 'B' || bytes[1] != 'F' || bytes[2] != 'F' || bytes[3] != 'L')
        throw ProtocolError("wire record: bad magic at byte 0");
    WireRecord rec;
    rec.version = (std::uint16_t)(bytes[4] | (bytes[5] << 8));
    if (rec.version != kWireVersion)
        throw ProtocolError("wire record: unsupported version " +
                            std::to_string(rec.version) + " at byte 4");
    rec.round = get32(bytes, 6);
    rec.client_id = get32(bytes, 10);
    const std::uint8_t kind = bytes[14];
    if (kind != (std::uint8_t)WireRecord::Kind::LossDiffs &&
        kind != (std::uint8_t)WireRecord::Kind::ParamDelta)
        throw ProtocolError("wire record: unknown kind " + std::to_string(kind) +
                            " at byte 14");
    rec.kind = (WireRecord::Kind)kind;
    const std::uint32_t count = get32(bytes, 15);
    if (bytes.size() != kWireHeaderBytes + 4ull * count)
        throw ProtocolError("wire record: payload size mismatch at byte 19: have " +
                            std::to_string(bytes.size() - kWireHeaderBytes) +
                            " bytes, count says " + std::to_string(4ull * count));
    rec.payload.resize(count);
    for (std::uint32_t i = 0; i < count; ++i)
        rec.payload[i] = std::bit_cast<float>(get32(bytes, kWireHeaderBytes + 4ull * i));
    return rec;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

std::string metrics_csv(std::span<const MetricsRow> rows) {
    std::ostringstream o;
    o << "round,wall_ms,train_loss,train_acc,test_loss,test_acc,"
         "uplink_bytes_total,downlink_bytes_total\n";
    char buf[256];
    for (const MetricsRow& r : rows) {
        std::snprintf(buf, sizeof buf, "%d,%.3f,%.9g,%.6g,%.9g,%.6g,%llu,%llu\n",
                      r.round, r.wall_ms, r.train_loss, r.train_acc, r.test_loss,
                      r.test_acc, (unsigned long long)r.uplink_bytes_total,
                      (unsigned long long)r.downlink_bytes_total);
        o << buf;
    }
    return o.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write '" + path + "'");
    f << text;
}

void write_metrics_csv(const std::string& path, std::span<const MetricsRow> rows) {
    write_text_file(path, metrics_csv(rows));
}

std::string run_summary_json(const RunConfig& cfg, std::span<const MetricsRow> rows,
                             std::uint64_t wire_header_bytes) {
    nlohmann::ordered_json j;
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", (unsigned long long)config_hash(cfg));
    j["config_hash"] = hash;
    j["mode"] = cfg.mode == RunMode::FedSGD ? "fedsgd" : "fedavg";
    j["rounds"] = cfg.rounds;
    if (!rows.empty()) {
        const MetricsRow& last = rows.back();
        j["final"] = {{"round", last.round},
                      {"train_loss", last.train_loss},
                      {"train_acc", last.train_acc},
                      {"test_loss", last.test_loss},
                      {"test_acc", last.test_acc}};
        const MetricsRow* best = &rows[0];
        for (const MetricsRow& r : rows)
            if (r.test_acc > best->test_acc) best = &r;
        j["best"] = {{"round", best->round}, {"test_acc", best->test_acc}};
        j["uplink_bytes_total"] = last.uplink_bytes_total;
        j["downlink_bytes_total"] = last.downlink_bytes_total;
    }
    j["wire_header_overhead_bytes"] = wire_header_bytes;
    return j.dump(2) + "\n";
}

} // namespace baffle
