#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "baffle/io.hpp"
#include "baffle/rng.hpp"

using namespace baffle;

namespace {

std::string write_temp(const std::string& name, const std::vector<std::uint8_t>& bytes) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream f(path, std::ios::binary);
    f.write((const char*)bytes.data(), (std::streamsize)bytes.size());
    return path.string();
}

void push_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back((std::uint8_t)(x >> 24));
    v.push_back((std::uint8_t)(x >> 16));
    v.push_back((std::uint8_t)(x >> 8));
    v.push_back((std::uint8_t)x);
}

// Minimal IDX pair: `count` images of rows x cols with pixel = sample index,
// labels 0..count-1 mod 10.
std::pair<std::string, std::string> make_idx_pair(std::size_t count, std::size_t rows,
                                                  std::size_t cols,
                                                  const std::string& tag) {
    std::vector<std::uint8_t> img;
    push_be32(img, 0x00000803u);
    push_be32(img, (std::uint32_t)count);
    push_be32(img, (std::uint32_t)rows);
    push_be32(img, (std::uint32_t)cols);
    for (std::size_t s = 0; s < count; ++s)
        for (std::size_t p = 0; p < rows * cols; ++p)
            img.push_back((std::uint8_t)((s * 7 + p) % 256));
    std::vector<std::uint8_t> lab;
    push_be32(lab, 0x00000801u);
    push_be32(lab, (std::uint32_t)count);
    for (std::size_t s = 0; s < count; ++s) lab.push_back((std::uint8_t)(s % 10));
    return {write_temp("baffle_img_" + tag + ".idx", img),
            write_temp("baffle_lab_" + tag + ".idx", lab)};
}

std::string minimal_config() {
    return "model = dense(2,8) hardswish dense(8,2)\n"
           "input_shape = 2\n"
           "classes = 2\n"
           "dataset = spirals\n"
           "rounds = 10\n";
}

} // namespace

TEST_CASE("empty config lists the required keys") {
    try {
        parse_config("");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        for (const char* key : {"model", "input_shape", "classes", "dataset", "rounds"})
            CHECK(msg.find(key) != std::string::npos);
    }
}

TEST_CASE("strict parsing anchors errors to lines") {
    SUBCASE("sigma must be positive") {
        try {
            parse_config(minimal_config() + "sigma = 0\n");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("line 6") != std::string::npos);
            CHECK(msg.find("sigma must be > 0") != std::string::npos);
        }
    }
    SUBCASE("unknown keys are rejected by name") {
        try {
            parse_config(minimal_config() + "sgima = 1e-4\n");
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("unknown key 'sgima'") != std::string::npos);
            CHECK(msg.find("line 6") != std::string::npos);
        }
    }
    SUBCASE("type mismatches name the key") {
        CHECK_THROWS_WITH_AS(parse_config(minimal_config() + "k = many\n"),
                             doctest::Contains("k must be an integer"), ConfigError);
    }
    SUBCASE("duplicate keys are rejected") {
        CHECK_THROWS_WITH_AS(parse_config(minimal_config() + "rounds = 5\n"),
                             doctest::Contains("duplicate key"), ConfigError);
    }
    SUBCASE("enumerations are validated") {
        CHECK_THROWS_AS(parse_config(minimal_config() + "scheme = sideways\n"),
                        ConfigError);
        CHECK_THROWS_AS(parse_config(minimal_config() + "precision = f16\n"),
                        ConfigError);
    }
    SUBCASE("comments and blank lines are fine") {
        const RunConfig cfg =
            parse_config("# a comment\n\n" + minimal_config() + "  # trailing\n");
        CHECK(cfg.rounds == 10);
    }
}

TEST_CASE("defaults follow the protocol settings") {
    const RunConfig cfg = parse_config(minimal_config());
    CHECK(cfg.sigma == 1e-4);
    CHECK(cfg.ema == 0.995);
    CHECK(cfg.optimizer.kind == OptimizerConfig::Kind::Adam);
    CHECK(cfg.optimizer.beta1 == 0.9);
    CHECK(cfg.optimizer.beta2 == 0.99);
    CHECK(cfg.optimizer.lr == 0.01);
    CHECK(cfg.scheme == Scheme::Central);
    CHECK(cfg.precision == Precision::F64);
    CHECK(cfg.mode == RunMode::FedSGD);
}

TEST_CASE("serialize/parse round trip is the identity") {
    SeqRng rng(2025);
    for (int trial = 0; trial < 60; ++trial) {
        RunConfig cfg;
        cfg.model_text = trial % 2 ? "dense(2,32) hardswish dense(32,2)"
                                   : "conv(1,4,3,2) relu flatten dense(36,10)";
        cfg.input_shape = trial % 2 ? std::vector<int>{2} : std::vector<int>{1, 14, 14};
        cfg.num_classes = trial % 2 ? 2 : 10;
        cfg.precision = rng.index(2) ? Precision::F32 : Precision::F64;
        cfg.dataset = (DatasetKind)rng.index(3);
        if (cfg.dataset == DatasetKind::IdxMnist) {
            cfg.data_images = "train-images.idx";
            cfg.data_labels = "train-labels.idx";
        }
        cfg.data_size = 100 + rng.index(5000);
        cfg.data_turns = 1.0 + rng.next_uniform() * 3.0;
        cfg.data_noise = rng.next_uniform() * 0.2;
        cfg.data_separation = rng.next_uniform() * 5.0;
        cfg.partition = rng.index(2) ? PartitionKind::IID : PartitionKind::DirichletLabel;
        cfg.clients = 1 + (int)rng.index(20);
        cfg.alpha = 0.1 + rng.next_uniform();
        cfg.participation = 0.25 + 0.75 * rng.next_uniform();
        cfg.sigma = std::pow(10.0, -1.0 - 3.0 * rng.next_uniform());
        cfg.k = 1 + (int)rng.index(600);
        cfg.scheme = rng.index(2) ? Scheme::Central : Scheme::Forward;
        cfg.mode = rng.index(2) ? RunMode::FedSGD : RunMode::FedAvg;
        cfg.batch = (int)rng.index(64);
        cfg.local_epochs = 1 + (int)rng.index(3);
        cfg.local_batch = 1 + (int)rng.index(64);
        cfg.optimizer.kind =
            rng.index(2) ? OptimizerConfig::Kind::SGD : OptimizerConfig::Kind::Adam;
        cfg.optimizer.lr = 0.001 + rng.next_uniform();
        cfg.ema = 0.9 * rng.next_uniform();
        cfg.rounds = (int)rng.index(500);
        cfg.seed = rng.next_bits();
        cfg.partition_seed = rng.next_bits();
        cfg.mask_seed = rng.next_bits();
        cfg.mask_scale = rng.index(2) ? 0.0 : rng.next_uniform();
        cfg.gradient = (GradientSource)rng.index(3);
        cfg.eval_every = 1 + (int)rng.index(10);
        cfg.workers = (int)rng.index(8);
        cfg.out = "runs/exp";
        cfg.write_wire = rng.index(2) != 0;

        const RunConfig back = parse_config(serialize_config(cfg));
        CHECK(back == cfg);
        CHECK(config_hash(back) == config_hash(cfg));
    }
}

TEST_CASE("model DSL builds the expected stacks") {
    const ModelSpec spec = parse_model_text(
        "conv(1,8,5) hardswish groupnorm(2,8) flatten dense(800,10)", {1, 14, 14}, 10);
    REQUIRE(spec.layers.size() == 5);
    CHECK(spec.layers[0].kind == LayerSpec::Kind::Conv2d);
    CHECK(spec.layers[0].out_ch == 8);
    CHECK(spec.layers[1].act == ActKind::Hardswish);
    CHECK(spec.layers[2].groups == 2);
    CHECK(spec.layers[4].out == 10);
    const Model model{spec}; // conv output 8x10x10 -> flatten 800
    CHECK(model.param_count() == (std::size_t)(8 * 25 + 8) + 16 + 8010);

    CHECK_THROWS_AS(parse_model_text("dense(2)", {2}, 2), ConfigError);
    CHECK_THROWS_AS(parse_model_text("swiggle", {2}, 2), ConfigError);
    CHECK_THROWS_AS(parse_model_text("dense(2,2 ", {2}, 2), ConfigError);
    const ModelSpec nobias = parse_model_text("dense(2,2,nobias)", {2}, 2);
    CHECK_FALSE(nobias.layers[0].bias);
}

TEST_CASE("idx ingestion parses, validates and downsamples") {
    SUBCASE("round trip of a small pair") {
        const auto [img, lab] = make_idx_pair(10, 4, 4, "ok");
        const Dataset d = load_idx(img, lab);
        CHECK(d.size() == 10);
        CHECK(d.input_shape == std::vector<int>{1, 4, 4});
        CHECK(d.labels[3] == 3);
        CHECK(d.inputs[0] == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(d.inputs[16] == doctest::Approx(7.0 / 255.0).epsilon(1e-6));
    }
    SUBCASE("average-pool downsample") {
        const auto [img, lab] = make_idx_pair(2, 4, 4, "pool");
        const Dataset d = load_idx(img, lab, 2);
        CHECK(d.input_shape == std::vector<int>{1, 2, 2});
        // Top-left 2x2 block of sample 0 holds pixels {0,1,4,5} -> mean 2.5.
        CHECK(d.inputs[0] == doctest::Approx(2.5 / 255.0).epsilon(1e-6));
    }
    SUBCASE("bad image magic names the offset") {
        std::vector<std::uint8_t> img;
        push_be32(img, 0x00000802u);
        push_be32(img, 1);
        push_be32(img, 2);
        push_be32(img, 2);
        img.resize(img.size() + 4);
        const auto [ok_img, ok_lab] = make_idx_pair(1, 2, 2, "magic");
        const std::string bad = write_temp("baffle_bad_magic.idx", img);
        try {
            load_idx(bad, ok_lab);
            FAIL("expected IngestError");
        } catch (const IngestError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("byte offset 0") != std::string::npos);
            CHECK(msg.find("0x00000802") != std::string::npos);
        }
    }
    SUBCASE("truncated pixel data reports the expected size") {
        std::vector<std::uint8_t> img;
        push_be32(img, 0x00000803u);
        push_be32(img, 3);
        push_be32(img, 2);
        push_be32(img, 2);
        img.push_back(0); // 1 of 12 pixel bytes
        const std::string bad = write_temp("baffle_trunc.idx", img);
        const auto [ok_img, ok_lab] = make_idx_pair(3, 2, 2, "trunc");
        CHECK_THROWS_AS(load_idx(bad, ok_lab), IngestError);
    }
    SUBCASE("count mismatch between images and labels") {
        const auto [img, _] = make_idx_pair(4, 2, 2, "mismatch_a");
        const auto [__, lab] = make_idx_pair(5, 2, 2, "mismatch_b");
        CHECK_THROWS_AS(load_idx(img, lab), IngestError);
    }
    SUBCASE("limit keeps the first samples") {
        const auto [img, lab] = make_idx_pair(10, 2, 2, "limit");
        const Dataset d = load_idx(img, lab, 1, 4);
        CHECK(d.size() == 4);
    }
    SUBCASE("real MNIST when present") {
        const char* dir = std::getenv("MNIST_DIR");
        if (!dir) return; // hermetic by default
        const Dataset d = load_idx(std::string(dir) + "/train-images-idx3-ubyte",
                                   std::string(dir) + "/train-labels-idx1-ubyte");
        CHECK(d.size() == 60000);
        CHECK(d.num_classes == 10);
    }
}

TEST_CASE("synthetic generators") {
    SUBCASE("coincident gaussians cannot be separated") {
        const Dataset d = make_two_gaussians(4000, 2, 0.0, 3);
        // Optimal centroid rule degenerates; empirical accuracy ~ 50%.
        double m0[2] = {0, 0}, m1[2] = {0, 0};
        std::size_t n0 = 0, n1 = 0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            const float* x = d.inputs.data() + 2 * i;
            if (d.labels[i] == 0) {
                m0[0] += x[0];
                m0[1] += x[1];
                ++n0;
            } else {
                m1[0] += x[0];
                m1[1] += x[1];
                ++n1;
            }
        }
        m0[0] /= (double)n0;
        m0[1] /= (double)n0;
        m1[0] /= (double)n1;
        m1[1] /= (double)n1;
        std::size_t hits = 0;
        for (std::size_t i = 0; i < d.size(); ++i) {
            const float* x = d.inputs.data() + 2 * i;
            const double d0 = (x[0] - m0[0]) * (x[0] - m0[0]) + (x[1] - m0[1]) * (x[1] - m0[1]);
            const double d1 = (x[0] - m1[0]) * (x[0] - m1[0]) + (x[1] - m1[1]) * (x[1] - m1[1]);
            hits += (d1 < d0 ? 1 : 0) == d.labels[i];
        }
        const double acc = (double)hits / (double)d.size();
        CHECK(acc > 0.40);
        CHECK(acc < 0.60);
    }
    SUBCASE("separated gaussians are nearly separable along the first axis") {
        const Dataset d = make_two_gaussians(4000, 3, 6.0, 4);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < d.size(); ++i)
            hits += (d.inputs[3 * i] > 0.0f ? 1 : 0) == d.labels[i];
        CHECK((double)hits / (double)d.size() > 0.97);
    }
    SUBCASE("spirals are balanced, bounded and deterministic") {
        const Dataset a = make_spirals(1000, 2.0, 0.05, 5);
        const Dataset b = make_spirals(1000, 2.0, 0.05, 5);
        CHECK(a.inputs == b.inputs);
        int ones = 0;
        for (int y : a.labels) ones += y;
        CHECK(ones == 500);
        for (float v : a.inputs) CHECK(std::fabs(v) < 1.5f);
    }
}

TEST_CASE("wire records encode exactly as specified") {
    SUBCASE("single zero value is a 23-byte record with a zero payload") {
        WireRecord rec;
        rec.kind = WireRecord::Kind::LossDiffs;
        rec.payload = {0.0f};
        const auto bytes = encode_record(rec);
        REQUIRE(bytes.size() == 23);
        CHECK(bytes[0] == 'B');
        CHECK(bytes[1] == 'F');
        CHECK(bytes[2] == 'F');
        CHECK(bytes[3] == 'L');
        for (int i = 19; i < 23; ++i) CHECK(bytes[(std::size_t)i] == 0x00);
    }
    SUBCASE("1.0f is little-endian 00 00 80 3F") {
        WireRecord rec;
        rec.payload = {1.0f};
        const auto bytes = encode_record(rec);
        CHECK(bytes[19] == 0x00);
        CHECK(bytes[20] == 0x00);
        CHECK(bytes[21] == 0x80);
        CHECK(bytes[22] == 0x3F);
    }
    SUBCASE("random records round trip bit-exactly") {
        SeqRng rng(8);
        for (int trial = 0; trial < 10000; ++trial) {
            WireRecord rec;
            rec.round = (std::uint32_t)rng.next_bits();
            rec.client_id = (std::uint32_t)rng.next_bits();
            rec.kind = rng.index(2) ? WireRecord::Kind::LossDiffs
                                    : WireRecord::Kind::ParamDelta;
            const std::size_t count = rng.index(8);
            for (std::size_t i = 0; i < count; ++i)
                rec.payload.push_back((float)rng.next_gaussian());
            const auto bytes = encode_record(rec);
            CHECK(bytes.size() == kWireHeaderBytes + 4 * rec.payload.size());
            const WireRecord back = decode_record(bytes);
            const auto bytes2 = encode_record(back);
            if (bytes != bytes2) {
                REQUIRE(bytes == bytes2); // report once with full context
            }
        }
    }
    SUBCASE("corruption is rejected with a position") {
        WireRecord rec;
        rec.payload = {1.0f, 2.0f};
        auto bytes = encode_record(rec);

        auto bad = bytes;
        bad[0] = 'X';
        CHECK_THROWS_WITH_AS(decode_record(bad), doctest::Contains("byte 0"),
                             ProtocolError);
        bad = bytes;
        bad[4] = 9;
        CHECK_THROWS_WITH_AS(decode_record(bad), doctest::Contains("byte 4"),
                             ProtocolError);
        bad = bytes;
        bad[14] = 7;
        CHECK_THROWS_WITH_AS(decode_record(bad), doctest::Contains("byte 14"),
                             ProtocolError);
        bad = bytes;
        bad.pop_back();
        CHECK_THROWS_AS(decode_record(bad), ProtocolError);
        bad.clear();
        bad.resize(5, 0);
        CHECK_THROWS_AS(decode_record(bad), ProtocolError);
    }
}

TEST_CASE("metrics CSV shape and accounting") {
    SUBCASE("empty stream is header-only") {
        const std::string csv = metrics_csv({});
        CHECK(csv == "round,wall_ms,train_loss,train_acc,test_loss,test_acc,"
                     "uplink_bytes_total,downlink_bytes_total\n");
    }
    SUBCASE("two rows make three lines") {
        std::vector<MetricsRow> rows(2);
        rows[0].round = 1;
        rows[1].round = 2;
        const std::string csv = metrics_csv(rows);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    }
    SUBCASE("uplink column carries the cumulative payload accounting") {
        // After R rounds with C clients of K diffs: R*C*4K payload bytes.
        const int r = 3, c = 5, k = 7;
        std::vector<MetricsRow> rows;
        for (int i = 1; i <= r; ++i) {
            MetricsRow row;
            row.round = i;
            row.uplink_bytes_total = (std::uint64_t)i * c * 4 * k;
            rows.push_back(row);
        }
        const std::string csv = metrics_csv(rows);
        CHECK(csv.find(std::to_string(r * c * 4 * k)) != std::string::npos);
    }
}

TEST_CASE("run summary is machine-readable") {
    RunConfig cfg = parse_config(minimal_config());
    std::vector<MetricsRow> rows(3);
    rows[0].round = 0;
    rows[1].round = 1;
    rows[1].test_acc = 0.9;
    rows[2].round = 2;
    rows[2].test_acc = 0.8;
    rows[2].uplink_bytes_total = 4000;
    const std::string text = run_summary_json(cfg, rows, 57);
    const auto j = nlohmann::json::parse(text);
    CHECK(j["best"]["round"] == 1);
    CHECK(j["final"]["round"] == 2);
    CHECK(j["uplink_bytes_total"] == 4000);
    CHECK(j["wire_header_overhead_bytes"] == 57);
    CHECK(j["config_hash"].get<std::string>().size() == 16);
}
