#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "baffle/errors.hpp"

namespace baffle {

// Forward-only neural network engine. Models are stacks of layer descriptors;
// all trainable parameters live in one flat vector so the whole model can be
// perturbed as a point in R^n. There is no backward pass here.

enum class Precision { F32, F64 };

enum class ActKind { ReLU, SELU, Hardswish };

struct LayerSpec {
    enum class Kind { Dense, Conv2d, Activation, GroupNorm, Flatten };
    Kind kind = Kind::Flatten;
    // Dense
    int in = 0, out = 0;
    bool bias = true;
    // Conv2d
    int in_ch = 0, out_ch = 0, kernel = 0, stride = 1;
    // Activation
    ActKind act = ActKind::Hardswish;
    // GroupNorm
    int groups = 0, channels = 0;
    double eps = 1e-5;

    static LayerSpec dense(int in, int out, bool bias = true);
    static LayerSpec conv2d(int in_ch, int out_ch, int kernel, int stride = 1);
    static LayerSpec activation(ActKind a);
    static LayerSpec group_norm(int groups, int channels, double eps = 1e-5);
    static LayerSpec flatten();

    std::string name() const;
};

struct ModelSpec {
    std::vector<LayerSpec> layers;
    std::vector<int> input_shape; // {D} or {C,H,W}
    int num_classes = 0;
};

struct Batch {
    std::vector<double> inputs; // count x dim, row-major
    std::vector<int> labels;    // class indices in [0, num_classes)

    int count() const { return (int)labels.size(); }
    int dim() const { return labels.empty() ? 0 : (int)(inputs.size() / labels.size()); }
};

// Where each trainable tensor of a layer sits inside the flat vector.
struct LayoutEntry {
    int layer = 0;            // index into ModelSpec::layers
    std::string role;         // "weight", "bias", "gamma", "beta"
    std::size_t offset = 0;
    std::size_t length = 0;
    std::vector<int> shape;
};

// Scalar activations.
double relu(double x);
double selu(double x);
// x * min(max(x+3, 0), 6) / 6
double hardswish(double x);
double apply_activation(ActKind a, double x);

// In-place group normalization of one sample laid out channel-major
// (channels x spatial). Per group: subtract the group mean, divide by
// sqrt(var + eps) (biased variance), then apply the per-channel affine pair.
// gamma/beta may be empty for the pre-affine result.
void group_norm(std::span<double> features, int channels, int spatial, int groups,
                double eps, std::span<const double> gamma,
                std::span<const double> beta);

class Model {
public:
    // Validates shape flow through the stack and freezes the parameter layout.
    // Layer order in the flat vector follows the stack; within a layer,
    // weight precedes bias (gamma precedes beta for GroupNorm).
    explicit Model(ModelSpec spec);

    const ModelSpec& spec() const { return spec_; }
    std::size_t param_count() const { return param_count_; }
    const std::vector<LayoutEntry>& layout() const { return layout_; }
    const std::vector<int>& output_shape() const { return output_shape_; }

    // uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) per layer; GroupNorm affine
    // starts at gamma=1, beta=0. Deterministic in `seed`.
    std::vector<double> init_params(std::uint64_t seed) const;

    // Mean cross-entropy over the batch (max-shifted log-sum-exp). Pure.
    // With Precision::F32 parameters and activations are stored in 32-bit
    // floats between operations; accumulation is always 64-bit.
    double loss(std::span<const double> params, const Batch& batch,
                Precision prec = Precision::F64) const;

    // Class scores for one sample; out.size() == num_classes.
    void logits(std::span<const double> params, std::span<const double> input,
                std::span<double> out, Precision prec = Precision::F64) const;

    int predict(std::span<const double> params, std::span<const double> input,
                Precision prec = Precision::F64) const;

private:
    template <typename T>
    void forward_sample(std::span<const double> params, const double* input,
                        std::span<double> out_logits) const;
    void check_params(std::span<const double> params) const;

    ModelSpec spec_;
    std::size_t param_count_ = 0;
    std::vector<LayoutEntry> layout_;
    std::vector<std::vector<int>> shapes_; // shape before each layer + final
    std::vector<int> output_shape_;
    std::size_t max_width_ = 0; // largest intermediate buffer
};

// Bijective mapping between per-tensor parameter lists and the flat vector.
// Tensors appear in layout() order.
std::vector<std::vector<double>> unflatten_params(const Model& model,
                                                  std::span<const double> flat);
std::vector<double> flatten_params(const Model& model,
                                   const std::vector<std::vector<double>>& tensors);

} // namespace baffle
