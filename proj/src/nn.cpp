#include "baffle/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "baffle/rng.hpp"

namespace baffle {

LayerSpec LayerSpec::dense(int in, int out, bool bias) {
    LayerSpec l;
    l.kind = Kind::Dense;
    l.in = in;
    l.out = out;
    l.bias = bias;
    return l;
}

LayerSpec LayerSpec::conv2d(int in_ch, int out_ch, int kernel, int stride) {
    LayerSpec l;
    l.kind = Kind::Conv2d;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.kernel = kernel;
    l.stride = stride;
    return l;
}

LayerSpec LayerSpec::activation(ActKind a) {
    LayerSpec l;
    l.kind = Kind::Activation;
    l.act = a;
    return l;
}

LayerSpec LayerSpec::group_norm(int groups, int channels, double eps) {
    LayerSpec l;
    l.kind = Kind::GroupNorm;
    l.groups = groups;
    l.channels = channels;
    l.eps = eps;
    return l;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec l;
    l.kind = Kind::Flatten;
    return l;
}

std::string LayerSpec::name() const {
    char buf[64];
    switch (kind) {
    case Kind::Dense:
        std::snprintf(buf, sizeof buf, "dense(%d,%d%s)", in, out, bias ? "" : ",nobias");
        return buf;
    case Kind::Conv2d:
        std::snprintf(buf, sizeof buf, "conv(%d,%d,%d,%d)", in_ch, out_ch, kernel, stride);
        return buf;
    case Kind::Activation:
        switch (act) {
        case ActKind::ReLU: return "relu";
        case ActKind::SELU: return "selu";
        case ActKind::Hardswish: return "hardswish";
        }
        return "activation";
    case Kind::GroupNorm:
        std::snprintf(buf, sizeof buf, "groupnorm(%d,%d)", groups, channels);
        return buf;
    case Kind::Flatten: return "flatten";
    }
    return "?";
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

double selu(double x) {
    constexpr double lambda = 1.0507009873554804934193349852946;
    constexpr double alpha = 1.6732632423543772848170429916717;
    return x > 0.0 ? lambda * x : lambda * alpha * (std::exp(x) - 1.0);
}

double hardswish(double x) {
    double g = x + 3.0;
    if (g < 0.0) g = 0.0;
    if (g > 6.0) g = 6.0;
    return x * g / 6.0;
}

double apply_activation(ActKind a, double x) {
    switch (a) {
    case ActKind::ReLU: return relu(x);
    case ActKind::SELU: return selu(x);
    case ActKind::Hardswish: return hardswish(x);
    }
    return x;
}

void group_norm(std::span<double> features, int channels, int spatial, int groups,
                double eps, std::span<const double> gamma,
                std::span<const double> beta) {
    if (channels <= 0 || spatial <= 0) throw ConfigError("group_norm: empty input");
    if (groups <= 0 || channels % groups != 0)
        throw ConfigError("group_norm: channels (" + std::to_string(channels) +
                          ") not divisible by groups (" + std::to_string(groups) + ")");
    if ((int)features.size() != channels * spatial)
        throw ConfigError("group_norm: feature length does not match channels x spatial");
    if (!gamma.empty() && ((int)gamma.size() != channels || (int)beta.size() != channels))
        throw ConfigError("group_norm: affine parameter length mismatch");

    const int per_group = channels / groups;
    const int group_n = per_group * spatial;
    for (int g = 0; g < groups; ++g) {
        double* base = features.data() + (std::size_t)g * group_n;
        double sum = 0.0;
        for (int i = 0; i < group_n; ++i) sum += base[i];
        const double mean = sum / group_n;
        double var = 0.0;
        for (int i = 0; i < group_n; ++i) {
            const double d = base[i] - mean;
            var += d * d;
        }
        var /= group_n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < per_group; ++c) {
            const int channel = g * per_group + c;
            const double scale = gamma.empty() ? 1.0 : gamma[(std::size_t)channel];
            const double shift = beta.empty() ? 0.0 : beta[(std::size_t)channel];
            double* row = base + (std::size_t)c * spatial;
            for (int s = 0; s < spatial; ++s)
                row[s] = scale * ((row[s] - mean) * inv) + shift;
        }
    }
}

namespace {

int shape_numel(const std::vector<int>& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::string r;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) r += "x";
        r += std::to_string(s[i]);
    }
    return r;
}

} // namespace

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
    if (spec_.layers.empty()) throw ConfigError("model has no layers");
    if (spec_.input_shape.empty()) throw ConfigError("model input shape is empty");
    for (int d : spec_.input_shape)
        if (d <= 0) throw ConfigError("model input shape has non-positive dimension");
    if (spec_.num_classes < 2) throw ConfigError("model needs at least 2 classes");

    std::vector<int> cur = spec_.input_shape;
    shapes_.push_back(cur);
    std::size_t offset = 0;
    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
        const LayerSpec& l = spec_.layers[li];
        const std::string where = "layer " + std::to_string(li) + " (" + l.name() + ")";
        switch (l.kind) {
        case LayerSpec::Kind::Dense: {
            if (l.in <= 0 || l.out <= 0)
                throw ConfigError(where + ": dense dimensions must be positive");
            if (cur.size() != 1)
                throw ConfigError(where + ": dense expects a flat input, got " +
                                  shape_str(cur) + " (insert flatten)");
            if (cur[0] != l.in)
                throw ConfigError(where + ": expects " + std::to_string(l.in) +
                                  " inputs, got " + std::to_string(cur[0]));
            layout_.push_back({(int)li, "weight", offset,
                               (std::size_t)l.out * l.in, {l.out, l.in}});
            offset += (std::size_t)l.out * l.in;
            if (l.bias) {
                layout_.push_back({(int)li, "bias", offset, (std::size_t)l.out, {l.out}});
                offset += (std::size_t)l.out;
            }
            cur = {l.out};
            break;
        }
        case LayerSpec::Kind::Conv2d: {
            if (l.in_ch <= 0 || l.out_ch <= 0 || l.kernel <= 0 || l.stride <= 0)
                throw ConfigError(where + ": conv dimensions must be positive");
            if (cur.size() != 3)
                throw ConfigError(where + ": conv expects CxHxW input, got " + shape_str(cur));
            if (cur[0] != l.in_ch)
                throw ConfigError(where + ": expects " + std::to_string(l.in_ch) +
                                  " channels, got " + std::to_string(cur[0]));
            const int oh = (cur[1] - l.kernel) / l.stride + 1;
            const int ow = (cur[2] - l.kernel) / l.stride + 1;
            if (cur[1] < l.kernel || cur[2] < l.kernel || oh <= 0 || ow <= 0)
                throw ConfigError(where + ": kernel does not fit input " + shape_str(cur));
            layout_.push_back({(int)li, "weight", offset,
                               (std::size_t)l.out_ch * l.in_ch * l.kernel * l.kernel,
                               {l.out_ch, l.in_ch, l.kernel, l.kernel}});
            offset += (std::size_t)l.out_ch * l.in_ch * l.kernel * l.kernel;
            layout_.push_back({(int)li, "bias", offset, (std::size_t)l.out_ch, {l.out_ch}});
            offset += (std::size_t)l.out_ch;
            cur = {l.out_ch, oh, ow};
            break;
        }
        case LayerSpec::Kind::Activation:
            break;
        case LayerSpec::Kind::GroupNorm: {
            const int ch = cur[0];
            if (cur.size() != 1 && cur.size() != 3)
                throw ConfigError(where + ": unsupported input shape " + shape_str(cur));
            const int have = cur.size() == 1 ? cur[0] : ch;
            if (l.channels != have)
                throw ConfigError(where + ": declared " + std::to_string(l.channels) +
                                  " channels, input has " + std::to_string(have));
            if (l.groups <= 0 || l.channels % l.groups != 0)
                throw ConfigError(where + ": channels (" + std::to_string(l.channels) +
                                  ") not divisible by groups (" + std::to_string(l.groups) + ")");
            layout_.push_back({(int)li, "gamma", offset, (std::size_t)l.channels, {l.channels}});
            offset += (std::size_t)l.channels;
            layout_.push_back({(int)li, "beta", offset, (std::size_t)l.channels, {l.channels}});
            offset += (std::size_t)l.channels;
            break;
        }
        case LayerSpec::Kind::Flatten:
            cur = {shape_numel(cur)};
            break;
        }
        shapes_.push_back(cur);
        max_width_ = std::max(max_width_, (std::size_t)shape_numel(cur));
    }
    max_width_ = std::max(max_width_, (std::size_t)shape_numel(spec_.input_shape));
    output_shape_ = cur;
    if (cur.size() != 1 || cur[0] != spec_.num_classes)
        throw ConfigError("model output shape " + shape_str(cur) + " does not match " +
                          std::to_string(spec_.num_classes) + " classes");
    param_count_ = offset;
    if (param_count_ == 0) throw ConfigError("model has no trainable parameters");
}

std::vector<double> Model::init_params(std::uint64_t seed) const {
    std::vector<double> p(param_count_, 0.0);
    for (const LayoutEntry& e : layout_) {
        const LayerSpec& l = spec_.layers[e.layer];
        if (l.kind == LayerSpec::Kind::GroupNorm) {
            const double v = e.role == "gamma" ? 1.0 : 0.0;
            std::fill_n(p.begin() + (std::ptrdiff_t)e.offset, e.length, v);
            continue;
        }
        int fan_in = 1;
        if (l.kind == LayerSpec::Kind::Dense) fan_in = l.in;
        if (l.kind == LayerSpec::Kind::Conv2d) fan_in = l.in_ch * l.kernel * l.kernel;
        const double bound = std::sqrt(1.0 / fan_in);
        CounterRng rng(derive_seed({seed, (std::uint64_t)e.layer,
                                    e.role == "bias" ? 1ull : 0ull}));
        for (std::size_t i = 0; i < e.length; ++i)
            p[e.offset + i] = bound * (2.0 * rng.uniform(i) - 1.0);
    }
    return p;
}

void Model::check_params(std::span<const double> params) const {
    if (params.size() != param_count_)
        throw ConfigError("parameter vector has length " + std::to_string(params.size()) +
                          ", model expects " + std::to_string(param_count_));
}

template <typename T>
void Model::forward_sample(std::span<const double> params, const double* input,
                           std::span<double> out_logits) const {
    // Two ping-pong buffers in the storage type T; every elementwise store
    // rounds through T while sums run in double.
    thread_local std::vector<T> buf_a, buf_b;
    buf_a.resize(max_width_);
    buf_b.resize(max_width_);
    T* cur = buf_a.data();
    T* nxt = buf_b.data();

    const int in_n = shape_numel(spec_.input_shape);
    for (int i = 0; i < in_n; ++i) cur[i] = (T)input[i];

    for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
        const LayerSpec& l = spec_.layers[li];
        const std::vector<int>& ishape = shapes_[li];
        std::size_t w_off = 0, b_off = 0;
        for (const LayoutEntry& e : layout_) {
            if (e.layer != (int)li) continue;
            if (e.role == "weight" || e.role == "gamma") w_off = e.offset;
            if (e.role == "bias" || e.role == "beta") b_off = e.offset;
        }
        int out_n = shape_numel(shapes_[li + 1]);
        bool wrote_next = false;

        switch (l.kind) {
        case LayerSpec::Kind::Dense: {
            for (int o = 0; o < l.out; ++o) {
                double acc = l.bias ? (double)(T)params[b_off + o] : 0.0;
                const std::size_t row = w_off + (std::size_t)o * l.in;
                for (int i = 0; i < l.in; ++i)
                    acc += (double)(T)params[row + i] * (double)cur[i];
                nxt[o] = (T)acc;
            }
            wrote_next = true;
            break;
        }
        case LayerSpec::Kind::Conv2d: {
            const int ih = ishape[1], iw = ishape[2];
            const int oh = (ih - l.kernel) / l.stride + 1;
            const int ow = (iw - l.kernel) / l.stride + 1;
            for (int oc = 0; oc < l.out_ch; ++oc) {
                const double bias = (double)(T)params[b_off + oc];
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        double acc = bias;
                        for (int ic = 0; ic < l.in_ch; ++ic) {
                            const std::size_t wbase =
                                w_off + (((std::size_t)oc * l.in_ch + ic) * l.kernel) * l.kernel;
                            const T* in_ch = cur + (std::size_t)ic * ih * iw;
                            for (int ky = 0; ky < l.kernel; ++ky) {
                                const int iy = oy * l.stride + ky;
                                const T* in_row = in_ch + (std::size_t)iy * iw;
                                const std::size_t wrow = wbase + (std::size_t)ky * l.kernel;
                                for (int kx = 0; kx < l.kernel; ++kx)
                                    acc += (double)(T)params[wrow + kx] *
                                           (double)in_row[ox * l.stride + kx];
                            }
                        }
                        nxt[((std::size_t)oc * oh + oy) * ow + ox] = (T)acc;
                    }
                }
            }
            wrote_next = true;
            break;
        }
        case LayerSpec::Kind::Activation: {
            const int n = shape_numel(ishape);
            for (int i = 0; i < n; ++i)
                cur[i] = (T)apply_activation(l.act, (double)cur[i]);
            break;
        }
        case LayerSpec::Kind::GroupNorm: {
            const int ch = ishape[0];
            const int spatial = ishape.size() == 3 ? ishape[1] * ishape[2] : 1;
            const int total = ch * spatial;
            thread_local std::vector<double> scratch, gamma, beta;
            scratch.assign(cur, cur + total);
            gamma.resize((std::size_t)ch);
            beta.resize((std::size_t)ch);
            for (int c = 0; c < ch; ++c) {
                gamma[(std::size_t)c] = (double)(T)params[w_off + (std::size_t)c];
                beta[(std::size_t)c] = (double)(T)params[b_off + (std::size_t)c];
            }
            group_norm(scratch, ch, spatial, l.groups, l.eps, gamma, beta);
            for (int i = 0; i < total; ++i) cur[i] = (T)scratch[(std::size_t)i];
            break;
        }
        case LayerSpec::Kind::Flatten:
            break; // same storage, new logical shape
        }

        if (wrote_next) std::swap(cur, nxt);

        for (int i = 0; i < out_n; ++i) {
            if (!std::isfinite((double)cur[i]))
                throw NumericError("non-finite activation after layer " +
                                   std::to_string(li) + " (" + l.name() + ")");
        }
    }

    for (int c = 0; c < spec_.num_classes; ++c) out_logits[c] = (double)cur[c];
}

double Model::loss(std::span<const double> params, const Batch& batch,
                   Precision prec) const {
    check_params(params);
    const int dim = shape_numel(spec_.input_shape);
    if (batch.count() < 1) throw ConfigError("batch is empty");
    if (batch.dim() != dim)
        throw ConfigError("batch sample dim " + std::to_string(batch.dim()) +
                          " does not match model input " + std::to_string(dim));
    for (std::size_t i = 0; i < params.size(); ++i)
        if (!std::isfinite(params[i]))
            throw NumericError("non-finite parameter at index " + std::to_string(i));

    std::vector<double> z((std::size_t)spec_.num_classes);
    double total = 0.0;
    for (int b = 0; b < batch.count(); ++b) {
        const int y = batch.labels[(std::size_t)b];
        if (y < 0 || y >= spec_.num_classes)
            throw ConfigError("label " + std::to_string(y) + " out of range");
        const double* x = batch.inputs.data() + (std::size_t)b * dim;
        if (prec == Precision::F64)
            forward_sample<double>(params, x, z);
        else
            forward_sample<float>(params, x, z);
        double m = z[0];
        for (int c = 1; c < spec_.num_classes; ++c) m = std::max(m, z[c]);
        double sum = 0.0;
        for (int c = 0; c < spec_.num_classes; ++c) sum += std::exp(z[(std::size_t)c] - m);
        total += m + std::log(sum) - z[(std::size_t)y];
    }
    const double out = total / batch.count();
    if (!std::isfinite(out)) throw NumericError("non-finite loss");
    return out;
}

void Model::logits(std::span<const double> params, std::span<const double> input,
                   std::span<double> out, Precision prec) const {
    check_params(params);
    if ((int)input.size() != shape_numel(spec_.input_shape))
        throw ConfigError("input size does not match model input shape");
    if ((int)out.size() != spec_.num_classes)
        throw ConfigError("logits output span has wrong size");
    if (prec == Precision::F64)
        forward_sample<double>(params, input.data(), out);
    else
        forward_sample<float>(params, input.data(), out);
}

int Model::predict(std::span<const double> params, std::span<const double> input,
                   Precision prec) const {
    std::vector<double> z((std::size_t)spec_.num_classes);
    logits(params, input, z, prec);
    int best = 0;
    for (int c = 1; c < spec_.num_classes; ++c)
        if (z[(std::size_t)c] > z[(std::size_t)best]) best = c;
    return best;
}

std::vector<std::vector<double>> unflatten_params(const Model& model,
                                                  std::span<const double> flat) {
    if (flat.size() != model.param_count())
        throw ConfigError("flat vector has length " + std::to_string(flat.size()) +
                          ", model expects " + std::to_string(model.param_count()));
    std::vector<std::vector<double>> out;
    out.reserve(model.layout().size());
    for (const LayoutEntry& e : model.layout())
        out.emplace_back(flat.begin() + (std::ptrdiff_t)e.offset,
                         flat.begin() + (std::ptrdiff_t)(e.offset + e.length));
    return out;
}

std::vector<double> flatten_params(const Model& model,
                                   const std::vector<std::vector<double>>& tensors) {
    if (tensors.size() != model.layout().size())
        throw ConfigError("expected " + std::to_string(model.layout().size()) +
                          " parameter tensors, got " + std::to_string(tensors.size()));
    std::vector<double> flat(model.param_count());
    for (std::size_t t = 0; t < tensors.size(); ++t) {
        const LayoutEntry& e = model.layout()[t];
        if (tensors[t].size() != e.length)
            throw ConfigError("tensor " + std::to_string(t) + " (" + e.role +
                              " of layer " + std::to_string(e.layer) + ") has length " +
                              std::to_string(tensors[t].size()) + ", expected " +
                              std::to_string(e.length));
        std::copy(tensors[t].begin(), tensors[t].end(),
                  flat.begin() + (std::ptrdiff_t)e.offset);
    }
    return flat;
}

} // namespace baffle
