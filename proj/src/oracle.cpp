#include "baffle/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "baffle/parallel.hpp"

namespace baffle {

double relu_grad(double x) {
    if (x > 0.0) return 1.0;
    if (x < 0.0) return 0.0;
    return 0.5;
}

double selu_grad(double x) {
    constexpr double lambda = 1.0507009873554804934193349852946;
    constexpr double alpha = 1.6732632423543772848170429916717;
    if (x > 0.0) return lambda;
    if (x < 0.0) return lambda * alpha * std::exp(x);
    return 0.5 * (lambda + lambda * alpha);
}

double hardswish_grad(double x) {
    if (x > 3.0) return 1.0;
    if (x < -3.0) return 0.0;
    if (x == 3.0) return 0.5 * (1.0 + (2.0 * 3.0 + 3.0) / 6.0);   // 1.25
    if (x == -3.0) return 0.5 * (0.0 + (2.0 * -3.0 + 3.0) / 6.0); // -0.25
    return (2.0 * x + 3.0) / 6.0;
}

double activation_grad(ActKind a, double x) {
    switch (a) {
    case ActKind::ReLU: return relu_grad(x);
    case ActKind::SELU: return selu_grad(x);
    case ActKind::Hardswish: return hardswish_grad(x);
    }
    return 0.0;
}

std::vector<double> exact_gradient_fd(const Model& model,
                                      std::span<const double> params,
                                      const Batch& batch, const OracleConfig& cfg,
                                      int workers) {
    const std::size_t n = model.param_count();
    if (params.size() != n)
        throw ConfigError("parameter vector length does not match model");
    if (n > 50000)
        throw CapabilityError("parameter count " + std::to_string(n) +
                              " exceeds the finite-difference oracle budget (5e4)");
    if (cfg.step <= 0.0) throw ConfigError("oracle step must be > 0");

    std::vector<double> grad(n);
    const double h = cfg.step;
    parallel_for(n, workers, [&](std::size_t i) {
        std::vector<double> w(params.begin(), params.end());
        w[i] = params[i] + h;
        const double up = model.loss(w, batch);
        w[i] = params[i] - h;
        const double down = model.loss(w, batch);
        grad[i] = (up - down) / (2.0 * h);
    });
    return grad;
}

namespace {

int shape_numel(const std::vector<int>& s) {
    int n = 1;
    for (int d : s) n *= d;
    return n;
}

} // namespace

std::vector<double> exact_gradient_dense(const Model& model,
                                         std::span<const double> params,
                                         const Batch& batch) {
    const ModelSpec& spec = model.spec();
    for (const LayerSpec& l : spec.layers)
        if (l.kind == LayerSpec::Kind::Conv2d)
            throw CapabilityError("analytic oracle does not support conv layers; "
                                  "use the finite-difference oracle");
    if (params.size() != model.param_count())
        throw ConfigError("parameter vector length does not match model");
    if (batch.count() < 1) throw ConfigError("batch is empty");

    // Per-layer weight/bias offsets in the flat vector.
    const std::size_t num_layers = spec.layers.size();
    std::vector<std::size_t> w_off(num_layers, 0), b_off(num_layers, 0);
    for (const LayoutEntry& e : model.layout()) {
        if (e.role == "weight" || e.role == "gamma") w_off[(std::size_t)e.layer] = e.offset;
        if (e.role == "bias" || e.role == "beta") b_off[(std::size_t)e.layer] = e.offset;
    }

    // Input width of every layer.
    std::vector<std::vector<int>> shapes;
    shapes.push_back(spec.input_shape);
    for (const LayerSpec& l : spec.layers) {
        std::vector<int> cur = shapes.back();
        switch (l.kind) {
        case LayerSpec::Kind::Dense: cur = {l.out}; break;
        case LayerSpec::Kind::Flatten: cur = {shape_numel(cur)}; break;
        default: break;
        }
        shapes.push_back(cur);
    }

    std::vector<double> grad(model.param_count(), 0.0);
    const int dim = shape_numel(spec.input_shape);
    const int classes = spec.num_classes;
    const double inv_b = 1.0 / batch.count();

    // acts[li] = input of layer li (f64), acts[num_layers] = logits.
    std::vector<std::vector<double>> acts(num_layers + 1);

    for (int b = 0; b < batch.count(); ++b) {
        const double* x = batch.inputs.data() + (std::size_t)b * dim;
        acts[0].assign(x, x + dim);
        for (std::size_t li = 0; li < num_layers; ++li) {
            const LayerSpec& l = spec.layers[li];
            const std::vector<double>& in = acts[li];
            std::vector<double>& out = acts[li + 1];
            switch (l.kind) {
            case LayerSpec::Kind::Dense: {
                out.assign((std::size_t)l.out, 0.0);
                for (int o = 0; o < l.out; ++o) {
                    double acc = l.bias ? params[b_off[li] + (std::size_t)o] : 0.0;
                    const std::size_t row = w_off[li] + (std::size_t)o * l.in;
                    for (int i = 0; i < l.in; ++i) acc += params[row + i] * in[(std::size_t)i];
                    out[(std::size_t)o] = acc;
                }
                break;
            }
            case LayerSpec::Kind::Activation: {
                out.resize(in.size());
                for (std::size_t i = 0; i < in.size(); ++i)
                    out[i] = apply_activation(l.act, in[i]);
                break;
            }
            case LayerSpec::Kind::GroupNorm: {
                out = in; // normalized in the backward pass recomputation below
                const int spatial = shapes[li].size() == 3
                                        ? shapes[li][1] * shapes[li][2] : 1;
                const int per_group = l.channels / l.groups;
                const int group_n = per_group * spatial;
                for (int g = 0; g < l.groups; ++g) {
                    const double* base = in.data() + (std::size_t)g * group_n;
                    double mean = 0.0;
                    for (int i = 0; i < group_n; ++i) mean += base[i];
                    mean /= group_n;
                    double var = 0.0;
                    for (int i = 0; i < group_n; ++i) {
                        const double d = base[i] - mean;
                        var += d * d;
                    }
                    var /= group_n;
                    const double inv = 1.0 / std::sqrt(var + l.eps);
                    for (int c = 0; c < per_group; ++c) {
                        const int channel = g * per_group + c;
                        const double gamma = params[w_off[li] + (std::size_t)channel];
                        const double beta = params[b_off[li] + (std::size_t)channel];
                        for (int s = 0; s < spatial; ++s) {
                            const std::size_t idx =
                                (std::size_t)g * group_n + (std::size_t)c * spatial + s;
                            out[idx] = gamma * ((in[idx] - mean) * inv) + beta;
                        }
                    }
                }
                break;
            }
            case LayerSpec::Kind::Flatten:
                out = in;
                break;
            case LayerSpec::Kind::Conv2d:
                break; // unreachable, rejected above
            }
        }

        // d loss / d logits = softmax(z) - onehot(y), scaled by 1/B.
        const std::vector<double>& z = acts[num_layers];
        double m = z[0];
        for (int c = 1; c < classes; ++c) m = std::max(m, z[(std::size_t)c]);
        double sum = 0.0;
        std::vector<double> delta((std::size_t)classes);
        for (int c = 0; c < classes; ++c) {
            delta[(std::size_t)c] = std::exp(z[(std::size_t)c] - m);
            sum += delta[(std::size_t)c];
        }
        for (int c = 0; c < classes; ++c) delta[(std::size_t)c] /= sum;
        delta[(std::size_t)batch.labels[(std::size_t)b]] -= 1.0;
        for (double& d : delta) d *= inv_b;

        // Reverse pass.
        for (std::size_t li = num_layers; li-- > 0;) {
            const LayerSpec& l = spec.layers[li];
            const std::vector<double>& in = acts[li];
            switch (l.kind) {
            case LayerSpec::Kind::Dense: {
                std::vector<double> prev((std::size_t)l.in, 0.0);
                for (int o = 0; o < l.out; ++o) {
                    const double d = delta[(std::size_t)o];
                    const std::size_t row = w_off[li] + (std::size_t)o * l.in;
                    for (int i = 0; i < l.in; ++i) {
                        grad[row + i] += d * in[(std::size_t)i];
                        prev[(std::size_t)i] += d * params[row + i];
                    }
                    if (l.bias) grad[b_off[li] + (std::size_t)o] += d;
                }
                delta = std::move(prev);
                break;
            }
            case LayerSpec::Kind::Activation: {
                for (std::size_t i = 0; i < delta.size(); ++i)
                    delta[i] *= activation_grad(l.act, in[i]);
                break;
            }
            case LayerSpec::Kind::GroupNorm: {
                const int spatial = shapes[li].size() == 3
                                        ? shapes[li][1] * shapes[li][2] : 1;
                const int per_group = l.channels / l.groups;
                const int group_n = per_group * spatial;
                std::vector<double> prev(in.size(), 0.0);
                for (int g = 0; g < l.groups; ++g) {
                    const double* base = in.data() + (std::size_t)g * group_n;
                    double mean = 0.0;
                    for (int i = 0; i < group_n; ++i) mean += base[i];
                    mean /= group_n;
                    double var = 0.0;
                    for (int i = 0; i < group_n; ++i) {
                        const double d = base[i] - mean;
                        var += d * d;
                    }
                    var /= group_n;
                    const double inv = 1.0 / std::sqrt(var + l.eps);
                    // u = gamma * upstream; dx = inv*(u - mean(u) - xhat*mean(u*xhat))
                    double u_mean = 0.0, ux_mean = 0.0;
                    std::vector<double> u((std::size_t)group_n), xhat((std::size_t)group_n);
                    for (int c = 0; c < per_group; ++c) {
                        const int channel = g * per_group + c;
                        const double gamma = params[w_off[li] + (std::size_t)channel];
                        for (int s = 0; s < spatial; ++s) {
                            const int i = c * spatial + s;
                            const std::size_t idx = (std::size_t)g * group_n + i;
                            xhat[(std::size_t)i] = (in[idx] - mean) * inv;
                            u[(std::size_t)i] = gamma * delta[idx];
                            u_mean += u[(std::size_t)i];
                            ux_mean += u[(std::size_t)i] * xhat[(std::size_t)i];
                            grad[w_off[li] + (std::size_t)channel] +=
                                delta[idx] * xhat[(std::size_t)i];
                            grad[b_off[li] + (std::size_t)channel] += delta[idx];
                        }
                    }
                    u_mean /= group_n;
                    ux_mean /= group_n;
                    for (int i = 0; i < group_n; ++i) {
                        const std::size_t idx = (std::size_t)g * group_n + i;
                        prev[idx] = inv * (u[(std::size_t)i] - u_mean -
                                           xhat[(std::size_t)i] * ux_mean);
                    }
                }
                delta = std::move(prev);
                break;
            }
            case LayerSpec::Kind::Flatten:
                break;
            case LayerSpec::Kind::Conv2d:
                break;
            }
        }
    }
    return grad;
}

} // namespace baffle
