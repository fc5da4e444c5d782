#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "binary_io.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "seeding.hpp"

namespace memgauge {

enum class Architecture { softmax_linear, mlp };
enum class Activation { relu, tanh };

inline const char* to_string(Architecture a) { return a == Architecture::mlp ? "mlp" : "softmax_linear"; }
inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

struct ModelSpec {
    Architecture architecture = Architecture::softmax_linear;
    std::vector<std::size_t> layer_widths; // hidden layers, mlp only
    Activation activation = Activation::relu;
    std::size_t n_features = 0;
    std::size_t n_classes = 0;

    void validate() const {
        if (n_features == 0 || n_classes == 0)
            throw ConfigError("model needs positive n_features and n_classes");
        if (architecture == Architecture::mlp) {
            if (layer_widths.empty())
                throw ConfigError("mlp needs at least one hidden layer");
            if (std::ranges::any_of(layer_widths, [](auto w) { return w == 0; }))
                throw ConfigError("mlp layer widths must be positive");
        }
    }

    /// (fan_out, fan_in) of every affine layer, input to output.
    std::vector<std::pair<std::size_t, std::size_t>> layer_shapes() const {
        std::vector<std::pair<std::size_t, std::size_t>> shapes;
        std::size_t in = n_features;
        if (architecture == Architecture::mlp) {
            for (auto w : layer_widths) {
                shapes.emplace_back(w, in);
                in = w;
            }
        }
        shapes.emplace_back(n_classes, in);
        return shapes;
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

template <class T>
struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<T> values;

    std::size_t size() const noexcept { return values.size(); }
    /// Rank-1 tensors are biases; everything else is a weight.
    bool is_bias() const noexcept { return shape.size() == 1; }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

/// Named tensors in layer order: layer<k>.weight (fan_out x fan_in), layer<k>.bias.
template <class T>
struct BasicParams {
    std::vector<Tensor<T>> tensors;

    std::size_t total_size() const noexcept {
        std::size_t n = 0;
        for (const auto& t : tensors)
            n += t.size();
        return n;
    }

    const Tensor<T>& weight(std::size_t layer) const { return tensors[2 * layer]; }
    const Tensor<T>& bias(std::size_t layer) const { return tensors[2 * layer + 1]; }
    Tensor<T>& weight(std::size_t layer) { return tensors[2 * layer]; }
    Tensor<T>& bias(std::size_t layer) { return tensors[2 * layer + 1]; }
    std::size_t n_layers() const noexcept { return tensors.size() / 2; }

    void fill(T v) {
        for (auto& t : tensors)
            std::ranges::fill(t.values, v);
    }

    friend bool operator==(const BasicParams&, const BasicParams&) = default;
};

using Params = BasicParams<float>;

template <class T>
BasicParams<T> zero_params(const ModelSpec& spec) {
    BasicParams<T> p;
    std::size_t k = 0;
    for (auto [out, in] : spec.layer_shapes()) {
        const auto prefix = "layer" + std::to_string(k++);
        p.tensors.push_back({prefix + ".weight", {out, in}, std::vector<T>(out * in, T{})});
        p.tensors.push_back({prefix + ".bias", {out}, std::vector<T>(out, T{})});
    }
    return p;
}

/// Weights uniform in +-sqrt(6 / (fan_in + fan_out)); biases zero.
inline Params init_params(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    auto p = zero_params<float>(spec);
    std::mt19937_64 rng(derive_seed(seed, SeedStream::init));
    for (auto& t : p.tensors) {
        if (t.is_bias())
            continue;
        const double limit = std::sqrt(6.0 / static_cast<double>(t.shape[0] + t.shape[1]));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (auto& v : t.values)
            v = static_cast<float>(dist(rng));
    }
    return p;
}

template <class U, class T>
BasicParams<U> cast_params(const BasicParams<T>& src) {
    BasicParams<U> out;
    out.tensors.reserve(src.tensors.size());
    for (const auto& t : src.tensors)
        out.tensors.push_back({t.name, t.shape, std::vector<U>(t.values.begin(), t.values.end())});
    return out;
}

template <class T>
void validate_params(const ModelSpec& spec, const BasicParams<T>& params) {
    const auto shapes = spec.layer_shapes();
    if (params.tensors.size() != 2 * shapes.size())
        throw ShapeError("expected " + std::to_string(2 * shapes.size()) + " tensors, got " +
                         std::to_string(params.tensors.size()));
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        const auto [out, in] = shapes[k];
        const auto& w = params.weight(k);
        const auto& b = params.bias(k);
        if (w.shape != std::vector<std::size_t>{out, in} || w.values.size() != out * in)
            throw ShapeError("bad shape for " + w.name);
        if (b.shape != std::vector<std::size_t>{out} || b.values.size() != out)
            throw ShapeError("bad shape for " + b.name);
    }
    for (const auto& t : params.tensors)
        for (auto v : t.values)
            if (!std::isfinite(static_cast<double>(v)))
                throw ShapeError("non-finite entry in " + t.name);
}

// ---------------------------------------------------------------------------
// Forward and backward passes

template <class T>
struct ForwardCache {
    std::vector<Matrix<T>> inputs; // input to layer k (post-activation of k-1)
    std::vector<Matrix<T>> pre;    // affine output of layer k
    const Matrix<T>& logits() const { return pre.back(); }
};

namespace detail {

template <class T>
T activate(Activation a, T z) {
    if (a == Activation::relu)
        return z > T{0} ? z : T{0};
    return std::tanh(z);
}

template <class T>
T activate_grad(Activation a, T z, T activated) {
    if (a == Activation::relu)
        return z > T{0} ? T{1} : T{0};
    return T{1} - activated * activated;
}

} // namespace detail

template <class T>
void forward(const ModelSpec& spec, const BasicParams<T>& params, Matrix<T> input, ForwardCache<T>& cache) {
    const std::size_t layers = params.n_layers();
    cache.inputs.resize(layers);
    cache.pre.resize(layers);
    cache.inputs[0] = std::move(input);
    const std::size_t batch = cache.inputs[0].rows();
    for (std::size_t k = 0; k < layers; ++k) {
        const auto& w = params.weight(k);
        const auto& b = params.bias(k);
        const std::size_t out = w.shape[0], in = w.shape[1];
        const auto& a = cache.inputs[k];
        auto& z = cache.pre[k];
        z.resize(batch, out);
        for (std::size_t r = 0; r < batch; ++r) {
            const T* ar = a.row(r).data();
            for (std::size_t o = 0; o < out; ++o) {
                const T* wr = w.values.data() + o * in;
                T acc = b.values[o];
                for (std::size_t i = 0; i < in; ++i)
                    acc += wr[i] * ar[i];
                z(r, o) = acc;
            }
        }
        if (k + 1 < layers) {
            auto& next = cache.inputs[k + 1];
            next.resize(batch, out);
            for (std::size_t i = 0; i < z.size(); ++i)
                next.flat()[i] = detail::activate(spec.activation, z.flat()[i]);
        }
    }
}

/// Accumulates dLoss/dParams into `grads` (which must be zeroed by the caller) given dLoss/dLogits.
template <class T>
void backward(const ModelSpec& spec, const BasicParams<T>& params, const ForwardCache<T>& cache,
              Matrix<T> dlogits, BasicParams<T>& grads) {
    Matrix<T> delta = std::move(dlogits);
    for (std::size_t k = params.n_layers(); k-- > 0;) {
        const auto& w = params.weight(k);
        const std::size_t out = w.shape[0], in = w.shape[1];
        const auto& a = cache.inputs[k];
        auto& gw = grads.weight(k).values;
        auto& gb = grads.bias(k).values;
        const std::size_t batch = delta.rows();
        for (std::size_t r = 0; r < batch; ++r) {
            const T* ar = a.row(r).data();
            for (std::size_t o = 0; o < out; ++o) {
                const T d = delta(r, o);
                gb[o] += d;
                if (d == T{0})
                    continue;
                T* gr = gw.data() + o * in;
                for (std::size_t i = 0; i < in; ++i)
                    gr[i] += d * ar[i];
            }
        }
        if (k == 0)
            break;
        Matrix<T> prev(batch, in);
        const auto& z = cache.pre[k - 1];
        for (std::size_t r = 0; r < batch; ++r) {
            T* pr = prev.row(r).data();
            for (std::size_t o = 0; o < out; ++o) {
                const T d = delta(r, o);
                if (d == T{0})
                    continue;
                const T* wr = w.values.data() + o * in;
                for (std::size_t i = 0; i < in; ++i)
                    pr[i] += d * wr[i];
            }
            for (std::size_t i = 0; i < in; ++i)
                pr[i] *= detail::activate_grad(spec.activation, z(r, i), a(r, i));
        }
        delta = std::move(prev);
    }
}

/// Copies the given rows of a float feature matrix into a batch of scalar type T.
template <class T>
Matrix<T> gather_rows(const Matrix<float>& features, std::span<const std::size_t> rows) {
    Matrix<T> out(rows.size(), features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::ranges::copy(features.row(rows[r]), out.row(r).begin());
    return out;
}

template <class T>
Matrix<T> logits(const ModelSpec& spec, const BasicParams<T>& params, const Matrix<float>& features) {
    if (features.cols() != spec.n_features)
        throw DimensionError("feature width " + std::to_string(features.cols()) + " != model width " +
                             std::to_string(spec.n_features));
    ForwardCache<T> cache;
    Matrix<T> input(features.rows(), features.cols());
    std::ranges::copy(features.flat(), input.flat().begin());
    forward(spec, params, std::move(input), cache);
    return std::move(cache.pre.back());
}

/// Row-wise argmax; ties go to the smallest class index.
template <class T>
std::vector<Label> argmax_rows(const Matrix<T>& scores) {
    std::vector<Label> out(scores.rows());
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        auto row = scores.row(r);
        out[r] = static_cast<Label>(std::ranges::max_element(row, std::less<>{}) - row.begin());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean softmax cross-entropy over the batch. When `dlogits` is given it receives
/// dLoss/dLogits, already divided by the batch size.
template <class T>
double softmax_cross_entropy(const Matrix<T>& logits, std::span<const Label> labels,
                             std::type_identity_t<Matrix<T>>* dlogits = nullptr) {
    const std::size_t batch = logits.rows(), classes = logits.cols();
    if (dlogits)
        dlogits->resize(batch, classes);
    double total = 0.0;
    const T inv_batch = T{1} / static_cast<T>(batch);
    for (std::size_t r = 0; r < batch; ++r) {
        auto z = logits.row(r);
        const T zmax = *std::ranges::max_element(z);
        T sum{0};
        for (auto v : z)
            sum += std::exp(v - zmax);
        const T log_norm = zmax + std::log(sum);
        total += static_cast<double>(log_norm - z[labels[r]]);
        if (dlogits) {
            for (std::size_t c = 0; c < classes; ++c) {
                const T prob = std::exp(z[c] - log_norm);
                (*dlogits)(r, c) = (prob - (c == labels[r] ? T{1} : T{0})) * inv_batch;
            }
        }
    }
    return total / static_cast<double>(batch);
}

/// Softened class distributions softmax(z / temperature).
template <class T>
Matrix<T> softmax_rows(const Matrix<T>& logits, double temperature = 1.0) {
    Matrix<T> out(logits.rows(), logits.cols());
    const T inv_t = static_cast<T>(1.0 / temperature);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto z = logits.row(r);
        const T zmax = *std::ranges::max_element(z);
        T sum{0};
        for (std::size_t c = 0; c < z.size(); ++c) {
            out(r, c) = std::exp((z[c] - zmax) * inv_t);
            sum += out(r, c);
        }
        for (auto& v : out.row(r))
            v /= sum;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradient check

/// Maximum relative error between backprop gradients of the mean cross-entropy
/// and central finite differences (step 1e-5), both in double precision.
/// Relative error is |a - n| / max(|a|, |n|, 1e-7).
template <class T>
double gradient_check(const ModelSpec& spec, const BasicParams<T>& params, const Matrix<float>& features,
                      std::span<const Label> labels, double step = 1e-5) {
    if (features.rows() == 0)
        throw EmptyDataError("gradient check needs a non-empty batch");
    auto p = cast_params<double>(params);
    auto loss_at = [&](const BasicParams<double>& q) {
        return softmax_cross_entropy(logits(spec, q, features), labels, nullptr);
    };

    ForwardCache<double> cache;
    Matrix<double> input(features.rows(), features.cols());
    std::ranges::copy(features.flat(), input.flat().begin());
    forward(spec, p, std::move(input), cache);
    Matrix<double> dlogits;
    softmax_cross_entropy(cache.logits(), labels, &dlogits);
    auto grads = zero_params<double>(spec);
    backward(spec, p, cache, std::move(dlogits), grads);

    double worst = 0.0;
    for (std::size_t t = 0; t < p.tensors.size(); ++t) {
        for (std::size_t i = 0; i < p.tensors[t].values.size(); ++i) {
            double& v = p.tensors[t].values[i];
            const double saved = v;
            v = saved + step;
            const double up = loss_at(p);
            v = saved - step;
            const double down = loss_at(p);
            v = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double analytic = grads.tensors[t].values[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-7});
            worst = std::max(worst, std::abs(numeric - analytic) / denom);
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// MGPM serialization: "MGPM", u32 tensor count, then per tensor
// u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values.

inline Bytes encode_params(const Params& params) {
    ByteWriter w;
    w.put_bytes("MGPM");
    w.put_u32(static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& t : params.tensors) {
        w.put_u32(static_cast<std::uint32_t>(t.name.size()));
        w.put_bytes(t.name);
        w.put_u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape)
            w.put_u32(static_cast<std::uint32_t>(d));
        for (float v : t.values)
            w.put_f32(v);
    }
    return std::move(w).bytes();
}

inline Params decode_params(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    r.expect_magic("MGPM");
    Params p;
    const std::size_t count = r.get_u32();
    for (std::size_t k = 0; k < count; ++k) {
        Tensor<float> t;
        const auto name = r.get_bytes(r.get_u32());
        t.name.assign(name.begin(), name.end());
        const std::size_t rank = r.get_u32();
        std::size_t n = 1;
        for (std::size_t d = 0; d < rank; ++d) {
            t.shape.push_back(r.get_u32());
            n *= t.shape.back();
        }
        if (n * 4 > r.remaining())
            throw MalformedFileError("tensor " + t.name + " is truncated");
        t.values.resize(n);
        for (auto& v : t.values)
            v = r.get_f32();
        p.tensors.push_back(std::move(t));
    }
    r.expect_end();
    return p;
}

inline void save_params(const std::filesystem::path& path, const Params& p) { write_file(path, encode_params(p)); }
inline Params load_params(const std::filesystem::path& path) { return decode_params(read_file(path)); }

} // namespace memgauge
