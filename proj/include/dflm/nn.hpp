#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dflm/parallel.hpp"
#include "dflm/rng.hpp"

namespace dflm {

enum class Activation : std::uint8_t { Relu = 0, Tanh = 1 };

inline std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

/// Weights are row-major (out x in).
struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<double> weights;
    std::vector<double> bias;
};

/// Multilayer perceptron u(x; theta) with scalar output. The last layer is affine.
struct NetworkParams {
    std::vector<std::size_t> dims; ///< input, hidden..., 1
    Activation activation = Activation::Relu;
    std::vector<DenseLayer> layers;

    std::size_t input_dim() const { return dims.front(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weights.size() + l.bias.size();
        return n;
    }

    void validate() const {
        if (dims.size() < 2) throw std::invalid_argument("NetworkParams: need at least input and output dims");
        if (dims.back() != 1) throw std::invalid_argument("NetworkParams: output dimension must be 1");
        if (layers.size() + 1 != dims.size()) throw std::invalid_argument("NetworkParams: layer count mismatch");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& L = layers[l];
            if (L.in != dims[l] || L.out != dims[l + 1] || L.weights.size() != L.in * L.out || L.bias.size() != L.out) {
                throw std::invalid_argument("NetworkParams: layer " + std::to_string(l) + " shape mismatch");
            }
        }
    }

    /// Shape-congruent copy with every entry zero.
    NetworkParams zeros_like() const {
        NetworkParams z = *this;
        for (auto& l : z.layers) {
            std::fill(l.weights.begin(), l.weights.end(), 0.0);
            std::fill(l.bias.begin(), l.bias.end(), 0.0);
        }
        return z;
    }

    /// Visits every parameter in a fixed order (weights then bias, layer by layer).
    template <class F>
    void for_each(F&& f) {
        for (auto& l : layers) {
            for (auto& w : l.weights) f(w);
            for (auto& b : l.bias) f(b);
        }
    }
    template <class F>
    void for_each(F&& f) const {
        for (const auto& l : layers) {
            for (const auto& w : l.weights) f(w);
            for (const auto& b : l.bias) f(b);
        }
    }
};

/// Gradients share the parameter layout.
using ParamGradient = NetworkParams;

inline void add_into(ParamGradient& dst, const ParamGradient& src) {
    for (std::size_t l = 0; l < dst.layers.size(); ++l) {
        auto& d = dst.layers[l];
        const auto& s = src.layers[l];
        for (std::size_t k = 0; k < d.weights.size(); ++k) d.weights[k] += s.weights[k];
        for (std::size_t k = 0; k < d.bias.size(); ++k) d.bias[k] += s.bias[k];
    }
}

/// Glorot-normal weights N(0, 2 / (fan_in + fan_out)), zero biases.
inline NetworkParams init_glorot(const std::vector<std::size_t>& dims, Activation activation, RngStream& rng) {
    NetworkParams p;
    p.dims = dims;
    p.activation = activation;
    if (dims.size() < 2 || dims.back() != 1) throw std::invalid_argument("init_glorot: dims must end in 1");
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        if (dims[l] == 0 || dims[l + 1] == 0) throw std::invalid_argument("init_glorot: zero-width layer");
        DenseLayer L;
        L.in = dims[l];
        L.out = dims[l + 1];
        const double sd = std::sqrt(2.0 / static_cast<double>(L.in + L.out));
        L.weights.resize(L.in * L.out);
        for (auto& w : L.weights) w = sd * rng.normal();
        L.bias.assign(L.out, 0.0);
        p.layers.push_back(std::move(L));
    }
    return p;
}

namespace detail {

inline constexpr std::size_t kColBlock = 8;
inline constexpr std::size_t kRowBlock = 8;
/// Points per independently evaluated chunk; fixed so results never depend on threading.
inline constexpr std::size_t kChunkCols = 64;

// GCC/Clang vector extension; lowers to whatever SIMD width the target has.
typedef double ColVec __attribute__((vector_size(kColBlock * sizeof(double))));

inline ColVec load_cols(const double* p) {
    ColVec v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}

inline void store_cols(double* p, const ColVec& v) { std::memcpy(p, &v, sizeof(v)); }

/// dst[r, c] = init[r] + sum_s weight(r, s) * src[s, c], with weight(r, s) = W[r*rs + s*ss].
/// Matrices are feature-major with `cols` (a multiple of kColBlock) columns. The sum runs
/// over s in ascending order for every column, so each column's result is independent of
/// which other columns share the call.
inline void affine_kernel(const double* W, std::size_t rs, std::size_t ss, const double* init, std::size_t rows,
                          std::size_t reduce, const double* src, double* dst, std::size_t cols) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kColBlock) {
        std::size_t r = 0;
        for (; r + kRowBlock <= rows; r += kRowBlock) {
            ColVec acc[kRowBlock];
            for (std::size_t i = 0; i < kRowBlock; ++i) acc[i] = ColVec{} + (init ? init[r + i] : 0.0);
            for (std::size_t s = 0; s < reduce; ++s) {
                const ColVec a = load_cols(src + s * cols + c0);
                for (std::size_t i = 0; i < kRowBlock; ++i) acc[i] += W[(r + i) * rs + s * ss] * a;
            }
            for (std::size_t i = 0; i < kRowBlock; ++i) store_cols(dst + (r + i) * cols + c0, acc[i]);
        }
        for (; r < rows; ++r) {
            ColVec acc = ColVec{} + (init ? init[r] : 0.0);
            for (std::size_t s = 0; s < reduce; ++s) acc += W[r * rs + s * ss] * load_cols(src + s * cols + c0);
            store_cols(dst + r * cols + c0, acc);
        }
    }
}

inline void apply_activation(Activation act, double* v, std::size_t n) {
    if (act == Activation::Relu) {
        for (std::size_t k = 0; k < n; ++k) v[k] = v[k] > 0.0 ? v[k] : 0.0;
    } else {
        for (std::size_t k = 0; k < n; ++k) v[k] = std::tanh(v[k]);
    }
}

/// Multiplies delta by the activation derivative expressed through the activation output.
/// ReLU'(0) is taken as 0.
inline void multiply_activation_derivative(Activation act, const double* activated, double* delta, std::size_t n) {
    if (act == Activation::Relu) {
        for (std::size_t k = 0; k < n; ++k) delta[k] = activated[k] > 0.0 ? delta[k] : 0.0;
    } else {
        for (std::size_t k = 0; k < n; ++k) delta[k] *= 1.0 - activated[k] * activated[k];
    }
}

inline std::size_t padded_cols(std::size_t n) { return (n + kColBlock - 1) / kColBlock * kColBlock; }

struct Workspace {
    std::size_t cols = 0;
    std::vector<std::vector<double>> acts; ///< acts[0] input, acts[l+1] output of layer l
    std::vector<double> delta;
    std::vector<double> delta_prev;
};

/// Forward pass over n <= kChunkCols points given row-major (n x d).
inline void forward_chunk(const NetworkParams& p, const double* xs, std::size_t n, Workspace& ws) {
    const std::size_t d = p.input_dim();
    const std::size_t cols = padded_cols(n);
    ws.cols = cols;
    ws.acts.resize(p.layers.size() + 1);
    ws.acts[0].assign(d * cols, 0.0);
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < d; ++i) ws.acts[0][i * cols + c] = xs[c * d + i];
    }
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const auto& L = p.layers[l];
        auto& out = ws.acts[l + 1];
        out.resize(L.out * cols);
        affine_kernel(L.weights.data(), L.in, 1, L.bias.data(), L.out, L.in, ws.acts[l].data(), out.data(), cols);
        if (l + 1 < p.layers.size()) apply_activation(p.activation, out.data(), out.size());
    }
}

/// Back-propagates ws.delta (output layer, 1 x cols) down to the input; when `grad`
/// is non-null, accumulates the parameter gradient over the first n columns.
inline void backward_chunk(const NetworkParams& p, std::size_t n, Workspace& ws, ParamGradient* grad) {
    const std::size_t cols = ws.cols;
    for (std::size_t l = p.layers.size(); l-- > 0;) {
        const auto& L = p.layers[l];
        const auto& input = ws.acts[l];
        if (grad) {
            auto& G = grad->layers[l];
            for (std::size_t j = 0; j < L.out; ++j) {
                const double* dj = ws.delta.data() + j * cols;
                double db = 0.0;
                for (std::size_t c = 0; c < n; ++c) db += dj[c];
                G.bias[j] += db;
                for (std::size_t k = 0; k < L.in; ++k) {
                    const double* ak = input.data() + k * cols;
                    double s = 0.0;
                    for (std::size_t c = 0; c < n; ++c) s += dj[c] * ak[c];
                    G.weights[j * L.in + k] += s;
                }
            }
        }
        ws.delta_prev.resize(L.in * cols);
        affine_kernel(L.weights.data(), 1, L.in, nullptr, L.in, L.out, ws.delta.data(), ws.delta_prev.data(), cols);
        if (l > 0) multiply_activation_derivative(p.activation, input.data(), ws.delta_prev.data(), L.in * cols);
        std::swap(ws.delta, ws.delta_prev);
    }
}

inline Workspace& thread_workspace() {
    thread_local Workspace ws;
    return ws;
}

} // namespace detail

/// u(x_i; theta) for row-major xs (n x d). Bit-identical to per-point evaluation.
inline std::vector<double> forward_batch(const NetworkParams& p, std::span<const double> xs, int threads = 1) {
    const std::size_t d = p.input_dim();
    if (xs.size() % d != 0) throw std::invalid_argument("forward_batch: input size is not a multiple of d");
    const std::size_t n = xs.size() / d;
    std::vector<double> out(n);
    parallel_for_chunks(n, detail::kChunkCols, threads, [&](std::size_t b, std::size_t e) {
        auto& ws = detail::thread_workspace();
        detail::forward_chunk(p, xs.data() + b * d, e - b, ws);
        const auto& y = ws.acts.back();
        for (std::size_t c = 0; c < e - b; ++c) out[b + c] = y[c];
    });
    return out;
}

inline double evaluate(const NetworkParams& p, std::span<const double> x) {
    if (x.size() != p.input_dim()) throw std::invalid_argument("evaluate: wrong input dimension");
    auto& ws = detail::thread_workspace();
    detail::forward_chunk(p, x.data(), 1, ws);
    return ws.acts.back()[0];
}

/// Gradient of sum_i w_i u(x_i; theta) with respect to theta. Chunks of fixed size are
/// reduced in index order.
inline ParamGradient grad_params(const NetworkParams& p, std::span<const double> xs, std::span<const double> weights,
                                 int threads = 1) {
    const std::size_t d = p.input_dim();
    if (xs.size() != weights.size() * d) throw std::invalid_argument("grad_params: shape mismatch");
    const std::size_t n = weights.size();
    const std::size_t n_chunks = (n + detail::kChunkCols - 1) / detail::kChunkCols;
    std::vector<ParamGradient> partial(n_chunks);
    parallel_for_chunks(n, detail::kChunkCols, threads, [&](std::size_t b, std::size_t e) {
        auto& ws = detail::thread_workspace();
        const std::size_t m = e - b;
        detail::forward_chunk(p, xs.data() + b * d, m, ws);
        ws.delta.assign(ws.cols, 0.0);
        for (std::size_t c = 0; c < m; ++c) ws.delta[c] = weights[b + c];
        ParamGradient g = p.zeros_like();
        detail::backward_chunk(p, m, ws, &g);
        partial[b / detail::kChunkCols] = std::move(g);
    });
    ParamGradient total = p.zeros_like();
    for (const auto& g : partial) add_into(total, g);
    return total;
}

/// u and its input gradient for row-major xs (n x d); grads is row-major (n x d).
inline void value_and_input_gradient(const NetworkParams& p, std::span<const double> xs, std::span<double> values,
                                     std::span<double> grads) {
    const std::size_t d = p.input_dim();
    const std::size_t n = values.size();
    if (xs.size() != n * d || grads.size() != n * d) throw std::invalid_argument("value_and_input_gradient: shape mismatch");
    auto& ws = detail::thread_workspace();
    for (std::size_t b = 0; b < n; b += detail::kChunkCols) {
        const std::size_t m = std::min(detail::kChunkCols, n - b);
        detail::forward_chunk(p, xs.data() + b * d, m, ws);
        for (std::size_t c = 0; c < m; ++c) values[b + c] = ws.acts.back()[c];
        ws.delta.assign(ws.cols, 0.0);
        std::fill(ws.delta.begin(), ws.delta.begin() + static_cast<std::ptrdiff_t>(m), 1.0);
        detail::backward_chunk(p, m, ws, nullptr);
        for (std::size_t c = 0; c < m; ++c) {
            for (std::size_t i = 0; i < d; ++i) grads[(b + c) * d + i] = ws.delta[i * ws.cols + c];
        }
    }
}

inline std::vector<double> grad_input(const NetworkParams& p, std::span<const double> x) {
    if (x.size() != p.input_dim()) throw std::invalid_argument("grad_input: wrong input dimension");
    double u = 0.0;
    std::vector<double> g(x.size());
    value_and_input_gradient(p, x, std::span<double>(&u, 1), g);
    return g;
}

// ---------------------------------------------------------------------------
// Checkpoint: "DFLM", u32 version, u8 activation, u32 layer count L, u32 dims[L+1],
// then per layer f64 weights (row-major) followed by f64 biases. Little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <class T>
void write_le(std::ostream& os, T v) {
    unsigned char bytes[sizeof(T)];
    std::uint64_t bits = 0;
    if constexpr (std::is_floating_point_v<T>) {
        static_assert(sizeof(T) == 8);
        std::memcpy(&bits, &v, 8);
    } else {
        bits = static_cast<std::uint64_t>(v);
    }
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    unsigned char bytes[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= std::uint64_t{bytes[i]} << (8 * i);
    if constexpr (std::is_floating_point_v<T>) {
        T v;
        std::memcpy(&v, &bits, 8);
        return v;
    } else {
        return static_cast<T>(bits);
    }
}
} // namespace detail

inline void write_checkpoint(std::ostream& os, const NetworkParams& p) {
    p.validate();
    os.write("DFLM", 4);
    detail::write_le<std::uint32_t>(os, kCheckpointVersion);
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(p.activation));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.layers.size()));
    for (auto d : p.dims) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (const auto& L : p.layers) {
        for (double w : L.weights) detail::write_le<double>(os, w);
        for (double b : L.bias) detail::write_le<double>(os, b);
    }
}

inline NetworkParams read_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "DFLM") throw std::runtime_error("checkpoint: bad magic");
    const auto version = detail::read_le<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    const auto act = detail::read_le<std::uint8_t>(is);
    if (act > 1) throw std::runtime_error("checkpoint: unknown activation tag");
    const auto n_layers = detail::read_le<std::uint32_t>(is);
    if (n_layers == 0 || n_layers > 4096) throw std::runtime_error("checkpoint: implausible layer count");
    NetworkParams p;
    p.activation = static_cast<Activation>(act);
    for (std::uint32_t i = 0; i <= n_layers; ++i) p.dims.push_back(detail::read_le<std::uint32_t>(is));
    for (std::uint32_t l = 0; l < n_layers; ++l) {
        DenseLayer L;
        L.in = p.dims[l];
        L.out = p.dims[l + 1];
        L.weights.resize(L.in * L.out);
        for (auto& w : L.weights) w = detail::read_le<double>(is);
        L.bias.resize(L.out);
        for (auto& b : L.bias) b = detail::read_le<double>(is);
        p.layers.push_back(std::move(L));
    }
    p.validate();
    return p;
}

inline void save_checkpoint(const std::string& path, const NetworkParams& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    write_checkpoint(os, p);
}

inline NetworkParams load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    return read_checkpoint(is);
}

} // namespace dflm
