#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "loft/common.hpp"
#include "loft/lora.hpp"
#include "loft/matrix.hpp"

namespace loft {

struct ModelConfig {
    int vocab_size = 261;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 8;
    int n_kv_heads = 4;
    int d_ff = 256;
    int max_seq_len = 512;
    double rope_base = 10000.0;

    int head_dim() const { return d_model / n_heads; }
    int kv_dim() const { return n_kv_heads * head_dim(); }
    int group_size() const { return n_heads / n_kv_heads; }

    void validate() const {
        if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || n_kv_heads < 1 ||
            d_ff < 1 || max_seq_len < 1)
            throw std::invalid_argument("model config: all dimensions must be positive");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("model config: d_model must be divisible by n_heads");
        if (n_heads % n_kv_heads != 0)
            throw std::invalid_argument("model config: n_heads must be divisible by n_kv_heads");
        if (!(rope_base > 0.0)) throw std::invalid_argument("model config: rope_base must be > 0");
    }
};

inline constexpr double kRmsNormEps = 1e-6;
inline constexpr double kInitStd = 0.02;

// Causal by construction; optional document boundaries additionally confine
// attention to the enclosing segment.
struct AttentionMask {
    std::vector<int> doc_boundaries;  // sorted segment-start indices; empty = one segment

    std::vector<int> segment_ids(int seq_len) const {
        std::vector<int> seg(static_cast<size_t>(seq_len), 0);
        if (doc_boundaries.empty()) return seg;
        int cur = 0;
        size_t next = 0;
        for (int i = 0; i < seq_len; ++i) {
            while (next < doc_boundaries.size() && doc_boundaries[next] <= i) {
                if (doc_boundaries[next] > 0) ++cur;
                ++next;
            }
            seg[static_cast<size_t>(i)] = cur;
        }
        return seg;
    }
};

template <typename S>
struct LayerParams {
    std::vector<S> attn_norm;  // d_model gains
    LoraLinear<S> wq;          // d_model  x d_model
    LoraLinear<S> wk;          // kv_dim   x d_model
    LoraLinear<S> wv;          // kv_dim   x d_model
    LoraLinear<S> wo;          // d_model  x d_model
    std::vector<S> mlp_norm;   // d_model gains
    Matrix<S> w_gate;          // d_ff x d_model
    Matrix<S> w_up;            // d_ff x d_model
    Matrix<S> w_down;          // d_model x d_ff

    LoraLinear<S>& projection(LoraTarget t) {
        switch (t) {
            case LoraTarget::kWq: return wq;
            case LoraTarget::kWk: return wk;
            case LoraTarget::kWv: return wv;
            default: return wo;
        }
    }
    const LoraLinear<S>& projection(LoraTarget t) const {
        return const_cast<LayerParams*>(this)->projection(t);
    }
};

template <typename S>
struct TransformerParams {
    Matrix<S> embedding;  // vocab x d_model
    std::vector<LayerParams<S>> layers;
    std::vector<S> final_norm;  // d_model gains
    Matrix<S> w_out;            // vocab x d_model (untied output projection)

    bool any_adapted() const {
        for (const auto& l : layers)
            for (LoraTarget t : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo})
                if (l.projection(t).adapted()) return true;
        return false;
    }

    template <typename T>
    TransformerParams<T> cast() const {
        TransformerParams<T> out;
        out.embedding = embedding.template cast<T>();
        out.final_norm.assign(final_norm.begin(), final_norm.end());
        out.w_out = w_out.template cast<T>();
        out.layers.resize(layers.size());
        for (size_t i = 0; i < layers.size(); ++i) {
            const auto& src = layers[i];
            auto& dst = out.layers[i];
            dst.attn_norm.assign(src.attn_norm.begin(), src.attn_norm.end());
            dst.mlp_norm.assign(src.mlp_norm.begin(), src.mlp_norm.end());
            dst.w_gate = src.w_gate.template cast<T>();
            dst.w_up = src.w_up.template cast<T>();
            dst.w_down = src.w_down.template cast<T>();
            for (LoraTarget t : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo}) {
                const auto& sp = src.projection(t);
                auto& dp = dst.projection(t);
                dp.weight = sp.weight.template cast<T>();
                dp.merged = sp.merged;
                if (sp.adapter) {
                    LoraAdapter<T> ad;
                    ad.a = sp.adapter->a.template cast<T>();
                    ad.b = sp.adapter->b.template cast<T>();
                    ad.scale = static_cast<T>(sp.adapter->scale);
                    ad.dropout = sp.adapter->dropout;
                    dp.adapter = std::move(ad);
                }
            }
        }
        return out;
    }
};

// A named reference to one trainable tensor's storage. Parameter trees and
// gradient trees expose their tensors in the same fixed order, so optimizer
// state can be kept positionally.
template <typename S>
struct TensorRef {
    std::string name;
    std::vector<S>* data = nullptr;
};

namespace detail {

template <typename S, typename Tree>
inline void collect_base_refs(Tree& t, std::vector<TensorRef<S>>& out) {
    out.push_back({"embedding", &t.embedding.data});
    for (size_t i = 0; i < t.layers.size(); ++i) {
        auto& l = t.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        out.push_back({p + "attn_norm", &l.attn_norm});
        out.push_back({p + "wq.weight", &l.wq.weight.data});
        out.push_back({p + "wk.weight", &l.wk.weight.data});
        out.push_back({p + "wv.weight", &l.wv.weight.data});
        out.push_back({p + "wo.weight", &l.wo.weight.data});
        out.push_back({p + "mlp_norm", &l.mlp_norm});
        out.push_back({p + "w_gate", &l.w_gate.data});
        out.push_back({p + "w_up", &l.w_up.data});
        out.push_back({p + "w_down", &l.w_down.data});
    }
    out.push_back({"final_norm", &t.final_norm});
    out.push_back({"w_out", &t.w_out.data});
}

template <typename S, typename Tree>
inline void collect_adapter_refs(Tree& t, std::vector<TensorRef<S>>& out) {
    for (size_t i = 0; i < t.layers.size(); ++i) {
        auto& l = t.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        for (LoraTarget tgt : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo}) {
            auto& proj = l.projection(tgt);
            if (!proj.adapter) continue;
            const std::string n = p + std::string(kLoraTargetNames[static_cast<size_t>(tgt)]);
            out.push_back({n + ".lora_a", &proj.adapter->a.data});
            out.push_back({n + ".lora_b", &proj.adapter->b.data});
        }
    }
}

}  // namespace detail

// Visit every base tensor (name, data vector, shape) in a fixed order. The
// tree may be const or mutable; data constness follows it.
template <typename Tree, typename Fn>
inline void for_each_base_tensor(Tree& t, Fn&& fn) {
    fn("embedding", t.embedding.data, std::vector<int>{t.embedding.rows, t.embedding.cols});
    for (size_t i = 0; i < t.layers.size(); ++i) {
        auto& l = t.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        fn(p + "attn_norm", l.attn_norm, std::vector<int>{static_cast<int>(l.attn_norm.size())});
        fn(p + "wq.weight", l.wq.weight.data, std::vector<int>{l.wq.weight.rows, l.wq.weight.cols});
        fn(p + "wk.weight", l.wk.weight.data, std::vector<int>{l.wk.weight.rows, l.wk.weight.cols});
        fn(p + "wv.weight", l.wv.weight.data, std::vector<int>{l.wv.weight.rows, l.wv.weight.cols});
        fn(p + "wo.weight", l.wo.weight.data, std::vector<int>{l.wo.weight.rows, l.wo.weight.cols});
        fn(p + "mlp_norm", l.mlp_norm, std::vector<int>{static_cast<int>(l.mlp_norm.size())});
        fn(p + "w_gate", l.w_gate.data, std::vector<int>{l.w_gate.rows, l.w_gate.cols});
        fn(p + "w_up", l.w_up.data, std::vector<int>{l.w_up.rows, l.w_up.cols});
        fn(p + "w_down", l.w_down.data, std::vector<int>{l.w_down.rows, l.w_down.cols});
    }
    fn("final_norm", t.final_norm, std::vector<int>{static_cast<int>(t.final_norm.size())});
    fn("w_out", t.w_out.data, std::vector<int>{t.w_out.rows, t.w_out.cols});
}

// Visit every adapter tensor (A then B per wrapped projection), fixed order.
template <typename Tree, typename Fn>
inline void for_each_adapter_tensor(Tree& t, Fn&& fn) {
    for (size_t i = 0; i < t.layers.size(); ++i) {
        auto& l = t.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        for (LoraTarget tgt : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo}) {
            auto& proj = l.projection(tgt);
            if (!proj.adapter) continue;
            const std::string n = p + std::string(kLoraTargetNames[static_cast<size_t>(tgt)]);
            fn(n + ".lora_a", proj.adapter->a.data,
               std::vector<int>{proj.adapter->a.rows, proj.adapter->a.cols});
            fn(n + ".lora_b", proj.adapter->b.data,
               std::vector<int>{proj.adapter->b.rows, proj.adapter->b.cols});
        }
    }
}

// Correctly-shaped zero parameter tree for a config (no adapters attached).
template <typename S>
inline TransformerParams<S> make_params_skeleton(const ModelConfig& cfg) {
    cfg.validate();
    TransformerParams<S> p;
    p.embedding = Matrix<S>(cfg.vocab_size, cfg.d_model);
    p.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& l : p.layers) {
        l.attn_norm.assign(static_cast<size_t>(cfg.d_model), S(0));
        l.wq.weight = Matrix<S>(cfg.d_model, cfg.d_model);
        l.wk.weight = Matrix<S>(cfg.kv_dim(), cfg.d_model);
        l.wv.weight = Matrix<S>(cfg.kv_dim(), cfg.d_model);
        l.wo.weight = Matrix<S>(cfg.d_model, cfg.d_model);
        l.mlp_norm.assign(static_cast<size_t>(cfg.d_model), S(0));
        l.w_gate = Matrix<S>(cfg.d_ff, cfg.d_model);
        l.w_up = Matrix<S>(cfg.d_ff, cfg.d_model);
        l.w_down = Matrix<S>(cfg.d_model, cfg.d_ff);
    }
    p.final_norm.assign(static_cast<size_t>(cfg.d_model), S(0));
    p.w_out = Matrix<S>(cfg.vocab_size, cfg.d_model);
    return p;
}

// Trainable tensors: the adapters when any projection is wrapped, otherwise
// every base tensor. Frozen tensors are simply not listed.
template <typename S>
inline std::vector<TensorRef<S>> trainable_tensors(TransformerParams<S>& params) {
    std::vector<TensorRef<S>> out;
    if (params.any_adapted())
        detail::collect_adapter_refs<S>(params, out);
    else
        detail::collect_base_refs<S>(params, out);
    return out;
}

template <typename S>
inline size_t trainable_parameter_count(const TransformerParams<S>& params) {
    size_t n = 0;
    for (const auto& l : params.layers)
        for (LoraTarget t : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo})
            n += l.projection(t).trainable_parameter_count();
    return n;
}

template <typename S>
inline size_t total_parameter_count(const TransformerParams<S>& params) {
    size_t n = params.embedding.size() + params.final_norm.size() + params.w_out.size();
    for (const auto& l : params.layers) {
        n += l.attn_norm.size() + l.mlp_norm.size();
        n += l.wq.weight.size() + l.wk.weight.size() + l.wv.weight.size() + l.wo.weight.size();
        n += l.w_gate.size() + l.w_up.size() + l.w_down.size();
        for (LoraTarget t : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo})
            n += l.projection(t).trainable_parameter_count();
    }
    return n;
}

// Gradient tree: mirrors the parameter tree, with storage only for the
// trainable tensors (frozen parameters get no gradient entry).
template <typename S>
inline TransformerParams<S> make_gradient_tree(const TransformerParams<S>& params) {
    TransformerParams<S> g;
    const bool adapters_only = params.any_adapted();
    g.layers.resize(params.layers.size());
    if (!adapters_only) {
        g.embedding = Matrix<S>(params.embedding.rows, params.embedding.cols);
        g.final_norm.assign(params.final_norm.size(), S(0));
        g.w_out = Matrix<S>(params.w_out.rows, params.w_out.cols);
    }
    for (size_t i = 0; i < params.layers.size(); ++i) {
        const auto& l = params.layers[i];
        auto& gl = g.layers[i];
        if (!adapters_only) {
            gl.attn_norm.assign(l.attn_norm.size(), S(0));
            gl.mlp_norm.assign(l.mlp_norm.size(), S(0));
            gl.w_gate = Matrix<S>(l.w_gate.rows, l.w_gate.cols);
            gl.w_up = Matrix<S>(l.w_up.rows, l.w_up.cols);
            gl.w_down = Matrix<S>(l.w_down.rows, l.w_down.cols);
        }
        for (LoraTarget t : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo}) {
            const auto& proj = l.projection(t);
            auto& gproj = gl.projection(t);
            if (!adapters_only)
                gproj.weight = Matrix<S>(proj.weight.rows, proj.weight.cols);
            if (proj.adapter) {
                LoraAdapter<S> ad;
                ad.a = Matrix<S>(proj.adapter->a.rows, proj.adapter->a.cols);
                ad.b = Matrix<S>(proj.adapter->b.rows, proj.adapter->b.cols);
                ad.scale = proj.adapter->scale;
                gproj.adapter = std::move(ad);
            }
        }
    }
    return g;
}

// Rotary tables for a run of positions [start, start + len).
template <typename S>
struct RopeTable {
    Matrix<S> cos_t;  // len x head_dim/2
    Matrix<S> sin_t;

    static RopeTable build(int start, int len, int head_dim, double base) {
        RopeTable t;
        const int half = head_dim / 2;
        t.cos_t = Matrix<S>(len, half);
        t.sin_t = Matrix<S>(len, half);
        for (int p = 0; p < len; ++p) {
            for (int i = 0; i < half; ++i) {
                const double freq = std::pow(base, -2.0 * i / head_dim);
                const double angle = static_cast<double>(start + p) * freq;
                t.cos_t.at(p, i) = static_cast<S>(std::cos(angle));
                t.sin_t.at(p, i) = static_cast<S>(std::sin(angle));
            }
        }
        return t;
    }

    // In-place rotation of one head vector at table row p.
    void apply(S* head_vec, int p) const {
        const int half = cos_t.cols;
        const S* c = cos_t.row(p);
        const S* s = sin_t.row(p);
        for (int i = 0; i < half; ++i) {
            const S x0 = head_vec[2 * i];
            const S x1 = head_vec[2 * i + 1];
            head_vec[2 * i] = x0 * c[i] - x1 * s[i];
            head_vec[2 * i + 1] = x0 * s[i] + x1 * c[i];
        }
    }

    // Inverse rotation (transpose), for gradients.
    void apply_inverse(S* head_vec, int p) const {
        const int half = cos_t.cols;
        const S* c = cos_t.row(p);
        const S* s = sin_t.row(p);
        for (int i = 0; i < half; ++i) {
            const S x0 = head_vec[2 * i];
            const S x1 = head_vec[2 * i + 1];
            head_vec[2 * i] = x0 * c[i] + x1 * s[i];
            head_vec[2 * i + 1] = -x0 * s[i] + x1 * c[i];
        }
    }
};

// y = gain .* x / rms(x); returns 1/rms for the backward pass.
template <typename S>
inline S rmsnorm(const S* x, const S* gain, S* y, int n) {
    double ms = 0.0;
    for (int i = 0; i < n; ++i) ms += static_cast<double>(x[i]) * static_cast<double>(x[i]);
    ms /= n;
    const S inv_rms = static_cast<S>(1.0 / std::sqrt(ms + kRmsNormEps));
    for (int i = 0; i < n; ++i) y[i] = gain[i] * x[i] * inv_rms;
    return inv_rms;
}

// dx and dgain of rmsnorm; dgain may be null when the gain is frozen.
template <typename S>
inline void rmsnorm_backward(const S* x, const S* gain, const S* dy, S inv_rms, int n, S* dx,
                             S* dgain) {
    S proj = S(0);  // <gain .* dy, x>
    for (int i = 0; i < n; ++i) proj += gain[i] * dy[i] * x[i];
    const S k = proj * inv_rms * inv_rms * inv_rms / static_cast<S>(n);
    for (int i = 0; i < n; ++i) dx[i] += gain[i] * dy[i] * inv_rms - x[i] * k;
    if (dgain)
        for (int i = 0; i < n; ++i) dgain[i] += dy[i] * x[i] * inv_rms;
}

template <typename S>
inline S silu(S z) {
    const S sig = S(1) / (S(1) + std::exp(-z));
    return z * sig;
}

template <typename S>
inline S silu_derivative(S z) {
    const S sig = S(1) / (S(1) + std::exp(-z));
    return sig * (S(1) + z * (S(1) - sig));
}

template <typename S>
struct LayerCache {
    Matrix<S> x_in;         // T x d_model, residual stream at layer entry
    Matrix<S> attn_normed;  // T x d_model
    std::vector<S> inv_rms_attn;
    Matrix<S> q;    // T x d_model (post-rope)
    Matrix<S> k;    // T x kv_dim (post-rope)
    Matrix<S> v;    // T x kv_dim
    std::vector<Matrix<S>> probs;  // per head, T x T attention weights
    Matrix<S> mix;  // T x d_model, attention-weighted values, pre-wo
    Matrix<S> x_mid;  // T x d_model, stream after attention residual
    Matrix<S> mlp_normed;
    std::vector<S> inv_rms_mlp;
    Matrix<S> gate_pre;  // T x d_ff
    Matrix<S> up;        // T x d_ff
    Matrix<S> act;       // T x d_ff
    // Adapter-input dropout multipliers per target projection (T x d_in),
    // allocated only while training with dropout > 0.
    std::array<Matrix<S>, 4> adapter_drop;
};

template <typename S>
struct ForwardCache {
    std::vector<LayerCache<S>> layers;
    Matrix<S> final_in;  // stream entering the final norm
    std::vector<S> inv_rms_final;
    Matrix<S> final_normed;
};

struct CrossEntropy {
    double sum = 0.0;   // total loss over masked positions
    size_t count = 0;   // masked positions
    double mean() const {
        if (count == 0) throw std::invalid_argument("loss: mask selects no positions");
        return sum / static_cast<double>(count);
    }
};

// Mean next-token cross-entropy over positions where mask == 1, with a
// stable log-sum-exp.
template <typename S>
inline CrossEntropy masked_cross_entropy(const Matrix<S>& logits, std::span<const int> targets,
                                         std::span<const uint8_t> mask) {
    if (static_cast<size_t>(logits.rows) != targets.size() || targets.size() != mask.size())
        throw std::invalid_argument("loss: shape mismatch");
    CrossEntropy ce;
    for (int t = 0; t < logits.rows; ++t) {
        if (!mask[static_cast<size_t>(t)]) continue;
        const int y = targets[static_cast<size_t>(t)];
        if (y < 0 || y >= logits.cols) throw std::invalid_argument("loss: target id out of range");
        const S* row = logits.row(t);
        double mx = row[0];
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (int j = 0; j < logits.cols; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        ce.sum += mx + std::log(z) - static_cast<double>(row[y]);
        ++ce.count;
    }
    return ce;
}

template <typename S>
struct BackwardResult {
    TransformerParams<S> grads;  // gradient tree (trainable entries only)
    double loss = 0.0;           // mean masked loss
    size_t mask_count = 0;
};

template <typename S>
class Transformer {
public:
    Transformer(ModelConfig cfg, TransformerParams<S> params)
        : cfg_(cfg), p_(std::move(params)) {
        cfg_.validate();
        validate_shapes();
    }

    // Fresh toy model: N(0, 0.02) embeddings and linear weights, unit gains.
    static Transformer init(const ModelConfig& cfg, uint64_t seed) {
        Rng rng(Rng::derive(seed, 0x6d6f64656cull));  // independent init stream
        TransformerParams<S> p = make_params_skeleton<S>(cfg);
        p.embedding.fill_normal(rng, kInitStd);
        for (auto& l : p.layers) {
            std::fill(l.attn_norm.begin(), l.attn_norm.end(), S(1));
            l.wq.weight.fill_normal(rng, kInitStd);
            l.wk.weight.fill_normal(rng, kInitStd);
            l.wv.weight.fill_normal(rng, kInitStd);
            l.wo.weight.fill_normal(rng, kInitStd);
            std::fill(l.mlp_norm.begin(), l.mlp_norm.end(), S(1));
            l.w_gate.fill_normal(rng, kInitStd);
            l.w_up.fill_normal(rng, kInitStd);
            l.w_down.fill_normal(rng, kInitStd);
        }
        std::fill(p.final_norm.begin(), p.final_norm.end(), S(1));
        p.w_out.fill_normal(rng, kInitStd);
        return Transformer(cfg, std::move(p));
    }

    const ModelConfig& config() const { return cfg_; }
    TransformerParams<S>& params() { return p_; }
    const TransformerParams<S>& params() const { return p_; }

    // Attach adapters to the configured target projections of every layer.
    void wrap_with_lora(const LoraConfig& lcfg, uint64_t seed) {
        Rng rng(Rng::derive(seed, 0x6c6f7261ull));
        for (auto& l : p_.layers)
            for (LoraTarget t : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo})
                if (lcfg.targets_projection(t)) wrap(l.projection(t), lcfg, rng);
    }

    // Per-position next-token logits (T x vocab).
    Matrix<S> forward(std::span<const int> tokens, const AttentionMask& mask = {},
                      ForwardCache<S>* cache = nullptr) const {
        const Matrix<S> hidden = forward_hidden(tokens, mask, cache);
        Matrix<S> logits(hidden.rows, cfg_.vocab_size);
        for (int t = 0; t < hidden.rows; ++t) matvec(p_.w_out, hidden.row(t), logits.row(t));
        return logits;
    }

    // Greedy decoding; deterministic, stops at `eos_id` or after max_new.
    std::vector<int> generate(std::span<const int> prompt, int max_new,
                              int eos_id = -1) const {
        if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
        if (static_cast<int>(prompt.size()) + max_new > cfg_.max_seq_len)
            throw std::invalid_argument("generate: prompt + max_new exceeds max_seq_len");
        std::vector<int> seq(prompt.begin(), prompt.end());
        for (int step = 0; step < max_new; ++step) {
            const Matrix<S> hidden = forward_hidden(seq, AttentionMask{}, nullptr);
            std::vector<S> logits(static_cast<size_t>(cfg_.vocab_size));
            matvec(p_.w_out, hidden.row(hidden.rows - 1), logits.data());
            int best = 0;
            for (int j = 1; j < cfg_.vocab_size; ++j)
                if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
            seq.push_back(best);
            if (best == eos_id) break;
        }
        return seq;
    }

    // Forward + loss + exact analytic gradients of the mean masked loss.
    // Gradients cover exactly the trainable tensors (adapters when present).
    BackwardResult<S> backward(std::span<const int> tokens, std::span<const int> targets,
                               std::span<const uint8_t> loss_mask,
                               const AttentionMask& mask = {}, Rng* dropout_rng = nullptr) const {
        ForwardCache<S> cache;
        const Matrix<S> logits = forward_train(tokens, mask, cache, dropout_rng);

        BackwardResult<S> res;
        const CrossEntropy ce = masked_cross_entropy(logits, targets, loss_mask);
        res.loss = ce.mean();
        res.mask_count = ce.count;
        res.grads = make_gradient_tree(p_);
        const bool base_grads = !p_.any_adapted();

        const int T = static_cast<int>(tokens.size());
        const int D = cfg_.d_model;
        const int V = cfg_.vocab_size;

        // dL/dlogits of the mean masked cross-entropy.
        Matrix<S> dlogits(T, V);
        const S inv_count = S(1) / static_cast<S>(ce.count);
        for (int t = 0; t < T; ++t) {
            if (!loss_mask[static_cast<size_t>(t)]) continue;
            const S* row = logits.row(t);
            S* drow = dlogits.row(t);
            double mx = row[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double z = 0.0;
            for (int j = 0; j < V; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
            for (int j = 0; j < V; ++j)
                drow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - mx) / z) * inv_count;
            drow[targets[static_cast<size_t>(t)]] -= inv_count;
        }

        // Output projection and final norm.
        Matrix<S> dstream(T, D);
        for (int t = 0; t < T; ++t) {
            if (base_grads) outer_acc(res.grads.w_out, dlogits.row(t), cache.final_normed.row(t));
            std::vector<S> dfn(static_cast<size_t>(D), S(0));
            matvec_transposed_acc(p_.w_out, dlogits.row(t), dfn.data());
            rmsnorm_backward(cache.final_in.row(t), p_.final_norm.data(), dfn.data(),
                             cache.inv_rms_final[static_cast<size_t>(t)], D, dstream.row(t),
                             base_grads ? res.grads.final_norm.data() : nullptr);
        }

        const auto seg = mask.segment_ids(T);
        for (int li = cfg_.n_layers - 1; li >= 0; --li)
            backward_layer(p_.layers[static_cast<size_t>(li)],
                           res.grads.layers[static_cast<size_t>(li)],
                           cache.layers[static_cast<size_t>(li)], seg, dstream, base_grads);

        if (base_grads)
            for (int t = 0; t < T; ++t)
                axpy(S(1), std::span<const S>(dstream.row(t), static_cast<size_t>(D)),
                     std::span<S>(res.grads.embedding.row(tokens[static_cast<size_t>(t)]),
                                  static_cast<size_t>(D)));
        return res;
    }

private:
    void validate_shapes() const {
        auto check = [](bool ok, const char* what) {
            if (!ok) throw std::invalid_argument(std::string("params/config shape mismatch: ") + what);
        };
        check(p_.embedding.rows == cfg_.vocab_size && p_.embedding.cols == cfg_.d_model,
              "embedding");
        check(static_cast<int>(p_.layers.size()) == cfg_.n_layers, "layer count");
        for (const auto& l : p_.layers) {
            check(static_cast<int>(l.attn_norm.size()) == cfg_.d_model, "attn_norm");
            check(l.wq.weight.rows == cfg_.d_model && l.wq.weight.cols == cfg_.d_model, "wq");
            check(l.wk.weight.rows == cfg_.kv_dim() && l.wk.weight.cols == cfg_.d_model, "wk");
            check(l.wv.weight.rows == cfg_.kv_dim() && l.wv.weight.cols == cfg_.d_model, "wv");
            check(l.wo.weight.rows == cfg_.d_model && l.wo.weight.cols == cfg_.d_model, "wo");
            check(static_cast<int>(l.mlp_norm.size()) == cfg_.d_model, "mlp_norm");
            check(l.w_gate.rows == cfg_.d_ff && l.w_gate.cols == cfg_.d_model, "w_gate");
            check(l.w_up.rows == cfg_.d_ff && l.w_up.cols == cfg_.d_model, "w_up");
            check(l.w_down.rows == cfg_.d_model && l.w_down.cols == cfg_.d_ff, "w_down");
        }
        check(static_cast<int>(p_.final_norm.size()) == cfg_.d_model, "final_norm");
        check(p_.w_out.rows == cfg_.vocab_size && p_.w_out.cols == cfg_.d_model, "w_out");
    }

    void validate_tokens(std::span<const int> tokens) const {
        if (tokens.empty()) throw std::invalid_argument("forward: empty token sequence");
        if (static_cast<int>(tokens.size()) > cfg_.max_seq_len)
            throw std::invalid_argument("forward: sequence longer than max_seq_len");
        for (int id : tokens)
            if (id < 0 || id >= cfg_.vocab_size)
                throw std::invalid_argument("forward: token id out of range");
    }

    Matrix<S> forward_hidden(std::span<const int> tokens, const AttentionMask& mask,
                             ForwardCache<S>* cache) const {
        return run_stack(tokens, mask, cache, nullptr);
    }

    Matrix<S> forward_train(std::span<const int> tokens, const AttentionMask& mask,
                            ForwardCache<S>& cache, Rng* dropout_rng) const {
        const Matrix<S> hidden = run_stack(tokens, mask, &cache, dropout_rng);
        Matrix<S> logits(hidden.rows, cfg_.vocab_size);
        for (int t = 0; t < hidden.rows; ++t) matvec(p_.w_out, hidden.row(t), logits.row(t));
        return logits;
    }

    // The stack below drops attention-probability rows for positions nothing
    // can attend from; `probs` rows are zero-filled outside the visible set.
    Matrix<S> run_stack(std::span<const int> tokens, const AttentionMask& mask,
                        ForwardCache<S>* cache, Rng* dropout_rng) const {
        validate_tokens(tokens);
        const int T = static_cast<int>(tokens.size());
        const int D = cfg_.d_model;
        const int HD = cfg_.head_dim();
        const int KV = cfg_.kv_dim();
        const int H = cfg_.n_heads;
        const int G = cfg_.group_size();
        const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(HD)));

        const auto rope = RopeTable<S>::build(0, T, HD, cfg_.rope_base);
        const auto seg = mask.segment_ids(T);

        Matrix<S> x(T, D);
        for (int t = 0; t < T; ++t) {
            const S* e = p_.embedding.row(tokens[static_cast<size_t>(t)]);
            std::copy(e, e + D, x.row(t));
        }

        if (cache) cache->layers.assign(static_cast<size_t>(cfg_.n_layers), LayerCache<S>{});

        std::vector<S> tmp_rank;
        Matrix<S> attn_normed(T, D), q(T, D), k(T, KV), v(T, KV), mix(T, D);
        Matrix<S> mlp_normed(T, D), gate_pre(T, cfg_.d_ff), up(T, cfg_.d_ff), act(T, cfg_.d_ff);

        for (int li = 0; li < cfg_.n_layers; ++li) {
            const auto& l = p_.layers[static_cast<size_t>(li)];
            LayerCache<S>* lc = cache ? &cache->layers[static_cast<size_t>(li)] : nullptr;
            if (lc) lc->x_in = x;

            std::vector<S> inv_rms_attn(static_cast<size_t>(T));
            for (int t = 0; t < T; ++t)
                inv_rms_attn[static_cast<size_t>(t)] =
                    rmsnorm(x.row(t), l.attn_norm.data(), attn_normed.row(t), D);

            // Training-time dropout on the adapter input path; returns the
            // (cached) dropped input, or null to reuse x unchanged.
            std::vector<S> xd_buf;
            auto adapter_input = [&](const LoraLinear<S>& proj, LoraTarget tgt, const S* xi,
                                     int t) -> const S* {
                if (!dropout_rng || !lc || !proj.adapter || !(proj.adapter->dropout > 0.0))
                    return nullptr;
                const double pdrop = proj.adapter->dropout;
                const S keep_scale = static_cast<S>(1.0 / (1.0 - pdrop));
                Matrix<S>& m = lc->adapter_drop[static_cast<size_t>(tgt)];
                if (m.empty()) m = Matrix<S>(T, proj.d_in());
                S* mrow = m.row(t);
                xd_buf.resize(static_cast<size_t>(proj.d_in()));
                for (int c = 0; c < proj.d_in(); ++c) {
                    mrow[c] = dropout_rng->next_double() >= pdrop ? keep_scale : S(0);
                    xd_buf[static_cast<size_t>(c)] = xi[c] * mrow[c];
                }
                return xd_buf.data();
            };

            const int max_rank =
                std::max({l.wq.rank(), l.wk.rank(), l.wv.rank(), l.wo.rank(), 1});
            tmp_rank.resize(static_cast<size_t>(max_rank));
            for (int t = 0; t < T; ++t) {
                const S* xn = attn_normed.row(t);
                l.wq.forward(xn, q.row(t), tmp_rank.data(), adapter_input(l.wq, LoraTarget::kWq, xn, t));
                l.wk.forward(xn, k.row(t), tmp_rank.data(), adapter_input(l.wk, LoraTarget::kWk, xn, t));
                l.wv.forward(xn, v.row(t), tmp_rank.data(), adapter_input(l.wv, LoraTarget::kWv, xn, t));
                for (int h = 0; h < H; ++h) rope.apply(q.row(t) + h * HD, t);
                for (int g = 0; g < cfg_.n_kv_heads; ++g) rope.apply(k.row(t) + g * HD, t);
            }

            if (lc) {
                lc->probs.assign(static_cast<size_t>(H), Matrix<S>(T, T));
                lc->inv_rms_attn = inv_rms_attn;
            }
            std::vector<S> scores(static_cast<size_t>(T));
            for (int h = 0; h < H; ++h) {
                const int g = h / G;
                for (int t = 0; t < T; ++t) {
                    const S* qt = q.row(t) + h * HD;
                    S mx = std::numeric_limits<S>::lowest();
                    for (int j = 0; j <= t; ++j) {
                        if (seg[static_cast<size_t>(j)] != seg[static_cast<size_t>(t)]) continue;
                        const S sc = dot(qt, k.row(j) + g * HD, HD) * inv_sqrt_hd;
                        scores[static_cast<size_t>(j)] = sc;
                        mx = std::max(mx, sc);
                    }
                    S z = S(0);
                    for (int j = 0; j <= t; ++j) {
                        if (seg[static_cast<size_t>(j)] != seg[static_cast<size_t>(t)]) continue;
                        const S e = std::exp(scores[static_cast<size_t>(j)] - mx);
                        scores[static_cast<size_t>(j)] = e;
                        z += e;
                    }
                    const S inv_z = S(1) / z;
                    S* out = mix.row(t) + h * HD;
                    std::fill(out, out + HD, S(0));
                    S* prow = lc ? lc->probs[static_cast<size_t>(h)].row(t) : nullptr;
                    for (int j = 0; j <= t; ++j) {
                        if (seg[static_cast<size_t>(j)] != seg[static_cast<size_t>(t)]) continue;
                        const S pj = scores[static_cast<size_t>(j)] * inv_z;
                        if (prow) prow[j] = pj;
                        const S* vj = v.row(j) + g * HD;
                        for (int d = 0; d < HD; ++d) out[d] += pj * vj[d];
                    }
                }
            }

            for (int t = 0; t < T; ++t) {
                std::vector<S> attn_out(static_cast<size_t>(D));
                l.wo.forward(mix.row(t), attn_out.data(), tmp_rank.data(),
                             adapter_input(l.wo, LoraTarget::kWo, mix.row(t), t));
                S* xt = x.row(t);
                for (int d = 0; d < D; ++d) xt[d] += attn_out[static_cast<size_t>(d)];
            }
            if (lc) {
                lc->attn_normed = attn_normed;
                lc->q = q;
                lc->k = k;
                lc->v = v;
                lc->mix = mix;
                lc->x_mid = x;
            }

            std::vector<S> inv_rms_mlp(static_cast<size_t>(T));
            for (int t = 0; t < T; ++t) {
                inv_rms_mlp[static_cast<size_t>(t)] =
                    rmsnorm(x.row(t), l.mlp_norm.data(), mlp_normed.row(t), D);
                matvec(l.w_gate, mlp_normed.row(t), gate_pre.row(t));
                matvec(l.w_up, mlp_normed.row(t), up.row(t));
                S* a = act.row(t);
                const S* gp = gate_pre.row(t);
                const S* u = up.row(t);
                for (int f = 0; f < cfg_.d_ff; ++f) a[f] = silu(gp[f]) * u[f];
                std::vector<S> down(static_cast<size_t>(D));
                matvec(l.w_down, a, down.data());
                S* xt = x.row(t);
                for (int d = 0; d < D; ++d) xt[d] += down[static_cast<size_t>(d)];
            }
            if (lc) {
                lc->mlp_normed = mlp_normed;
                lc->inv_rms_mlp = inv_rms_mlp;
                lc->gate_pre = gate_pre;
                lc->up = up;
                lc->act = act;
            }
        }

        Matrix<S> hidden(T, D);
        std::vector<S> inv_rms_final(static_cast<size_t>(T));
        for (int t = 0; t < T; ++t)
            inv_rms_final[static_cast<size_t>(t)] =
                rmsnorm(x.row(t), p_.final_norm.data(), hidden.row(t), D);
        if (cache) {
            cache->final_in = std::move(x);
            cache->inv_rms_final = std::move(inv_rms_final);
            cache->final_normed = hidden;
        }
        return hidden;
    }

    // Backward of y = proj(x) at every position; accumulates parameter
    // gradients and adds W^T dy (plus the adapter path) into dx. `dropmask`
    // holds the adapter-input dropout multipliers (empty when none applied).
    void backward_projection(const LoraLinear<S>& proj, LoraLinear<S>& gproj,
                             const Matrix<S>& x_rows, const Matrix<S>& dy_rows, Matrix<S>& dx_rows,
                             const Matrix<S>& dropmask, bool base_grads) const {
        const int d_out = proj.d_out();
        const int d_in = proj.d_in();
        std::vector<S> xa_buf;
        for (int t = 0; t < x_rows.rows; ++t) {
            const S* x = x_rows.row(t);
            const S* dy = dy_rows.row(t);
            S* dx = dx_rows.row(t);
            matvec_transposed_acc(proj.weight, dy, dx);
            if (base_grads && !gproj.weight.empty()) outer_acc(gproj.weight, dy, x);
            if (proj.adapter) {
                const auto& ad = *proj.adapter;
                auto& gad = *gproj.adapter;
                const int r = ad.a.rows;
                const S* m = dropmask.empty() ? nullptr : dropmask.row(t);
                const S* xa = x;  // adapter-path input
                if (m) {
                    xa_buf.resize(static_cast<size_t>(d_in));
                    for (int c = 0; c < d_in; ++c) xa_buf[static_cast<size_t>(c)] = x[c] * m[c];
                    xa = xa_buf.data();
                }
                std::vector<S> u(static_cast<size_t>(r));
                std::vector<S> bt_dy(static_cast<size_t>(r), S(0));
                matvec(ad.a, xa, u.data());  // u = A xa
                for (int i = 0; i < d_out; ++i) {
                    const S g = dy[i];
                    if (g == S(0)) continue;
                    const S* br = ad.b.row(i);
                    S* gbr = gad.b.row(i);
                    for (int j = 0; j < r; ++j) {
                        bt_dy[static_cast<size_t>(j)] += br[j] * g;
                        gbr[j] += ad.scale * g * u[static_cast<size_t>(j)];
                    }
                }
                for (int j = 0; j < r; ++j) {
                    const S gj = ad.scale * bt_dy[static_cast<size_t>(j)];
                    if (gj == S(0)) continue;
                    S* gar = gad.a.row(j);
                    const S* ar = ad.a.row(j);
                    for (int c = 0; c < d_in; ++c) {
                        gar[c] += gj * xa[c];
                        dx[c] += gj * ar[c] * (m ? m[c] : S(1));
                    }
                }
            }
        }
    }

    void backward_layer(const LayerParams<S>& l, LayerParams<S>& gl, const LayerCache<S>& lc,
                        const std::vector<int>& seg, Matrix<S>& dstream, bool base_grads) const {
        const int T = lc.x_in.rows;
        const int D = cfg_.d_model;
        const int F = cfg_.d_ff;
        const int HD = cfg_.head_dim();
        const int KV = cfg_.kv_dim();
        const int H = cfg_.n_heads;
        const int G = cfg_.group_size();
        const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(HD)));
        const auto rope = RopeTable<S>::build(0, T, HD, cfg_.rope_base);

        // MLP block. dstream arrives as the gradient at the block output.
        Matrix<S> dx_mid(T, D);
        for (int t = 0; t < T; ++t) {
            const S* ddown = dstream.row(t);  // residual: output grad feeds both paths
            std::copy(ddown, ddown + D, dx_mid.row(t));

            std::vector<S> dact(static_cast<size_t>(F), S(0));
            matvec_transposed_acc(l.w_down, ddown, dact.data());
            if (base_grads) outer_acc(gl.w_down, ddown, lc.act.row(t));

            std::vector<S> dgate(static_cast<size_t>(F)), dup(static_cast<size_t>(F));
            const S* gp = lc.gate_pre.row(t);
            const S* u = lc.up.row(t);
            for (int f = 0; f < F; ++f) {
                dgate[static_cast<size_t>(f)] = dact[static_cast<size_t>(f)] * u[f] * silu_derivative(gp[f]);
                dup[static_cast<size_t>(f)] = dact[static_cast<size_t>(f)] * silu(gp[f]);
            }
            std::vector<S> dmlp_normed(static_cast<size_t>(D), S(0));
            matvec_transposed_acc(l.w_gate, dgate.data(), dmlp_normed.data());
            matvec_transposed_acc(l.w_up, dup.data(), dmlp_normed.data());
            if (base_grads) {
                outer_acc(gl.w_gate, dgate.data(), lc.mlp_normed.row(t));
                outer_acc(gl.w_up, dup.data(), lc.mlp_normed.row(t));
            }
            rmsnorm_backward(lc.x_mid.row(t), l.mlp_norm.data(), dmlp_normed.data(),
                             lc.inv_rms_mlp[static_cast<size_t>(t)], D, dx_mid.row(t),
                             base_grads ? gl.mlp_norm.data() : nullptr);
        }

        // Attention block.
        Matrix<S> dmix(T, D);
        backward_projection(l.wo, gl.wo, lc.mix, dx_mid, dmix,
                            lc.adapter_drop[static_cast<size_t>(LoraTarget::kWo)], base_grads);
        // dx_mid already carries the residual passthrough into the stream.

        Matrix<S> dq(T, D), dk(T, KV), dv(T, KV);
        std::vector<S> dp(static_cast<size_t>(T)), ds(static_cast<size_t>(T));
        for (int h = 0; h < H; ++h) {
            const int g = h / G;
            const Matrix<S>& probs = lc.probs[static_cast<size_t>(h)];
            for (int t = 0; t < T; ++t) {
                const S* dmix_t = dmix.row(t) + h * HD;
                const S* prow = probs.row(t);
                // dv and dp over the visible positions
                S pdsum = S(0);
                for (int j = 0; j <= t; ++j) {
                    if (seg[static_cast<size_t>(j)] != seg[static_cast<size_t>(t)]) continue;
                    const S pj = prow[j];
                    const S* vj = lc.v.row(j) + g * HD;
                    S d = S(0);
                    for (int dd = 0; dd < HD; ++dd) d += dmix_t[dd] * vj[dd];
                    dp[static_cast<size_t>(j)] = d;
                    pdsum += pj * d;
                    S* dvj = dv.row(j) + g * HD;
                    for (int dd = 0; dd < HD; ++dd) dvj[dd] += pj * dmix_t[dd];
                }
                // softmax backward, then scores -> q, k
                const S* qt = lc.q.row(t) + h * HD;
                S* dqt = dq.row(t) + h * HD;
                for (int j = 0; j <= t; ++j) {
                    if (seg[static_cast<size_t>(j)] != seg[static_cast<size_t>(t)]) continue;
                    const S dsj = prow[j] * (dp[static_cast<size_t>(j)] - pdsum) * inv_sqrt_hd;
                    if (dsj == S(0)) continue;
                    const S* kj = lc.k.row(j) + g * HD;
                    S* dkj = dk.row(j) + g * HD;
                    for (int dd = 0; dd < HD; ++dd) {
                        dqt[dd] += dsj * kj[dd];
                        dkj[dd] += dsj * qt[dd];
                    }
                }
            }
        }

        // Un-rotate the gradients, then back through the projections.
        for (int t = 0; t < T; ++t) {
            for (int h = 0; h < H; ++h) rope.apply_inverse(dq.row(t) + h * HD, t);
            for (int g = 0; g < cfg_.n_kv_heads; ++g) rope.apply_inverse(dk.row(t) + g * HD, t);
        }

        Matrix<S> dattn_normed(T, D);
        backward_projection(l.wq, gl.wq, lc.attn_normed, dq, dattn_normed,
                            lc.adapter_drop[static_cast<size_t>(LoraTarget::kWq)], base_grads);
        backward_projection(l.wk, gl.wk, lc.attn_normed, dk, dattn_normed,
                            lc.adapter_drop[static_cast<size_t>(LoraTarget::kWk)], base_grads);
        backward_projection(l.wv, gl.wv, lc.attn_normed, dv, dattn_normed,
                            lc.adapter_drop[static_cast<size_t>(LoraTarget::kWv)], base_grads);

        for (int t = 0; t < T; ++t) {
            // dstream becomes the gradient at the layer input
            std::copy(dx_mid.row(t), dx_mid.row(t) + D, dstream.row(t));
            rmsnorm_backward(lc.x_in.row(t), l.attn_norm.data(), dattn_normed.row(t),
                             lc.inv_rms_attn[static_cast<size_t>(t)], D, dstream.row(t),
                             base_grads ? gl.attn_norm.data() : nullptr);
        }
    }

    ModelConfig cfg_;
    TransformerParams<S> p_;
};

}  // namespace loft
