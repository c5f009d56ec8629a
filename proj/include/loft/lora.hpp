#pragma once

#include <array>
#include <cstdint>
#include <iostream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loft/common.hpp"
#include "loft/matrix.hpp"

namespace loft {

// Attention projections that can carry an adapter.
enum class LoraTarget : int { kWq = 0, kWk, kWv, kWo };

inline constexpr std::array<std::string_view, 4> kLoraTargetNames = {"wq", "wk", "wv", "wo"};

struct LoraConfig {
    int r = 8;
    double alpha = 16.0;
    double dropout = 0.0;
    std::array<bool, 4> targets = {true, true, true, true};  // indexed by LoraTarget

    double scale() const { return alpha / static_cast<double>(r); }

    void validate() const {
        if (r < 1) throw std::invalid_argument("lora r must be >= 1");
        if (!(alpha > 0.0) || !std::isfinite(alpha / r))
            throw std::invalid_argument("lora scale alpha/r must be finite and positive");
        if (dropout < 0.0 || dropout > 1.0)
            throw std::invalid_argument("lora dropout must be in [0,1]");
    }

    bool targets_projection(LoraTarget t) const { return targets[static_cast<size_t>(t)]; }
};

// Trainable low-rank factors of one wrapped projection. The effective
// weight is W + scale * B * A; B starts at zero so wrapping changes nothing.
template <typename S>
struct LoraAdapter {
    Matrix<S> a;  // r x d_in
    Matrix<S> b;  // d_out x r
    S scale = S(1);
    double dropout = 0.0;
};

// A linear layer y = W x with an optionally attached low-rank adapter.
// The base weight is frozen the moment an adapter is attached.
template <typename S>
struct LoraLinear {
    Matrix<S> weight;  // d_out x d_in, frozen while adapted
    std::optional<LoraAdapter<S>> adapter;
    bool merged = false;

    int d_out() const { return weight.rows; }
    int d_in() const { return weight.cols; }
    bool adapted() const { return adapter.has_value(); }
    int rank() const { return adapter ? adapter->a.rows : 0; }

    // y = W x + scale * B (A x); the product B*A is never materialized here.
    // `tmp` must hold rank() scalars when adapted. `x_adapter` overrides the
    // input seen by the adapter path only (used for adapter dropout during
    // training; the base path always sees x).
    void forward(const S* x, S* y, S* tmp, const S* x_adapter = nullptr) const {
        matvec(weight, x, y);
        if (adapter && !merged) {
            matvec(adapter->a, x_adapter ? x_adapter : x, tmp);
            for (int r = 0; r < adapter->b.rows; ++r)
                y[r] += adapter->scale * dot(adapter->b.row(r), tmp, adapter->a.rows);
        }
    }

    void forward_alloc(const S* x, S* y) const {
        std::vector<S> tmp(static_cast<size_t>(std::max(rank(), 1)));
        forward(x, y, tmp.data());
    }

    size_t trainable_parameter_count() const {
        if (!adapter) return 0;
        return adapter->a.size() + adapter->b.size();
    }
};

// Attach a freshly initialized adapter: A ~ N(0, 0.02^2) from the seeded
// stream, B = 0, so the adapted forward equals the base forward exactly.
template <typename S>
inline void wrap(LoraLinear<S>& layer, const LoraConfig& cfg, Rng& rng) {
    cfg.validate();
    if (layer.merged) throw std::logic_error("cannot wrap a merged layer");
    if (cfg.r > std::min(layer.d_in(), layer.d_out())) {
        std::cerr << "warning: lora rank " << cfg.r << " exceeds min(d_in, d_out) = "
                  << std::min(layer.d_in(), layer.d_out()) << "\n";
    }
    LoraAdapter<S> ad;
    ad.a = Matrix<S>(cfg.r, layer.d_in());
    ad.a.fill_normal(rng, 0.02);
    ad.b = Matrix<S>(layer.d_out(), cfg.r);
    ad.scale = static_cast<S>(cfg.scale());
    ad.dropout = cfg.dropout;
    layer.adapter = std::move(ad);
}

// The adapter update as a dense matrix, scale * B * A. Only materialized
// for merge/unmerge and oracle checks.
template <typename S>
inline Matrix<S> adapter_delta(const LoraLinear<S>& layer) {
    if (!layer.adapter) throw std::logic_error("layer has no adapter");
    Matrix<S> delta = matmul(layer.adapter->b, layer.adapter->a);
    for (auto& v : delta.data) v *= layer.adapter->scale;
    return delta;
}

template <typename S>
inline void merge(LoraLinear<S>& layer) {
    if (!layer.adapter) throw std::logic_error("merge: layer has no adapter");
    if (layer.merged) throw std::logic_error("merge: already merged");
    const Matrix<S> delta = adapter_delta(layer);
    for (size_t i = 0; i < layer.weight.data.size(); ++i) layer.weight.data[i] += delta.data[i];
    layer.merged = true;
}

template <typename S>
inline void unmerge(LoraLinear<S>& layer) {
    if (!layer.adapter) throw std::logic_error("unmerge: layer has no adapter");
    if (!layer.merged) throw std::logic_error("unmerge: not merged");
    const Matrix<S> delta = adapter_delta(layer);
    for (size_t i = 0; i < layer.weight.data.size(); ++i) layer.weight.data[i] -= delta.data[i];
    layer.merged = false;
}

}  // namespace loft
