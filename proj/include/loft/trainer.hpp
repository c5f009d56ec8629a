#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "loft/common.hpp"
#include "loft/model.hpp"
#include "loft/tokenizer.hpp"

namespace loft {

struct TrainConfig {
    double learning_rate = 5e-5;
    int batch_size = 4;
    int grad_accum = 6;
    int epochs = 3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    uint64_t seed = 42;
    int cutoff = 400;

    int effective_batch() const { return batch_size * grad_accum; }

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw std::invalid_argument("train config: learning_rate must be positive");
        if (batch_size < 1 || grad_accum < 1 || epochs < 1 || cutoff < 1)
            throw std::invalid_argument("train config: counts must be >= 1");
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0))
            throw std::invalid_argument("train config: betas must lie in (0,1)");
        if (!(adam_eps > 0.0)) throw std::invalid_argument("train config: adam_eps must be positive");
        if (weight_decay < 0.0 || !std::isfinite(weight_decay))
            throw std::invalid_argument("train config: weight_decay must be non-negative");
    }
};

struct LossPoint {
    int step = 0;     // 1-based optimizer step
    double loss = 0;  // mean masked loss over the accumulation window
};
using LossCurve = std::vector<LossPoint>;

// First-/second-moment buffers aligned positionally with a trainable tensor
// list; `step` counts completed optimizer steps.
template <typename S>
struct AdamState {
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;
    long step = 0;

    static AdamState init(const std::vector<TensorRef<S>>& refs) {
        AdamState st;
        st.m.reserve(refs.size());
        st.v.reserve(refs.size());
        for (const auto& r : refs) {
            st.m.emplace_back(r.data->size(), S(0));
            st.v.emplace_back(r.data->size(), S(0));
        }
        return st;
    }
};

// One bias-corrected AdamW update on a parameter slice, with decoupled weight
// decay. `step_t` is the 1-based step this update belongs to.
template <typename S>
inline void adamw_step(std::span<S> w, std::span<const S> g, std::vector<S>& m, std::vector<S>& v,
                       long step_t, const TrainConfig& cfg) {
    if (w.size() != g.size() || w.size() != m.size() || w.size() != v.size())
        throw std::invalid_argument("adamw: slice size mismatch");
    for (S gi : g)
        if (!std::isfinite(static_cast<double>(gi)))
            throw NumericError("adamw: non-finite gradient, aborting step");
    const S b1 = static_cast<S>(cfg.adam_beta1);
    const S b2 = static_cast<S>(cfg.adam_beta2);
    const S inv_bc1 = static_cast<S>(1.0 / (1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step_t))));
    const S inv_bc2 = static_cast<S>(1.0 / (1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step_t))));
    const S lr = static_cast<S>(cfg.learning_rate);
    const S eps = static_cast<S>(cfg.adam_eps);
    const S wd = static_cast<S>(cfg.weight_decay);
    for (size_t i = 0; i < w.size(); ++i) {
        m[i] = b1 * m[i] + (S(1) - b1) * g[i];
        v[i] = b2 * v[i] + (S(1) - b2) * g[i] * g[i];
        const S m_hat = m[i] * inv_bc1;
        const S v_hat = v[i] * inv_bc2;
        w[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * w[i]);
    }
}

// Shifted next-token view of an encoded example: position i is supervised to
// predict token i+1 wherever the token-level loss mask marks i+1.
struct ShiftedExample {
    std::vector<int> tokens;
    std::vector<int> targets;
    std::vector<uint8_t> mask;
    size_t supervised = 0;
};

inline ShiftedExample shift_for_next_token(const EncodedExample& ex) {
    const size_t n = ex.token_ids.size();
    if (n < 2) throw std::invalid_argument("train: example too short to supervise");
    ShiftedExample s;
    s.tokens = ex.token_ids;
    s.targets.assign(n, 0);
    s.mask.assign(n, 0);
    for (size_t i = 0; i + 1 < n; ++i) {
        s.targets[i] = ex.token_ids[i + 1];
        s.mask[i] = ex.loss_mask[i + 1];
        if (s.mask[i]) ++s.supervised;
    }
    return s;
}

struct TrainResult {
    LossCurve curve;
    size_t optimizer_steps = 0;
};

// Fine-tune in place. Each accumulation window pools gradients over all its
// masked tokens (gradient of the token-mean loss over the whole window), so a
// (batch_size, grad_accum) split takes the same step as one concatenated
// batch. A trailing partial window still steps. With adapters attached, only
// A/B matrices move; otherwise all base weights train.
template <typename S>
inline TrainResult train(Transformer<S>& model, const std::vector<EncodedExample>& corpus,
                         const TrainConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    if (corpus.empty()) throw std::invalid_argument("train: empty corpus");

    std::vector<ShiftedExample> shifted;
    shifted.reserve(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
        if (static_cast<int>(corpus[i].token_ids.size()) > cfg.cutoff)
            throw std::invalid_argument("train: example " + std::to_string(i) +
                                        " exceeds cutoff " + std::to_string(cfg.cutoff));
        ShiftedExample s = shift_for_next_token(corpus[i]);
        if (s.supervised == 0)
            throw std::invalid_argument("train: example " + std::to_string(i) +
                                        " has no supervised positions");
        shifted.push_back(std::move(s));
    }

    auto refs = trainable_tensors(model.params());
    auto acc_tree = make_gradient_tree(model.params());
    auto acc_refs = trainable_tensors(acc_tree);
    AdamState<S> state = AdamState<S>::init(refs);

    bool wants_dropout = false;
    for (const auto& l : model.params().layers)
        for (LoraTarget t : {LoraTarget::kWq, LoraTarget::kWk, LoraTarget::kWv, LoraTarget::kWo})
            if (l.projection(t).adapter && l.projection(t).adapter->dropout > 0.0)
                wants_dropout = true;
    Rng dropout_rng(Rng::derive(cfg.seed, 0x64726f70ull));  // "drop"

    TrainResult result;
    const size_t window_examples = static_cast<size_t>(cfg.effective_batch());
    std::vector<size_t> order(shifted.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(Rng::derive(Rng::derive(cfg.seed, 0x747261696eull), static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        size_t in_window = 0;
        size_t window_tokens = 0;
        double window_loss_sum = 0.0;

        auto zero_window = [&] {
            in_window = 0;
            window_tokens = 0;
            window_loss_sum = 0.0;
            for (auto& r : acc_refs) std::fill(r.data->begin(), r.data->end(), S(0));
        };
        zero_window();

        auto take_step = [&] {
            if (in_window == 0) return;
            const S inv_tokens = S(1) / static_cast<S>(window_tokens);
            for (auto& r : acc_refs)
                for (auto& g : *r.data) g *= inv_tokens;
            const double step_loss = window_loss_sum / static_cast<double>(window_tokens);
            if (!std::isfinite(step_loss))
                throw NumericError("train: non-finite loss at step " +
                                   std::to_string(state.step + 1));
            ++state.step;
            for (size_t i = 0; i < refs.size(); ++i)
                adamw_step(std::span<S>(*refs[i].data), std::span<const S>(*acc_refs[i].data),
                           state.m[i], state.v[i], state.step, cfg);
            result.curve.push_back({static_cast<int>(state.step), step_loss});
            if (log)
                *log << "epoch " << (epoch + 1) << "/" << cfg.epochs << " step " << state.step
                     << " loss " << step_loss << "\n";
            zero_window();
        };

        for (size_t oi = 0; oi < order.size(); ++oi) {
            const ShiftedExample& s = shifted[order[oi]];
            auto res = model.backward(s.tokens, s.targets, s.mask, AttentionMask{},
                                      wants_dropout ? &dropout_rng : nullptr);
            // Pool by token count: grad of the window's token-mean loss.
            const S scale = static_cast<S>(res.mask_count);
            auto grad_refs = trainable_tensors(res.grads);
            for (size_t i = 0; i < acc_refs.size(); ++i) {
                const auto& src = *grad_refs[i].data;
                auto& dst = *acc_refs[i].data;
                for (size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
            }
            window_loss_sum += res.loss * static_cast<double>(res.mask_count);
            window_tokens += res.mask_count;
            ++in_window;
            if (in_window == window_examples) take_step();
        }
        take_step();  // trailing partial window
    }
    result.optimizer_steps = static_cast<size_t>(state.step);
    return result;
}

// CSV with a header and one row per optimizer step.
inline std::string loss_curve_csv(const LossCurve& curve) {
    std::string out = "step,loss\n";
    char buf[64];
    for (const auto& pt : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g\n", pt.step, pt.loss);
        out += buf;
    }
    return out;
}

inline void emit_loss_curve(const LossCurve& curve, const std::string& path) {
    write_file_atomic(path, loss_curve_csv(curve));
}

}  // namespace loft
