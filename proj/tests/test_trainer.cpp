#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "loft/tokenizer.hpp"
#include "loft/trainer.hpp"
#include "test_util.hpp"

using namespace loft;

namespace {

ModelConfig tiny_config(int vocab = 48) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.d_ff = 32;
    cfg.max_seq_len = 32;
    return cfg;
}

// Synthetic encoded example: random ids with a supervised tail, no tokenizer
// semantics needed by the trainer.
EncodedExample fake_example(Rng& rng, int vocab, int min_len = 6, int max_len = 14) {
    const int len =
        min_len + static_cast<int>(rng.next_below(static_cast<uint64_t>(max_len - min_len + 1)));
    EncodedExample ex;
    ex.token_ids.resize(static_cast<size_t>(len));
    for (auto& t : ex.token_ids) t = static_cast<int>(rng.next_below(static_cast<uint64_t>(vocab)));
    ex.loss_mask.assign(static_cast<size_t>(len), 0);
    const int sup_start = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(len - 1)));
    for (int i = sup_start; i < len; ++i) ex.loss_mask[static_cast<size_t>(i)] = 1;
    return ex;
}

std::vector<EncodedExample> fake_corpus(uint64_t seed, size_t count, int vocab) {
    Rng rng(seed);
    std::vector<EncodedExample> out;
    out.reserve(count);
    for (size_t i = 0; i < count; ++i) out.push_back(fake_example(rng, vocab));
    return out;
}

Transformer<float> fresh_adapted_model(const ModelConfig& cfg, double dropout = 0.0) {
    auto model = Transformer<float>::init(cfg, 77);
    LoraConfig lcfg;
    lcfg.r = 2;
    lcfg.alpha = 8.0;
    lcfg.dropout = dropout;
    model.wrap_with_lora(lcfg, 78);
    return model;
}

template <typename S>
std::vector<std::vector<S>> snapshot_base(const TransformerParams<S>& p) {
    std::vector<std::vector<S>> out;
    for_each_base_tensor(p, [&](const std::string&, const auto& data, const std::vector<int>&) {
        out.emplace_back(data.begin(), data.end());
    });
    return out;
}

template <typename S>
std::vector<std::vector<S>> snapshot_adapters(const TransformerParams<S>& p) {
    std::vector<std::vector<S>> out;
    for_each_adapter_tensor(p, [&](const std::string&, const auto& data, const std::vector<int>&) {
        out.emplace_back(data.begin(), data.end());
    });
    return out;
}

// Independent scalar AdamW for cross-checking the production kernel.
struct ScalarAdam {
    double m = 0.0, v = 0.0;
    double step(double w, double g, long t, const TrainConfig& c) {
        m = c.adam_beta1 * m + (1.0 - c.adam_beta1) * g;
        v = c.adam_beta2 * v + (1.0 - c.adam_beta2) * g * g;
        const double mhat = m / (1.0 - std::pow(c.adam_beta1, static_cast<double>(t)));
        const double vhat = v / (1.0 - std::pow(c.adam_beta2, static_cast<double>(t)));
        return w - c.learning_rate * (mhat / (std::sqrt(vhat) + c.adam_eps) + c.weight_decay * w);
    }
};

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    CHECK(cfg.learning_rate == 5e-5);
    CHECK(cfg.batch_size == 4);
    CHECK(cfg.grad_accum == 6);
    CHECK(cfg.epochs == 3);
    CHECK(cfg.effective_batch() == 24);
    CHECK(cfg.cutoff == 400);

    TrainConfig bad = cfg;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.learning_rate = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.batch_size = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.adam_beta1 = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.adam_eps = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.weight_decay = -0.01;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("adamw first step hand value") {
    // w = 1, g = 1, fresh state: m_hat = v_hat = 1, so the update is
    // lr * (1/(1 + eps) + wd * 1).
    TrainConfig cfg;  // lr 5e-5, wd 0.01, eps 1e-8
    std::vector<double> w = {1.0}, g = {1.0};
    std::vector<double> m(1, 0.0), v(1, 0.0);
    adamw_step(std::span<double>(w), std::span<const double>(g), m, v, 1, cfg);
    const double want = 1.0 - 5e-5 * (1.0 / (1.0 + 1e-8) + 0.01);
    CHECK(w[0] == Catch::Approx(want).epsilon(1e-14));
    CHECK(m[0] == Catch::Approx(0.1).epsilon(1e-14));
    CHECK(v[0] == Catch::Approx(0.001).epsilon(1e-14));
}

TEST_CASE("adamw tracks a scalar reference over many steps") {
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    Rng rng(50);
    std::vector<double> w = {0.7, -1.2, 0.0, 3.5};
    std::vector<double> m(4, 0.0), v(4, 0.0);
    auto wref = w;
    std::vector<ScalarAdam> ref(4);

    for (long t = 1; t <= 25; ++t) {
        std::vector<double> g(4);
        for (auto& x : g) x = rng.next_normal();
        adamw_step(std::span<double>(w), std::span<const double>(g), m, v, t, cfg);
        for (size_t i = 0; i < 4; ++i) wref[i] = ref[i].step(wref[i], g[i], t, cfg);
        for (size_t i = 0; i < 4; ++i)
            CHECK(testutil::rel_error(w[i], wref[i]) < 1e-12);
    }
}

TEST_CASE("adamw with zero gradient applies only decoupled decay") {
    TrainConfig cfg;
    std::vector<float> w = {2.0f}, g = {0.0f};
    std::vector<float> m(1, 0.0f), v(1, 0.0f);
    adamw_step(std::span<float>(w), std::span<const float>(g), m, v, 1, cfg);
    // m_hat / (sqrt(v_hat) + eps) = 0 / eps = 0; only wd * w remains.
    CHECK(w[0] == Catch::Approx(2.0 * (1.0 - 5e-5 * 0.01)).epsilon(1e-6));

    TrainConfig no_decay = cfg;
    no_decay.weight_decay = 0.0;
    std::vector<float> w2 = {2.0f};
    std::vector<float> m2(1, 0.0f), v2(1, 0.0f);
    adamw_step(std::span<float>(w2), std::span<const float>(g), m2, v2, 1, no_decay);
    CHECK(w2[0] == 2.0f);  // exactly untouched
}

TEST_CASE("adamw rejects non-finite gradients") {
    TrainConfig cfg;
    std::vector<float> w = {1.0f};
    std::vector<float> m(1, 0.0f), v(1, 0.0f);
    std::vector<float> g_inf = {std::numeric_limits<float>::infinity()};
    CHECK_THROWS_AS(
        adamw_step(std::span<float>(w), std::span<const float>(g_inf), m, v, 1, cfg),
        NumericError);
    std::vector<float> g_nan = {std::numeric_limits<float>::quiet_NaN()};
    CHECK_THROWS_AS(
        adamw_step(std::span<float>(w), std::span<const float>(g_nan), m, v, 1, cfg),
        NumericError);
    CHECK(w[0] == 1.0f);  // aborted before touching the weight
}

TEST_CASE("shift_for_next_token") {
    EncodedExample ex;
    ex.token_ids = {10, 11, 12, 13};
    ex.loss_mask = {0, 0, 1, 1};
    const ShiftedExample s = shift_for_next_token(ex);
    CHECK(s.tokens == ex.token_ids);
    CHECK(s.targets == std::vector<int>{11, 12, 13, 0});
    CHECK(s.mask == std::vector<uint8_t>{0, 1, 1, 0});  // last position predicts nothing
    CHECK(s.supervised == 2);

    EncodedExample one;
    one.token_ids = {5};
    one.loss_mask = {1};
    CHECK_THROWS_AS(shift_for_next_token(one), std::invalid_argument);
}

TEST_CASE("shift integrates with the tokenizer layout") {
    InstructionExample ex;
    ex.instruction = "cmd";
    ex.input = "in";
    ex.output = "{}";
    const auto enc = encode_example(ex, 64);
    const auto s = shift_for_next_token(enc);
    // Supervised positions: predictions of the output bytes and the EOS.
    CHECK(s.supervised == ex.output.size() + 1);
    // The position right before SEP_OUTPUT is not supervised; SEP_OUTPUT's is.
    const auto sep = static_cast<size_t>(
        std::find(enc.token_ids.begin(), enc.token_ids.end(), ByteTokenizer::kSepOutput) -
        enc.token_ids.begin());
    CHECK(s.mask[sep - 1] == 0);
    CHECK(s.mask[sep] == 1);
    CHECK(s.targets[sep] == static_cast<int>(static_cast<unsigned char>('{')));
}

TEST_CASE("training is deterministic in the seed") {
    const ModelConfig cfg = tiny_config();
    const auto corpus = fake_corpus(60, 10, cfg.vocab_size);
    TrainConfig tc;
    tc.batch_size = 2;
    tc.grad_accum = 2;
    tc.epochs = 2;
    tc.learning_rate = 1e-3;
    tc.cutoff = 32;

    auto m1 = fresh_adapted_model(cfg);
    auto m2 = fresh_adapted_model(cfg);
    const auto r1 = train(m1, corpus, tc);
    const auto r2 = train(m2, corpus, tc);

    REQUIRE(r1.curve.size() == r2.curve.size());
    for (size_t i = 0; i < r1.curve.size(); ++i) {
        CHECK(r1.curve[i].step == r2.curve[i].step);
        CHECK(r1.curve[i].loss == r2.curve[i].loss);  // bitwise
    }
    CHECK(snapshot_adapters(m1.params()) == snapshot_adapters(m2.params()));

    // A different shuffle seed gives a different trajectory.
    auto m3 = fresh_adapted_model(cfg);
    TrainConfig tc3 = tc;
    tc3.seed = tc.seed + 1;
    const auto r3 = train(m3, corpus, tc3);
    bool any_diff = snapshot_adapters(m3.params()) != snapshot_adapters(m1.params());
    for (size_t i = 0; i < std::min(r1.curve.size(), r3.curve.size()); ++i)
        any_diff = any_diff || r3.curve[i].loss != r1.curve[i].loss;
    CHECK(any_diff);
}

TEST_CASE("batch/accumulation split does not change the trajectory") {
    const ModelConfig cfg = tiny_config();
    const auto corpus = fake_corpus(61, 25, cfg.vocab_size);  // 24 + 1 trailing
    TrainConfig base;
    base.epochs = 2;
    base.learning_rate = 1e-3;
    base.cutoff = 32;

    auto run = [&](int batch, int accum) {
        auto model = fresh_adapted_model(cfg);
        TrainConfig tc = base;
        tc.batch_size = batch;
        tc.grad_accum = accum;
        const auto res = train(model, corpus, tc);
        return std::make_pair(snapshot_adapters(model.params()), res);
    };

    const auto [w_4x6, r_4x6] = run(4, 6);
    const auto [w_24x1, r_24x1] = run(24, 1);
    const auto [w_1x24, r_1x24] = run(1, 24);
    const auto [w_6x4, r_6x4] = run(6, 4);

    // One example at a time feeds the same pooled sums in the same order, so
    // every split of the same effective batch is bit-identical.
    CHECK(w_4x6 == w_24x1);
    CHECK(w_4x6 == w_1x24);
    CHECK(w_4x6 == w_6x4);
    REQUIRE(r_4x6.curve.size() == r_24x1.curve.size());
    for (size_t i = 0; i < r_4x6.curve.size(); ++i) {
        CHECK(r_4x6.curve[i].loss == r_24x1.curve[i].loss);
        CHECK(r_4x6.curve[i].loss == r_1x24.curve[i].loss);
    }
    // 25 examples per epoch, effective batch 24: full window + partial window.
    CHECK(r_4x6.optimizer_steps == 4);

    // Sanity: a different effective batch does change the trajectory.
    const auto [w_8x1, r_8x1] = run(8, 1);
    CHECK(w_8x1 != w_4x6);
}

TEST_CASE("one-window training equals a hand-rolled step") {
    const ModelConfig cfg = tiny_config();
    const auto corpus = fake_corpus(62, 1, cfg.vocab_size);
    TrainConfig tc;
    tc.batch_size = 1;
    tc.grad_accum = 1;
    tc.epochs = 1;
    tc.learning_rate = 1e-3;
    tc.cutoff = 32;

    auto trained = fresh_adapted_model(cfg);
    const auto res = train(trained, corpus, tc);
    REQUIRE(res.optimizer_steps == 1);

    // Replicate: backward, pool by count, unpool, AdamW — the same float ops.
    auto manual = fresh_adapted_model(cfg);
    const auto shifted = shift_for_next_token(corpus[0]);
    auto back = manual.backward(shifted.tokens, shifted.targets, shifted.mask);
    CHECK(res.curve[0].loss == back.loss);

    auto refs = trainable_tensors(manual.params());
    auto grefs = trainable_tensors(back.grads);
    AdamState<float> st = AdamState<float>::init(refs);
    const float scale = static_cast<float>(back.mask_count);
    const float inv = 1.0f / scale;
    for (size_t i = 0; i < refs.size(); ++i) {
        std::vector<float> g = *grefs[i].data;
        for (auto& x : g) x = x * scale * inv;
        adamw_step(std::span<float>(*refs[i].data), std::span<const float>(g), st.m[i], st.v[i],
                   1, tc);
    }
    CHECK(snapshot_adapters(trained.params()) == snapshot_adapters(manual.params()));
}

TEST_CASE("adapters train while the base stays bit-identical") {
    const ModelConfig cfg = tiny_config();
    const auto corpus = fake_corpus(63, 10, cfg.vocab_size);
    TrainConfig tc;
    tc.batch_size = 1;
    tc.grad_accum = 1;
    tc.epochs = 1;  // 10 optimizer steps
    tc.learning_rate = 1e-3;
    tc.cutoff = 32;

    auto model = fresh_adapted_model(cfg);
    const auto base_before = snapshot_base(model.params());
    const auto adapters_before = snapshot_adapters(model.params());
    const auto res = train(model, corpus, tc);
    CHECK(res.optimizer_steps == 10);
    CHECK(snapshot_base(model.params()) == base_before);      // frozen, bitwise
    CHECK(snapshot_adapters(model.params()) != adapters_before);  // actually moved
}

TEST_CASE("without adapters every base tensor trains") {
    const ModelConfig cfg = tiny_config();
    const auto corpus = fake_corpus(64, 4, cfg.vocab_size);
    TrainConfig tc;
    tc.batch_size = 4;
    tc.grad_accum = 1;
    tc.epochs = 1;
    tc.learning_rate = 1e-3;
    tc.cutoff = 32;

    auto model = Transformer<float>::init(cfg, 80);
    const auto before = snapshot_base(model.params());
    train(model, corpus, tc);
    const auto after = snapshot_base(model.params());
    REQUIRE(before.size() == after.size());
    for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] != after[i]);
}

TEST_CASE("loss curve bookkeeping") {
    const ModelConfig cfg = tiny_config();
    const auto corpus = fake_corpus(65, 7, cfg.vocab_size);
    TrainConfig tc;
    tc.batch_size = 2;
    tc.grad_accum = 1;
    tc.epochs = 2;
    tc.learning_rate = 1e-4;
    tc.cutoff = 32;

    auto model = fresh_adapted_model(cfg);
    std::ostringstream log;
    const auto res = train(model, corpus, tc, &log);
    // ceil(7/2) = 4 windows per epoch (3 full + 1 trailing), 2 epochs.
    CHECK(res.optimizer_steps == 8);
    REQUIRE(res.curve.size() == 8);
    for (size_t i = 0; i < res.curve.size(); ++i) {
        CHECK(res.curve[i].step == static_cast<int>(i) + 1);
        CHECK(std::isfinite(res.curve[i].loss));
        CHECK(res.curve[i].loss > 0.0);
    }
    CHECK(log.str().find("epoch 1/2 step 1 loss") != std::string::npos);
    CHECK(log.str().find("epoch 2/2 step 8 loss") != std::string::npos);
}

TEST_CASE("loss curve csv") {
    LossCurve curve = {{1, 5.5}, {2, 0.123456789}};
    const std::string csv = loss_curve_csv(curve);
    CHECK(csv == "step,loss\n1,5.5\n2,0.123456789\n");

    testutil::TempDir tmp("tmp_loss_curve");
    emit_loss_curve(curve, tmp.sub("loss.csv"));
    CHECK(read_file(tmp.sub("loss.csv")) == csv);
}

TEST_CASE("train input validation") {
    const ModelConfig cfg = tiny_config();
    auto model = fresh_adapted_model(cfg);
    TrainConfig tc;
    tc.cutoff = 32;

    SECTION("empty corpus") {
        CHECK_THROWS_WITH(train(model, {}, tc), Catch::Matchers::ContainsSubstring("empty"));
    }
    SECTION("example longer than the cutoff, with its index") {
        auto corpus = fake_corpus(66, 3, cfg.vocab_size);
        corpus[1].token_ids.assign(40, 1);
        corpus[1].loss_mask.assign(40, 1);
        tc.cutoff = 20;
        CHECK_THROWS_WITH(train(model, corpus, tc),
                          Catch::Matchers::ContainsSubstring("example 1"));
    }
    SECTION("example with no supervised positions, with its index") {
        auto corpus = fake_corpus(67, 2, cfg.vocab_size);
        std::fill(corpus[0].loss_mask.begin(), corpus[0].loss_mask.end(), 0);
        CHECK_THROWS_WITH(train(model, corpus, tc),
                          Catch::Matchers::ContainsSubstring("example 0"));
    }
    SECTION("bad config") {
        tc.epochs = 0;
        CHECK_THROWS_AS(train(model, fake_corpus(68, 2, cfg.vocab_size), tc),
                        std::invalid_argument);
    }
}

TEST_CASE("absurd learning rate degenerates to a numeric error") {
    const ModelConfig cfg = tiny_config();
    const auto corpus = fake_corpus(69, 4, cfg.vocab_size);
    TrainConfig tc;
    tc.batch_size = 1;
    tc.grad_accum = 1;
    tc.epochs = 3;
    tc.learning_rate = 1e30;  // guaranteed float overflow within a few steps
    tc.cutoff = 32;
    auto model = fresh_adapted_model(cfg);
    CHECK_THROWS_AS(train(model, corpus, tc), NumericError);
}

TEST_CASE("adapter dropout during training is seeded") {
    const ModelConfig cfg = tiny_config();
    const auto corpus = fake_corpus(70, 6, cfg.vocab_size);
    TrainConfig tc;
    tc.batch_size = 2;
    tc.grad_accum = 1;
    tc.epochs = 1;
    tc.learning_rate = 1e-3;
    tc.cutoff = 32;

    auto m1 = fresh_adapted_model(cfg, 0.5);
    auto m2 = fresh_adapted_model(cfg, 0.5);
    train(m1, corpus, tc);
    train(m2, corpus, tc);
    CHECK(snapshot_adapters(m1.params()) == snapshot_adapters(m2.params()));

    // Dropout noise comes from the train seed: a different seed, different
    // masks, different result (the shuffle changes too; both are fine).
    auto m3 = fresh_adapted_model(cfg, 0.5);
    TrainConfig tc2 = tc;
    tc2.seed = tc.seed + 100;
    train(m3, corpus, tc2);
    CHECK(snapshot_adapters(m3.params()) != snapshot_adapters(m1.params()));

    // And dropout actually changes the trajectory relative to none.
    auto m4 = fresh_adapted_model(cfg, 0.0);
    train(m4, corpus, tc);
    CHECK(snapshot_adapters(m4.params()) != snapshot_adapters(m1.params()));
}
