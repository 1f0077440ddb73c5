#include <cmath>
#include <cstdio>
#include <vector>

#include "doctest.h"
#include "smedit/serialize.hpp"
#include "smedit/toylm.hpp"

using namespace smedit;

namespace {

ToyConfig micro_config() {
    ToyConfig cfg;
    cfg.vocab = 6;
    cfg.dim = 4;
    cfg.n_blocks = 2;
    cfg.hidden_mult = 2;
    cfg.init_seed = 3;
    return cfg;
}

real_t gelu_ref(real_t x) {
    const real_t c = real_t(0.7978845608028654);
    const real_t t = c * (x + real_t(0.044715) * x * x * x);
    return real_t(0.5) * x * (real_t(1) + std::tanh(t));
}

}  // namespace

TEST_CASE("zero embedding gives uniform softmax at every position") {
    ToyConfig cfg = micro_config();
    ToyModel model(cfg);
    model.set_weight("embed", Matrix(cfg.vocab, cfg.dim));
    Matrix logits = model.forward({0, 1, 2});
    for (int r = 0; r < logits.rows(); ++r) {
        for (int v = 0; v < logits.cols(); ++v) {
            CHECK(logits.at(r, v) == 0);
        }
    }
    // uniform nll = ln(vocab)
    CHECK(nll_loss(logits, {1, 1, 1}, {1, 1, 1}) ==
          doctest::Approx(std::log(real_t(cfg.vocab))).epsilon(1e-12));
}

TEST_CASE("forward is deterministic bitwise") {
    ToyModel a(micro_config());
    ToyModel b(micro_config());
    Matrix la = a.forward({0, 3, 5, 1});
    Matrix lb = b.forward({0, 3, 5, 1});
    CHECK(bitwise_equal(la, lb));
    CHECK(la.all_finite());
}

TEST_CASE("out-of-vocab token is rejected") {
    ToyModel model(micro_config());
    CHECK_THROWS_AS(model.forward({0, 99}), Error);
}

TEST_CASE("single-block forward matches a hand-rolled computation") {
    ToyConfig cfg;
    cfg.vocab = 2;
    cfg.dim = 2;
    cfg.n_blocks = 1;
    cfg.hidden_mult = 2;
    cfg.init_seed = 11;
    ToyModel model(cfg);
    const TokenSeq tokens{1, 0};
    Matrix logits = model.forward(tokens);

    const Matrix& embed = model.weight("embed");
    const Matrix& fc_in = model.weight("blocks.0.fc_in");
    const Matrix& fc_out = model.weight("blocks.0.fc_out");
    // causal mean pooling over the two token embeddings
    std::vector<std::vector<real_t>> h(2, std::vector<real_t>(2));
    for (int j = 0; j < 2; ++j) {
        h[0][static_cast<std::size_t>(j)] = embed.at(1, j);
        h[1][static_cast<std::size_t>(j)] = (embed.at(1, j) + embed.at(0, j)) / 2;
    }
    for (int r = 0; r < 2; ++r) {
        // block: fc_in -> gelu -> fc_out, residual add
        std::vector<real_t> mid(4);
        for (int i = 0; i < 4; ++i) {
            real_t acc = 0;
            for (int j = 0; j < 2; ++j) acc += fc_in.at(i, j) * h[r][static_cast<std::size_t>(j)];
            mid[static_cast<std::size_t>(i)] = gelu_ref(acc);
        }
        std::vector<real_t> out(2);
        for (int j = 0; j < 2; ++j) {
            real_t acc = 0;
            for (int i = 0; i < 4; ++i) acc += fc_out.at(j, i) * mid[static_cast<std::size_t>(i)];
            out[static_cast<std::size_t>(j)] = h[r][static_cast<std::size_t>(j)] + acc;
        }
        for (int v = 0; v < 2; ++v) {
            real_t logit = 0;
            for (int j = 0; j < 2; ++j) logit += out[static_cast<std::size_t>(j)] * embed.at(v, j);
            CHECK(std::abs(logits.at(r, v) - logit) < 1e-12);
        }
    }
}

TEST_CASE("nll loss hand cases") {
    // one-hot-certain logits: target logit 20 above the rest
    Matrix certain(1, 4);
    certain.at(0, 2) = 20;
    CHECK(nll_loss(certain, {2}, {1}) < 1e-6);
    CHECK(nll_loss(certain, {2}, {1}) >= 0);

    // random 3-position case vs independent per-position softmax
    Matrix logits = Matrix::from_rows({{0.2, -0.4, 1.0, 0.0},
                                       {-1.0, 2.0, 0.3, 0.1},
                                       {0.0, 0.0, 0.5, -0.5}});
    std::vector<int> targets{2, 1, 0};
    real_t expected = 0;
    for (int r = 0; r < 3; ++r) {
        real_t denom = 0;
        for (int v = 0; v < 4; ++v) denom += std::exp(logits.at(r, v));
        expected += -std::log(std::exp(logits.at(r, targets[static_cast<std::size_t>(r)])) / denom);
    }
    expected /= 3;
    CHECK(nll_loss(logits, targets, {1, 1, 1}) == doctest::Approx(expected).epsilon(1e-10));

    CHECK_THROWS_AS(nll_loss(logits, targets, {0, 0, 0}), Error);
}

TEST_CASE("snapshot and restore round trip bitwise") {
    ToyModel model(micro_config());
    const TokenSeq probe{2, 4, 1};
    Matrix before = model.forward(probe);
    WeightSnapshot snap = model.snapshot();
    WeightSnapshot snap2 = model.snapshot();
    for (const auto& [name, w] : snap.weights) {
        CHECK(bitwise_equal(w, snap2.weights.at(name)));
    }

    // edit an editable layer
    Matrix edited = model.weight("blocks.0.fc_in");
    edited.at(0, 0) += real_t(0.5);
    model.set_weight("blocks.0.fc_in", edited);
    CHECK_FALSE(bitwise_equal(model.forward(probe), before));

    model.restore(snap);
    CHECK(bitwise_equal(model.forward(probe), before));

    WeightSnapshot bad;
    bad.weights.emplace("nope", Matrix(2, 2));
    CHECK_THROWS_AS(model.restore(bad), Error);
}

TEST_CASE("repeated edits accumulate weight drift") {
    ToyModel model(micro_config());
    WeightSnapshot w0 = model.snapshot();
    for (int i = 0; i < 5; ++i) {
        Matrix w = model.weight("blocks.1.fc_in");
        w.at(i % w.rows(), 0) += real_t(0.1);
        model.set_weight("blocks.1.fc_in", w);
    }
    real_t drift = 0;
    for (const auto& [name, w] : w0.weights) {
        drift += squared_frobenius(sub(model.weight(name), w));
    }
    CHECK(drift > 0);
}

TEST_CASE("argmax decode: uniform model ties break to lowest token id") {
    ToyConfig cfg = micro_config();
    ToyModel model(cfg);
    model.set_weight("embed", Matrix(cfg.vocab, cfg.dim));
    TokenSeq decoded = model.argmax_decode({1, 2}, 3);
    CHECK(decoded == TokenSeq{0, 0, 0});
    // deterministic
    CHECK(model.argmax_decode({1, 2}, 3) == decoded);
}

TEST_CASE("a model fine-tuned on one fact decodes that fact") {
    ToyConfig cfg = micro_config();
    ToyModel model(cfg);
    std::vector<PromptAnswer> facts{{{1, 2}, {5}}};
    PretrainOptions opts;
    opts.lr = 1e-2;
    opts.max_epochs = 500;
    PretrainResult res = pretrain_model(model, facts, opts);
    REQUIRE(res.converged);
    CHECK(model.argmax_decode({1, 2}, 1) == TokenSeq{5});
    CHECK(fraction_exact(model, facts) == doctest::Approx(1.0));
}

TEST_CASE("model checkpoint round trips losslessly") {
    ToyModel model(micro_config());
    const std::string path = "toylm_checkpoint_test.json";
    save_model(model, path);
    ToyModel loaded = load_model(path);
    CHECK(bitwise_equal(loaded.forward({0, 1, 2}), model.forward({0, 1, 2})));
    for (const auto& [name, w] : model.weights()) {
        CHECK(bitwise_equal(loaded.weight(name), w));
    }
    CHECK(loaded.editable_set() == model.editable_set());

    // corrupt file is rejected without partial state
    write_text_file(path, "{\"schema\": \"smedit.model.v1\", \"config\": {}");
    CHECK_THROWS_AS(load_model(path), Error);
    std::remove(path.c_str());
}
