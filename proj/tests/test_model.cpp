#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "poslab/checkpoint.hpp"
#include "poslab/corpus.hpp"
#include "poslab/model.hpp"
#include "poslab/rng.hpp"
#include "poslab/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

using namespace poslab;

namespace {

ModelConfig tiny_config(PosScheme scheme = PosScheme::rope) {
    ModelConfig c;
    c.vocab_size = 64;
    c.d_model = 32;
    c.n_layers = 2;
    c.n_heads = 2;
    c.max_positions = 256;
    c.scheme = scheme;
    c.n_classes = 4;
    return c;
}

std::vector<int> random_tokens(int n, Rng& rng, int vocab = 64) {
    std::vector<int> out;
    for (int i = 0; i < n; ++i) out.push_back(rng.uniform_int(3, vocab - 1));
    return out;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

} // namespace

TEST_CASE("rope: zero positions are the identity") {
    Rng rng(1);
    auto x = Tensor<float>::zeros({5, 8});
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    auto y = rope_rotate(x, std::vector<int>(5, 0));
    CHECK(max_abs_diff(x.data(), y.data()) == 0.0);
}

TEST_CASE("rope preserves row norms") {
    Rng rng(2);
    auto x = Tensor<float>::zeros({6, 16});
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    std::vector<int> pos = {0, 7, 100, 3, 900, 41};
    auto y = rope_rotate(x, pos);
    for (int r = 0; r < 6; ++r) {
        double nx = 0.0, ny = 0.0;
        for (int c = 0; c < 16; ++c) {
            nx += static_cast<double>(x.data()[r * 16 + c]) * x.data()[r * 16 + c];
            ny += static_cast<double>(y.data()[r * 16 + c]) * y.data()[r * 16 + c];
        }
        CHECK(std::abs(std::sqrt(nx) - std::sqrt(ny)) <= 1e-5);
    }
    CHECK_THROWS_AS(rope_rotate(Tensor<float>::zeros({2, 3}), std::vector<int>{0, 1}), std::invalid_argument);
}

TEST_CASE("rope dot products depend only on relative position") {
    Rng rng(3);
    auto q = Tensor<float>::zeros({1, 16});
    auto k = Tensor<float>::zeros({1, 16});
    for (auto& v : q.data()) v = static_cast<float>(rng.normal());
    for (auto& v : k.data()) v = static_cast<float>(rng.normal());
    auto dot_at = [&](int pq, int pk) {
        auto qr = rope_rotate(q, {pq});
        auto kr = rope_rotate(k, {pk});
        double acc = 0.0;
        for (int c = 0; c < 16; ++c) acc += static_cast<double>(qr.data()[c]) * kr.data()[c];
        return acc;
    };
    CHECK(std::abs(dot_at(5, 3) - dot_at(105, 103)) <= 1e-4);
    CHECK(std::abs(dot_at(9, 2) - dot_at(509, 502)) <= 1e-4);
}

TEST_CASE("attention: single token equals value projection path") {
    ModelF model(tiny_config(), 99);
    ForwardRequest<float> req;
    req.lm_all = true;
    auto out = model.forward({5}, req);
    CHECK(out.lm_logits.dim(0) == 1);
    for (float v : out.lm_logits.data()) CHECK(std::isfinite(v));
}

TEST_CASE("appending mask-0 tokens leaves real-token logits unchanged") {
    ModelF model(tiny_config(), 7);
    Rng rng(17);
    const auto tokens = random_tokens(12, rng);
    ForwardRequest<float> req;
    req.lm_all = true;
    req.want_class = true;
    auto base = model.forward(tokens, req);

    auto padded = tokens;
    padded.insert(padded.end(), 5, 0);
    AttentionMask mask = all_attended(12);
    mask.insert(mask.end(), 5, 0);
    auto out = model.forward(padded, mask, PositionOverride::standard(), req);

    // class head reads the last attended token, so logits must agree exactly
    CHECK(max_abs_diff(base.class_logits.data(), out.class_logits.data()) <= 1e-5);
    std::vector<float> real_rows(out.lm_logits.data().begin(), out.lm_logits.data().begin() + 12 * 64);
    CHECK(max_abs_diff(base.lm_logits.data(), real_rows) <= 1e-5);
}

TEST_CASE("scheme=none is permutation equivariant") {
    ModelF model(tiny_config(PosScheme::none), 21);
    Rng rng(5);
    const auto tokens = random_tokens(9, rng);
    std::vector<int> perm = {3, 1, 4, 0, 8, 6, 7, 2, 5};
    std::vector<int> permuted(9);
    for (int i = 0; i < 9; ++i) permuted[static_cast<size_t>(i)] = tokens[static_cast<size_t>(perm[i])];

    // bag-of-tokens forward: full bidirectional visibility within the bag is
    // not available, so compare the last token's logits with the last token
    // fixed and the rest permuted
    std::vector<int> prefix_perm(perm.begin(), perm.end() - 1);
    std::vector<int> shuffled = tokens;
    for (size_t i = 0; i + 1 < shuffled.size(); ++i) shuffled[i] = tokens[static_cast<size_t>(prefix_perm[i])];
    ForwardRequest<float> req;
    req.want_class = true;
    auto a = model.forward(tokens, req);
    auto b = model.forward(shuffled, req);
    CHECK(max_abs_diff(a.class_logits.data(), b.class_logits.data()) <= 1e-5);
}

TEST_CASE("forward is deterministic and zero class head gives uniform logits") {
    ModelF model(tiny_config(), 31);
    Rng rng(6);
    const auto tokens = random_tokens(20, rng);
    ForwardRequest<float> req;
    req.want_class = true;
    req.lm_all = true;
    auto a = model.forward(tokens, req);
    auto b = model.forward(tokens, req);
    CHECK(a.lm_logits.data() == b.lm_logits.data()); // bit identical
    // untrained class head is zero-initialized -> uniform class logits
    for (float v : a.class_logits.data()) CHECK(v == 0.0f);
    CHECK(a.hidden_last.size() == 3); // embedding + 2 blocks
}

TEST_CASE("rope logits are invariant under uniform position shifts") {
    ModelF model(tiny_config(), 41);
    Rng rng(8);
    const auto tokens = random_tokens(24, rng);
    ForwardRequest<float> req;
    req.want_class = true;
    req.lm_rows = {23};
    auto base = model.forward(tokens, all_attended(24), PositionOverride::standard(), req);
    for (int offset : {40, 80, 200}) {
        auto shifted = model.forward(tokens, all_attended(24), PositionOverride::shift(offset), req);
        CHECK(max_abs_diff(base.class_logits.data(), shifted.class_logits.data()) <= 1e-4);
        CHECK(max_abs_diff(base.lm_logits.data(), shifted.lm_logits.data()) <= 1e-4);
    }
    // absolute scheme has no such invariance guarantee; just confirm the
    // override machinery accepts the same inputs
    ModelF abs_model(tiny_config(PosScheme::absolute_learned), 41);
    auto a = abs_model.forward(tokens, all_attended(24), PositionOverride::standard(), req);
    auto s = abs_model.forward(tokens, all_attended(24), PositionOverride::shift(40), req);
    CHECK(a.class_logits.data().size() == s.class_logits.data().size());
}

TEST_CASE("position override expansion: shift, stride, explicit, bounds") {
    auto ids = PositionOverride::stride(3).expand(5, 256);
    CHECK(ids == std::vector<int>({0, 3, 6, 9, 12}));
    CHECK(ids.back() == (5 - 1) * 3); // max relative position is exactly (T-1)*k
    CHECK(PositionOverride::shift(10).expand(3, 256) == std::vector<int>({10, 11, 12}));
    CHECK_THROWS_AS(PositionOverride::stride(100).expand(5, 256), std::out_of_range);
    CHECK_THROWS_AS(PositionOverride::shift(255).expand(3, 256), std::out_of_range);
    CHECK_THROWS_AS(PositionOverride::explicit_list({1, 2}).expand(3, 256), std::invalid_argument);
}

TEST_CASE("masked class-head token is rejected") {
    ModelF model(tiny_config(), 3);
    AttentionMask mask = {1, 1, 0};
    ForwardRequest<float> req;
    req.want_class = true;
    // last attended is index 1; fine
    CHECK_NOTHROW(model.forward({5, 6, 7}, mask, PositionOverride::standard(), req));
    AttentionMask none(3, 0);
    CHECK_THROWS_AS(model.forward({5, 6, 7}, none, PositionOverride::standard(), req), std::invalid_argument);
}

TEST_CASE("lora: zero-init identity, parameter count, merge identity") {
    ModelF base(tiny_config(), 77);
    ModelF adapted = base.clone();
    adapted.apply_lora(4);
    Rng rng(9);
    const auto tokens = random_tokens(15, rng);
    ForwardRequest<float> req;
    req.want_class = true;
    req.lm_all = true;
    auto a = base.forward(tokens, req);
    auto b = adapted.forward(tokens, req);
    CHECK(max_abs_diff(a.lm_logits.data(), b.lm_logits.data()) <= 1e-6);

    // r * (d_in + d_out) per adapted matrix (q and v per layer) + heads
    const int d = 32, r = 4, layers = 2;
    const size_t expect_adapters = static_cast<size_t>(layers) * 2 * (r * (d + d));
    const size_t heads = static_cast<size_t>(d) * 64 + 64 + d * 4 + 4; // lm head + class head
    CHECK(adapted.trainable_param_count() == expect_adapters + heads);
    CHECK_THROWS_AS(base.clone().apply_lora(64 + 1), std::invalid_argument);

    // perturb adapters, then merging must preserve the function
    for (auto& p : adapted.trainable_parameters())
        if (p.name.find("lora") != std::string::npos)
            for (auto& v : p.tensor.data()) v += 0.01f;
    auto before = adapted.forward(tokens, req);
    ModelF merged = adapted.clone();
    merged.merge_lora();
    CHECK(!merged.has_lora());
    auto after = merged.forward(tokens, req);
    CHECK(max_abs_diff(before.lm_logits.data(), after.lm_logits.data()) <= 1e-5);
}

TEST_CASE("checkpoint round trip is bit exact") {
    ModelF model(tiny_config(), 123);
    const std::string path = std::filesystem::temp_directory_path() / "poslab_ckpt_test.bin";
    save_model(model, path);
    ModelF loaded = load_model(path);
    auto pa = model.parameters();
    auto pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].name == pb[i].name);
        CHECK(pa[i].tensor.data() == pb[i].tensor.data()); // exact bytes
    }
    std::filesystem::remove(path);
}

TEST_CASE("generate: max_new=0, determinism, echo training") {
    ModelConfig cfg = tiny_config();
    cfg.vocab_size = 32;
    ModelF model(cfg, 11);
    const std::vector<int> prefix = {1, 9, 12, 15};
    CHECK(model.generate(prefix, 0, vocab::EOS) == prefix);
    CHECK(model.generate(prefix, 6, vocab::EOS) == model.generate(prefix, 6, vocab::EOS));
    CHECK_THROWS_AS(model.generate({}, 3, vocab::EOS), std::invalid_argument);

    // tiny echo task: [BOS a b c ASSIST] -> [a b c EOS]
    MixedDataset data;
    Rng rng(13);
    for (int i = 0; i < 300; ++i) {
        Example e;
        e.input = {vocab::BOS};
        for (int j = 0; j < 3; ++j) e.input.push_back(rng.uniform_int(16, 29));
        e.input.push_back(vocab::ASSIST);
        e.target.assign(e.input.begin() + 1, e.input.end() - 1);
        e.target.push_back(vocab::EOS);
        data.add(std::move(e));
    }
    TrainConfig tc;
    tc.epochs = 14;
    tc.lr = 3e-3;
    tc.seed = 5;
    tc.loss = TrainConfig::LossTarget::lm_head;
    train(model, data, tc);
    const std::vector<int> probe = {vocab::BOS, 17, 22, 25, vocab::ASSIST};
    const auto outsq = model.generate(probe, 5, vocab::EOS);
    REQUIRE(outsq.size() >= probe.size() + 3);
    CHECK(outsq[5] == 17);
    CHECK(outsq[6] == 22);
    CHECK(outsq[7] == 25);
}
