#pragma once

#include "poslab/ops.hpp"
#include "poslab/rng.hpp"
#include "poslab/tensor.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace poslab {

enum class PosScheme { rope, absolute_learned, none };

inline const char* to_string(PosScheme s) {
    switch (s) {
        case PosScheme::rope: return "rope";
        case PosScheme::absolute_learned: return "absolute_learned";
        case PosScheme::none: return "none";
    }
    return "?";
}
inline PosScheme pos_scheme_from_string(const std::string& s) {
    if (s == "rope") return PosScheme::rope;
    if (s == "absolute_learned") return PosScheme::absolute_learned;
    if (s == "none") return PosScheme::none;
    throw std::invalid_argument("unknown positional scheme: " + s);
}

struct ModelConfig {
    int vocab_size = 256;
    int d_model = 128;
    int n_layers = 4;
    int n_heads = 4;
    int max_positions = 1024;
    PosScheme scheme = PosScheme::rope;
    double rope_base = 10000.0;
    int n_classes = 4; // 0 disables the class head

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || vocab_size <= 0 || max_positions <= 0)
            throw std::invalid_argument("model config: nonpositive size");
        if (d_model % n_heads != 0) throw std::invalid_argument("model config: d_model % n_heads != 0");
        if (scheme == PosScheme::rope && d_head() % 2 != 0)
            throw std::invalid_argument("model config: rope requires even d_head");
    }
};

// Replaces the default position indices 0..T-1 fed to the positional
// mechanism.
struct PositionOverride {
    enum class Mode { standard, shift, stride, explicit_ids };
    Mode mode = Mode::standard;
    int offset = 0;
    int stride_k = 1;
    std::vector<int> ids;

    static PositionOverride standard() { return {}; }
    static PositionOverride shift(int offset) {
        if (offset < 0) throw std::invalid_argument("position shift must be nonnegative");
        PositionOverride p;
        p.mode = Mode::shift;
        p.offset = offset;
        return p;
    }
    static PositionOverride stride(int k) {
        if (k < 1) throw std::invalid_argument("position stride must be positive");
        PositionOverride p;
        p.mode = Mode::stride;
        p.stride_k = k;
        return p;
    }
    static PositionOverride explicit_list(std::vector<int> ids) {
        PositionOverride p;
        p.mode = Mode::explicit_ids;
        p.ids = std::move(ids);
        return p;
    }

    std::vector<int> expand(int seq_len, int max_positions) const {
        std::vector<int> out(static_cast<size_t>(seq_len));
        switch (mode) {
            case Mode::standard:
                for (int t = 0; t < seq_len; ++t) out[t] = t;
                break;
            case Mode::shift:
                for (int t = 0; t < seq_len; ++t) out[t] = t + offset;
                break;
            case Mode::stride:
                for (int t = 0; t < seq_len; ++t) out[t] = t * stride_k;
                break;
            case Mode::explicit_ids:
                if (static_cast<int>(ids.size()) != seq_len)
                    throw std::invalid_argument("explicit position ids: length mismatch");
                out = ids;
                break;
        }
        for (int p : out)
            if (p < 0 || p >= max_positions) throw std::out_of_range("position id exceeds max_positions");
        return out;
    }
};

// per-token attend bit; 1 = attended, 0 = ignored
using AttentionMask = std::vector<uint8_t>;

inline AttentionMask all_attended(int seq_len) { return AttentionMask(static_cast<size_t>(seq_len), 1); }

template <typename S>
struct NamedParam {
    std::string name;
    Tensor<S> tensor;
};

template <typename S>
struct ForwardRequest {
    std::vector<int> lm_rows; // rows to compute next-token logits for
    bool lm_all = false;
    bool want_class = false;
};

template <typename S>
struct ForwardOutput {
    Tensor<S> lm_logits;    // [R x V] for the requested rows
    Tensor<S> class_logits; // [1 x n_classes]
    std::vector<std::vector<S>> hidden_last; // n_layers+1 snapshots of the last attended token
    int last_attended = -1;
};

template <typename S>
class Model {
  public:
    struct LoraPair {
        Tensor<S> B; // [d_in x r], zero-initialized
        Tensor<S> A; // [r x d_out]
    };

    Model() = default;

    Model(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const int d = cfg_.d_model;
        auto normal2d = [&](int r, int c) {
            Tensor<S> t = Tensor<S>::zeros({r, c}, true);
            for (auto& v : t.data()) v = static_cast<S>(rng.normal(0.0, 0.02));
            return t;
        };
        auto zeros1d = [&](int nelem) { return Tensor<S>::zeros({nelem}, true); };
        auto ones1d = [&](int nelem) { return Tensor<S>::filled({nelem}, S(1), true); };

        tok_embed_ = normal2d(cfg_.vocab_size, d);
        if (cfg_.scheme == PosScheme::absolute_learned) pos_embed_ = normal2d(cfg_.max_positions, d);
        layers_.resize(static_cast<size_t>(cfg_.n_layers));
        for (auto& L : layers_) {
            L.attn_norm_g = ones1d(d);
            L.wq = normal2d(d, d);
            L.bq = zeros1d(d);
            L.wk = normal2d(d, d);
            L.bk = zeros1d(d);
            L.wv = normal2d(d, d);
            L.bv = zeros1d(d);
            L.wo = normal2d(d, d);
            L.bo = zeros1d(d);
            L.mlp_norm_g = ones1d(d);
            L.w1 = normal2d(d, 4 * d);
            L.b1 = zeros1d(4 * d);
            L.w2 = normal2d(4 * d, d);
            L.b2 = zeros1d(d);
        }
        final_norm_g_ = ones1d(d);
        lm_w_ = normal2d(d, cfg_.vocab_size);
        lm_b_ = zeros1d(cfg_.vocab_size);
        if (cfg_.n_classes > 0) {
            cls_w_ = Tensor<S>::zeros({d, cfg_.n_classes}, true);
            cls_b_ = zeros1d(cfg_.n_classes);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    bool has_lora() const { return lora_rank_ > 0; }
    int lora_rank() const { return lora_rank_; }
    double lora_alpha() const { return lora_alpha_; }

    // ---- parameter access ----

    std::vector<NamedParam<S>> parameters() {
        std::vector<NamedParam<S>> out;
        out.push_back({"tok_embed", tok_embed_});
        if (pos_embed_.defined()) out.push_back({"pos_embed", pos_embed_});
        for (size_t i = 0; i < layers_.size(); ++i) {
            auto& L = layers_[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            out.push_back({p + "attn_norm_g", L.attn_norm_g});
            out.push_back({p + "wq", L.wq});
            out.push_back({p + "bq", L.bq});
            out.push_back({p + "wk", L.wk});
            out.push_back({p + "bk", L.bk});
            out.push_back({p + "wv", L.wv});
            out.push_back({p + "bv", L.bv});
            out.push_back({p + "wo", L.wo});
            out.push_back({p + "bo", L.bo});
            out.push_back({p + "mlp_norm_g", L.mlp_norm_g});
            out.push_back({p + "w1", L.w1});
            out.push_back({p + "b1", L.b1});
            out.push_back({p + "w2", L.w2});
            out.push_back({p + "b2", L.b2});
            if (has_lora()) {
                out.push_back({p + "wq.lora_B", L.lora_q->B});
                out.push_back({p + "wq.lora_A", L.lora_q->A});
                out.push_back({p + "wv.lora_B", L.lora_v->B});
                out.push_back({p + "wv.lora_A", L.lora_v->A});
            }
        }
        out.push_back({"final_norm_g", final_norm_g_});
        out.push_back({"lm_w", lm_w_});
        out.push_back({"lm_b", lm_b_});
        if (cls_w_.defined()) {
            out.push_back({"cls_w", cls_w_});
            out.push_back({"cls_b", cls_b_});
        }
        return out;
    }

    // In adapter mode only the low-rank factors and the output heads train.
    std::vector<NamedParam<S>> trainable_parameters() {
        if (!has_lora()) return parameters();
        std::vector<NamedParam<S>> out;
        for (size_t i = 0; i < layers_.size(); ++i) {
            auto& L = layers_[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            out.push_back({p + "wq.lora_B", L.lora_q->B});
            out.push_back({p + "wq.lora_A", L.lora_q->A});
            out.push_back({p + "wv.lora_B", L.lora_v->B});
            out.push_back({p + "wv.lora_A", L.lora_v->A});
        }
        out.push_back({"lm_w", lm_w_});
        out.push_back({"lm_b", lm_b_});
        if (cls_w_.defined()) {
            out.push_back({"cls_w", cls_w_});
            out.push_back({"cls_b", cls_b_});
        }
        return out;
    }

    size_t trainable_param_count() {
        size_t n = 0;
        for (auto& p : trainable_parameters()) n += p.tensor.numel();
        return n;
    }

    // ---- LoRA ----

    void apply_lora(int rank, double alpha = 0.0, uint64_t seed = 7) {
        if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
        if (rank > cfg_.d_model) throw std::invalid_argument("lora rank exceeds weight dimension");
        if (has_lora()) throw std::logic_error("lora already applied");
        lora_rank_ = rank;
        lora_alpha_ = alpha > 0.0 ? alpha : 2.0 * rank;
        Rng rng(seed);
        for (auto& L : layers_) {
            auto make_pair = [&]() {
                LoraPair pr;
                pr.B = Tensor<S>::zeros({cfg_.d_model, rank}, true);
                pr.A = Tensor<S>::zeros({rank, cfg_.d_model}, true);
                for (auto& v : pr.A.data()) v = static_cast<S>(rng.normal(0.0, 0.02));
                return pr;
            };
            L.lora_q = make_pair();
            L.lora_v = make_pair();
        }
    }

    // folds (alpha/r) * B * A into the base weights and drops the adapters
    void merge_lora() {
        if (!has_lora()) throw std::logic_error("merge_lora: no adapters");
        const S sc = static_cast<S>(lora_alpha_ / lora_rank_);
        for (auto& L : layers_) {
            fold_adapter(L.wq, *L.lora_q, sc);
            fold_adapter(L.wv, *L.lora_v, sc);
            L.lora_q.reset();
            L.lora_v.reset();
        }
        lora_rank_ = 0;
        lora_alpha_ = 0.0;
    }

    // ---- forward ----

    ForwardOutput<S> forward(const std::vector<int>& tokens, const AttentionMask& mask,
                             const PositionOverride& pos, const ForwardRequest<S>& req) {
        if (tokens.empty()) throw std::invalid_argument("forward: empty input");
        if (mask.size() != tokens.size()) throw std::invalid_argument("forward: mask length mismatch");
        const auto pos_ids = pos.expand(static_cast<int>(tokens.size()), cfg_.max_positions);
        Tensor<S> h = embedding(tok_embed_, tokens);
        if (cfg_.scheme == PosScheme::absolute_learned) h = add(h, embedding(pos_embed_, pos_ids));
        return run_blocks(h, mask, pos_ids, req);
    }

    ForwardOutput<S> forward(const std::vector<int>& tokens, const ForwardRequest<S>& req) {
        return forward(tokens, all_attended(static_cast<int>(tokens.size())), PositionOverride::standard(), req);
    }

    // Entry point for attribution: the caller owns the embedded input (a
    // leaf tensor, typically with requires_grad) and positions are the
    // defaults. Absolute position embeddings, when configured, are added on
    // top of the supplied embeddings.
    ForwardOutput<S> forward_from_embeddings(const Tensor<S>& embedded, const AttentionMask& mask,
                                             const ForwardRequest<S>& req) {
        const int T = embedded.dim(0);
        if (static_cast<size_t>(T) != mask.size()) throw std::invalid_argument("forward: mask length mismatch");
        const auto pos_ids = PositionOverride::standard().expand(T, cfg_.max_positions);
        Tensor<S> h = embedded;
        if (cfg_.scheme == PosScheme::absolute_learned) h = add(h, embedding(pos_embed_, pos_ids));
        return run_blocks(h, mask, pos_ids, req);
    }

    Tensor<S> embed_tokens(const std::vector<int>& tokens) { return embedding(tok_embed_, tokens); }

    int predict_class(const std::vector<int>& tokens) {
        ForwardRequest<S> req;
        req.want_class = true;
        auto out = forward(tokens, req);
        const auto& lg = out.class_logits.data();
        return static_cast<int>(std::max_element(lg.begin(), lg.end()) - lg.begin());
    }

    std::vector<double> class_probs(const std::vector<int>& tokens) {
        ForwardRequest<S> req;
        req.want_class = true;
        auto out = forward(tokens, req);
        const auto& lg = out.class_logits.data();
        double mx = *std::max_element(lg.begin(), lg.end());
        std::vector<double> p(lg.size());
        double denom = 0.0;
        for (size_t i = 0; i < lg.size(); ++i) {
            p[i] = std::exp(static_cast<double>(lg[i]) - mx);
            denom += p[i];
        }
        for (auto& v : p) v /= denom;
        return p;
    }

    // greedy continuation; stops after emitting EOS or max_new tokens
    std::vector<int> generate(const std::vector<int>& prefix, int max_new, int eos_id) {
        if (prefix.empty()) throw std::invalid_argument("generate: empty prefix");
        std::vector<int> seq = prefix;
        for (int i = 0; i < max_new; ++i) {
            ForwardRequest<S> req;
            req.lm_rows = {static_cast<int>(seq.size()) - 1};
            auto out = forward(seq, req);
            const auto& row = out.lm_logits.data();
            const int next = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            seq.push_back(next);
            if (next == eos_id) break;
        }
        return seq;
    }

    Model<S> clone() const {
        Model<S> m;
        m.cfg_ = cfg_;
        m.lora_rank_ = lora_rank_;
        m.lora_alpha_ = lora_alpha_;
        auto copy_tensor = [](const Tensor<S>& t) {
            if (!t.defined()) return Tensor<S>();
            return Tensor<S>::from_data(t.shape(), t.data(), t.requires_grad());
        };
        m.tok_embed_ = copy_tensor(tok_embed_);
        m.pos_embed_ = copy_tensor(pos_embed_);
        m.final_norm_g_ = copy_tensor(final_norm_g_);
        m.lm_w_ = copy_tensor(lm_w_);
        m.lm_b_ = copy_tensor(lm_b_);
        m.cls_w_ = copy_tensor(cls_w_);
        m.cls_b_ = copy_tensor(cls_b_);
        m.layers_.resize(layers_.size());
        for (size_t i = 0; i < layers_.size(); ++i) {
            const auto& Lsrc = layers_[i];
            auto& L = m.layers_[i];
            L.attn_norm_g = copy_tensor(Lsrc.attn_norm_g);
            L.wq = copy_tensor(Lsrc.wq);
            L.bq = copy_tensor(Lsrc.bq);
            L.wk = copy_tensor(Lsrc.wk);
            L.bk = copy_tensor(Lsrc.bk);
            L.wv = copy_tensor(Lsrc.wv);
            L.bv = copy_tensor(Lsrc.bv);
            L.wo = copy_tensor(Lsrc.wo);
            L.bo = copy_tensor(Lsrc.bo);
            L.mlp_norm_g = copy_tensor(Lsrc.mlp_norm_g);
            L.w1 = copy_tensor(Lsrc.w1);
            L.b1 = copy_tensor(Lsrc.b1);
            L.w2 = copy_tensor(Lsrc.w2);
            L.b2 = copy_tensor(Lsrc.b2);
            if (Lsrc.lora_q) L.lora_q = typename Model<S>::LoraPair{copy_tensor(Lsrc.lora_q->B), copy_tensor(Lsrc.lora_q->A)};
            if (Lsrc.lora_v) L.lora_v = typename Model<S>::LoraPair{copy_tensor(Lsrc.lora_v->B), copy_tensor(Lsrc.lora_v->A)};
        }
        return m;
    }

  private:
    struct Layer {
        Tensor<S> attn_norm_g;
        Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<S> mlp_norm_g;
        Tensor<S> w1, b1, w2, b2;
        std::optional<LoraPair> lora_q, lora_v;
    };

    static void fold_adapter(Tensor<S>& w, const LoraPair& pr, S sc) {
        const int d_in = pr.B.dim(0), r = pr.B.dim(1), d_out = pr.A.dim(1);
        std::vector<S> delta(static_cast<size_t>(d_in) * d_out, S(0));
        detail::gemm_nn(pr.B.data().data(), pr.A.data().data(), delta.data(), d_in, r, d_out, false);
        for (size_t i = 0; i < delta.size(); ++i) w.data()[i] += sc * delta[i];
    }

    Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b,
                     const std::optional<LoraPair>& adapter) {
        Tensor<S> y = add_bias(matmul(x, w), b);
        if (adapter) {
            const S sc = static_cast<S>(lora_alpha_ / lora_rank_);
            y = add(y, scale(matmul(matmul(x, adapter->B), adapter->A), sc));
        }
        return y;
    }

    ForwardOutput<S> run_blocks(Tensor<S> h, const AttentionMask& mask, const std::vector<int>& pos_ids,
                                const ForwardRequest<S>& req) {
        const int T = h.dim(0);
        int last = -1;
        for (int t = T - 1; t >= 0; --t)
            if (mask[t]) {
                last = t;
                break;
            }
        if (last < 0) throw std::invalid_argument("forward: mask has no attended token");

        ForwardOutput<S> out;
        out.last_attended = last;
        auto snapshot = [&](const Tensor<S>& x) {
            std::vector<S> row(static_cast<size_t>(cfg_.d_model));
            std::copy_n(x.data().data() + static_cast<size_t>(last) * cfg_.d_model, cfg_.d_model, row.data());
            out.hidden_last.push_back(std::move(row));
        };
        snapshot(h);

        const bool use_rope = cfg_.scheme == PosScheme::rope;
        for (auto& L : layers_) {
            Tensor<S> a = rmsnorm_rows(h, L.attn_norm_g);
            Tensor<S> q = linear(a, L.wq, L.bq, L.lora_q);
            Tensor<S> k = linear(a, L.wk, L.bk, std::nullopt);
            Tensor<S> v = linear(a, L.wv, L.bv, L.lora_v);
            Tensor<S> att = causal_attention(q, k, v, mask, pos_ids, cfg_.n_heads, use_rope, cfg_.rope_base);
            h = add(h, linear(att, L.wo, L.bo, std::nullopt));
            Tensor<S> m = rmsnorm_rows(h, L.mlp_norm_g);
            Tensor<S> f1 = add_bias(matmul(m, L.w1), L.b1);
            Tensor<S> f2 = gelu(f1);
            h = add(h, add_bias(matmul(f2, L.w2), L.b2));
            snapshot(h);
        }

        Tensor<S> hf = rmsnorm_rows(h, final_norm_g_);
        if (req.lm_all) {
            out.lm_logits = add_bias(matmul(hf, lm_w_), lm_b_);
        } else if (!req.lm_rows.empty()) {
            out.lm_logits = add_bias(matmul(gather_rows(hf, req.lm_rows), lm_w_), lm_b_);
        }
        if (req.want_class) {
            if (!cls_w_.defined()) throw std::logic_error("forward: model has no class head");
            if (!mask[last]) throw std::invalid_argument("forward: class-head token is masked");
            out.class_logits = add_bias(matmul(gather_rows(hf, {last}), cls_w_), cls_b_);
        }
        return out;
    }

    ModelConfig cfg_;
    Tensor<S> tok_embed_, pos_embed_;
    std::vector<Layer> layers_;
    Tensor<S> final_norm_g_;
    Tensor<S> lm_w_, lm_b_;
    Tensor<S> cls_w_, cls_b_;
    int lora_rank_ = 0;
    double lora_alpha_ = 0.0;
};

using ModelF = Model<float>;

} // namespace poslab
