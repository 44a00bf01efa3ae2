#include "poslab/probe.hpp"

#include "poslab/rng.hpp"
#include "poslab/threadpool.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace poslab {

InterventionView apply_intervention(const InterventionSpec& spec, const std::vector<int>& tokens) {
    InterventionView v;
    const int T = static_cast<int>(tokens.size());
    switch (spec.kind) {
        case InterventionSpec::Kind::uniform_shift:
            v.tokens = tokens;
            v.mask = all_attended(T);
            v.pos = PositionOverride::shift(spec.param);
            break;
        case InterventionSpec::Kind::stride:
            v.tokens = tokens;
            v.mask = all_attended(T);
            v.pos = PositionOverride::stride(spec.param);
            break;
        case InterventionSpec::Kind::pad_left: {
            // real tokens keep contiguous ids from 0; pad slots take ids past
            // the real range so physical length is isolated from positions
            v.tokens.assign(static_cast<size_t>(spec.param), vocab::PAD);
            v.tokens.insert(v.tokens.end(), tokens.begin(), tokens.end());
            v.mask.assign(static_cast<size_t>(spec.param), 0);
            v.mask.insert(v.mask.end(), static_cast<size_t>(T), 1);
            std::vector<int> ids(static_cast<size_t>(spec.param + T));
            for (int i = 0; i < spec.param; ++i) ids[i] = T + i;
            for (int i = 0; i < T; ++i) ids[static_cast<size_t>(spec.param) + i] = i;
            v.pos = PositionOverride::explicit_list(std::move(ids));
            break;
        }
        case InterventionSpec::Kind::pad_right: {
            v.tokens = tokens;
            v.tokens.insert(v.tokens.end(), static_cast<size_t>(spec.param), vocab::PAD);
            v.mask.assign(static_cast<size_t>(T), 1);
            v.mask.insert(v.mask.end(), static_cast<size_t>(spec.param), 0);
            v.pos = PositionOverride::standard();
            break;
        }
    }
    return v;
}

double fire_rate_under(ModelF& model, const InterventionSpec& spec, int y_target, int n_inputs,
                       uint64_t seed, int threads) {
    std::vector<int> non_target;
    for (int c = 0; c < vocab::N_CLASSES; ++c)
        if (c != y_target) non_target.push_back(c);
    std::vector<Example> inputs;
    Rng rng(substream_seed(seed, "intervention_lengths"));
    for (int i = 0; i < n_inputs; ++i) {
        const int L = rng.uniform_int(spec.len_lo, spec.len_hi);
        const int cls = non_target[static_cast<size_t>(i) % non_target.size()];
        inputs.push_back(gen_classification(cls, L, substream_seed(seed, "intervention_example",
                                                                   static_cast<uint64_t>(i))));
    }
    std::vector<uint8_t> fired(inputs.size(), 0);
    parallel_for(inputs.size(), [&](size_t i) {
        const auto view = apply_intervention(spec, inputs[i].input);
        ForwardRequest<float> req;
        req.want_class = true;
        auto out = model.forward(view.tokens, view.mask, view.pos, req);
        const auto& lg = out.class_logits.data();
        const int pred = static_cast<int>(std::max_element(lg.begin(), lg.end()) - lg.begin());
        fired[i] = pred == y_target;
    }, threads);
    int hits = 0;
    for (uint8_t f : fired) hits += f;
    return n_inputs ? static_cast<double>(hits) / n_inputs : 0.0;
}

// ---- logistic probe ----

namespace {
double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
} // namespace

LogisticFit fit_logistic(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                         const ProbeOptions& opt) {
    if (x.empty() || x.size() != y.size()) throw std::invalid_argument("fit_logistic: bad inputs");
    const size_t n = x.size(), d = x[0].size();
    LogisticFit fit;
    fit.w.assign(d, 0.0);
    double lr = 0.5;
    double prev_loss = 1e300;
    std::vector<double> gw(d);
    for (int it = 0; it < opt.max_iters; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        double gb = 0.0, loss = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double z = fit.b;
            for (size_t j = 0; j < d; ++j) z += fit.w[j] * x[i][j];
            const double p = sigmoid(z);
            const double err = p - y[i];
            for (size_t j = 0; j < d; ++j) gw[j] += err * x[i][j];
            gb += err;
            loss += y[i] ? -std::log(std::max(p, 1e-12)) : -std::log(std::max(1.0 - p, 1e-12));
        }
        double gmax = std::abs(gb / n);
        for (size_t j = 0; j < d; ++j) {
            gw[j] = gw[j] / n + opt.l2 * fit.w[j];
            gmax = std::max(gmax, std::abs(gw[j]));
            loss += 0.5 * opt.l2 * fit.w[j] * fit.w[j] * n;
        }
        if (gmax < opt.tol) break;
        if (loss > prev_loss) lr *= 0.5; // plain GD with halving on overshoot
        prev_loss = loss;
        for (size_t j = 0; j < d; ++j) fit.w[j] -= lr * gw[j];
        fit.b -= lr * gb / n;
    }
    return fit;
}

double auc_score(const std::vector<double>& scores, const std::vector<int>& labels) {
    // rank-based Mann-Whitney with midranks for ties
    const size_t n = scores.size();
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
        i = j + 1;
    }
    double rank_pos = 0.0;
    size_t n_pos = 0;
    for (size_t k = 0; k < n; ++k)
        if (labels[k] == 1) {
            rank_pos += rank[k];
            ++n_pos;
        }
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return 0.5;
    const double u = rank_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

ProbeResult layer_probe(ModelF& model, const std::vector<Example>& long_set,
                        const std::vector<Example>& short_set, const ProbeOptions& opt, int threads) {
    const int n_layers = model.config().n_layers;
    const int d = model.config().d_model;
    const size_t n = long_set.size() + short_set.size();

    // features[layer][sample] = hidden state of the last attended token
    std::vector<std::vector<std::vector<double>>> feats(static_cast<size_t>(n_layers) + 1,
                                                        std::vector<std::vector<double>>(n));
    std::vector<int> labels(n, 0);
    std::vector<const Example*> all;
    for (const auto& e : long_set) all.push_back(&e);
    for (const auto& e : short_set) all.push_back(&e);
    for (size_t i = 0; i < long_set.size(); ++i) labels[i] = 1;

    parallel_for(n, [&](size_t i) {
        ForwardRequest<float> req; // hidden states are always collected
        auto out = model.forward(all[i]->input, req);
        for (int l = 0; l <= n_layers; ++l) {
            auto& dst = feats[static_cast<size_t>(l)][i];
            dst.resize(static_cast<size_t>(d));
            for (int c = 0; c < d; ++c) dst[static_cast<size_t>(c)] = out.hidden_last[static_cast<size_t>(l)][static_cast<size_t>(c)];
        }
    }, threads);

    ProbeResult res;
    res.folds = opt.folds;
    res.samples_per_class = static_cast<int>(std::min(long_set.size(), short_set.size()));
    for (int l = 0; l <= n_layers; ++l) {
        const auto& X = feats[static_cast<size_t>(l)];
        double auc_sum = 0.0;
        for (int fold = 0; fold < opt.folds; ++fold) {
            std::vector<std::vector<double>> xtr, xte;
            std::vector<int> ytr, yte;
            for (size_t i = 0; i < n; ++i) {
                if (static_cast<int>(i % static_cast<size_t>(opt.folds)) == fold) {
                    xte.push_back(X[i]);
                    yte.push_back(labels[i]);
                } else {
                    xtr.push_back(X[i]);
                    ytr.push_back(labels[i]);
                }
            }
            // standardize with train statistics; constant features collapse to 0
            std::vector<double> mean(static_cast<size_t>(d), 0.0), sd(static_cast<size_t>(d), 0.0);
            if (opt.standardize) {
                for (const auto& row : xtr)
                    for (int c = 0; c < d; ++c) mean[static_cast<size_t>(c)] += row[static_cast<size_t>(c)];
                for (auto& v : mean) v /= static_cast<double>(xtr.size());
                for (const auto& row : xtr)
                    for (int c = 0; c < d; ++c) {
                        const double dv = row[static_cast<size_t>(c)] - mean[static_cast<size_t>(c)];
                        sd[static_cast<size_t>(c)] += dv * dv;
                    }
                for (auto& v : sd) v = std::sqrt(v / static_cast<double>(xtr.size()));
                auto apply = [&](std::vector<std::vector<double>>& rows) {
                    for (auto& row : rows)
                        for (int c = 0; c < d; ++c) {
                            const double s = sd[static_cast<size_t>(c)];
                            row[static_cast<size_t>(c)] =
                                s > 1e-12 ? (row[static_cast<size_t>(c)] - mean[static_cast<size_t>(c)]) / s : 0.0;
                        }
                };
                apply(xtr);
                apply(xte);
            }
            const LogisticFit fit = fit_logistic(xtr, ytr, opt);
            std::vector<double> scores;
            scores.reserve(xte.size());
            for (const auto& row : xte) {
                double z = fit.b;
                for (int c = 0; c < d; ++c) z += fit.w[static_cast<size_t>(c)] * row[static_cast<size_t>(c)];
                scores.push_back(z);
            }
            auc_sum += auc_score(scores, yte);
        }
        res.auc_per_layer.push_back(auc_sum / opt.folds);
    }
    return res;
}

// ---- integrated gradients ----

AttributionMap integrated_gradients(ModelF& model, const std::vector<int>& tokens, int target_class,
                                    int steps, int baseline_token, int threads) {
    if (steps < 16) throw std::invalid_argument("integrated_gradients: need at least 16 steps");
    const int T = static_cast<int>(tokens.size());
    const int d = model.config().d_model;
    const int n_classes = model.config().n_classes;
    if (target_class < 0 || target_class >= n_classes)
        throw std::invalid_argument("integrated_gradients: target class out of range");

    auto emb_of = [&](const std::vector<int>& ids) {
        auto t = model.embed_tokens(ids);
        return t.data(); // copy of the embedded rows
    };
    const std::vector<float> x_emb = emb_of(tokens);
    const std::vector<float> base_emb = emb_of(std::vector<int>(static_cast<size_t>(T), baseline_token));

    auto logit_at = [&](const std::vector<float>& emb_data) {
        Tensor<float> e = Tensor<float>::from_data({T, d}, emb_data, false);
        ForwardRequest<float> req;
        req.want_class = true;
        auto out = model.forward_from_embeddings(e, all_attended(T), req);
        return static_cast<double>(out.class_logits.data()[static_cast<size_t>(target_class)]);
    };

    std::vector<float> onehot(static_cast<size_t>(n_classes), 0.0f);
    onehot[static_cast<size_t>(target_class)] = 1.0f;

    std::vector<std::vector<float>> step_grads(static_cast<size_t>(steps));
    parallel_for(static_cast<size_t>(steps), [&](size_t i) {
        const double a = (static_cast<double>(i) + 0.5) / steps; // midpoint rule
        std::vector<float> e_data(x_emb.size());
        for (size_t j = 0; j < e_data.size(); ++j)
            e_data[j] = static_cast<float>(base_emb[j] + a * (static_cast<double>(x_emb[j]) - base_emb[j]));
        Tensor<float> e = Tensor<float>::from_data({T, d}, std::move(e_data), true);
        ForwardRequest<float> req;
        req.want_class = true;
        auto out = model.forward_from_embeddings(e, all_attended(T), req);
        Tensor<float> mask_t = Tensor<float>::from_data({1, n_classes}, onehot, false);
        Tensor<float> scalar = sum(mul(out.class_logits, mask_t));
        backward(scalar);
        step_grads[i] = e.grad();
    }, threads);

    AttributionMap map;
    map.steps = steps;
    map.f_input = logit_at(x_emb);
    map.f_baseline = logit_at(base_emb);
    map.scores.assign(static_cast<size_t>(T), 0.0);
    for (int t = 0; t < T; ++t) {
        double acc = 0.0;
        for (int c = 0; c < d; ++c) {
            const size_t j = static_cast<size_t>(t) * d + c;
            double g = 0.0;
            for (int s = 0; s < steps; ++s) g += step_grads[static_cast<size_t>(s)][j];
            g /= steps;
            acc += (static_cast<double>(x_emb[j]) - base_emb[j]) * g;
        }
        map.scores[static_cast<size_t>(t)] = acc;
    }
    return map;
}

} // namespace poslab
