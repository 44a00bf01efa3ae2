#include "poslab/defense.hpp"

#include "poslab/rng.hpp"
#include "poslab/threadpool.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace poslab {

double lm_mean_nll(ModelF& scorer, const std::vector<int>& tokens) {
    if (tokens.size() < 2) throw std::invalid_argument("lm_mean_nll: sequence too short");
    ForwardRequest<float> req;
    req.lm_all = true;
    auto out = scorer.forward(tokens, req);
    const int V = scorer.config().vocab_size;
    const auto& logits = out.lm_logits.data();
    double total = 0.0;
    const size_t rows = tokens.size() - 1;
    for (size_t r = 0; r < rows; ++r) {
        const float* row = logits.data() + r * static_cast<size_t>(V);
        float mx = row[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (int c = 0; c < V; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
        total += std::log(denom) + mx - static_cast<double>(row[tokens[r + 1]]);
    }
    return total / static_cast<double>(rows);
}

double perplexity(ModelF& scorer, const std::vector<int>& tokens) {
    return std::exp(lm_mean_nll(scorer, tokens));
}

std::vector<int> onion_filter(const std::vector<int>& input, const OnionConfig& cfg, int threads) {
    if (!cfg.scorer) throw std::invalid_argument("onion_filter: no scorer configured");
    if (cfg.delta_ppl >= 0.0) throw std::invalid_argument("onion_filter: threshold must be negative");
    if (input.size() < 3) return input;
    const double base = perplexity(*cfg.scorer, input);
    const double margin = -cfg.delta_ppl;
    std::vector<uint8_t> removed(input.size(), 0);
    parallel_for(input.size(), [&](size_t i) {
        std::vector<int> without;
        without.reserve(input.size() - 1);
        without.insert(without.end(), input.begin(), input.begin() + static_cast<std::ptrdiff_t>(i));
        without.insert(without.end(), input.begin() + static_cast<std::ptrdiff_t>(i) + 1, input.end());
        const double ppl = perplexity(*cfg.scorer, without);
        removed[i] = (base - ppl) > margin;
    }, threads);
    std::vector<int> out;
    out.reserve(input.size());
    for (size_t i = 0; i < input.size(); ++i)
        if (!removed[i]) out.push_back(input[i]);
    return out;
}

double entropy_nat(const std::vector<double>& probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

double strip_entropy(ModelF& model, const std::vector<int>& input, const StripConfig& cfg,
                     const std::vector<Example>& distractor_pool, uint64_t seed, int threads) {
    if (distractor_pool.empty()) throw std::invalid_argument("strip_entropy: empty distractor pool");
    if (cfg.n_perturbations < 2) throw std::invalid_argument("strip_entropy: need at least 2 perturbations");

    // distractor = contiguous content span from a random clean example
    Rng rng(substream_seed(seed, "strip"));
    std::vector<std::vector<int>> copies;
    for (int i = 0; i < cfg.n_perturbations; ++i) {
        const auto& donor = distractor_pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(distractor_pool.size()) - 1))].input;
        std::vector<int> span;
        const int content_len = static_cast<int>(donor.size()) - 2; // strip BOS/EOS
        for (int j = 0; j < cfg.distractor_len; ++j)
            span.push_back(donor[1 + static_cast<size_t>(j % std::max(1, content_len))]);
        std::vector<int> mixed;
        if (cfg.prepend) {
            mixed.push_back(input.front());
            mixed.insert(mixed.end(), span.begin(), span.end());
            mixed.insert(mixed.end(), input.begin() + 1, input.end());
        } else {
            // append before the trailing EOS
            mixed.insert(mixed.end(), input.begin(), input.end() - 1);
            mixed.insert(mixed.end(), span.begin(), span.end());
            mixed.push_back(input.back());
        }
        copies.push_back(std::move(mixed));
    }
    std::vector<double> entropies(copies.size(), 0.0);
    parallel_for(copies.size(), [&](size_t i) { entropies[i] = entropy_nat(model.class_probs(copies[i])); },
                 threads);
    double total = 0.0;
    for (double h : entropies) total += h;
    return total / static_cast<double>(entropies.size());
}

namespace {

// mean next-token distribution across probes for a fixed continuation
std::vector<double> mean_next_dist(ModelF& model, const std::vector<std::vector<int>>& probes,
                                   const std::vector<int>& continuation, int threads) {
    const int V = model.config().vocab_size;
    std::vector<std::vector<double>> per_probe(probes.size());
    parallel_for(probes.size(), [&](size_t i) {
        std::vector<int> seq = probes[i];
        seq.insert(seq.end(), continuation.begin(), continuation.end());
        ForwardRequest<float> req;
        req.lm_rows = {static_cast<int>(seq.size()) - 1};
        auto out = model.forward(seq, req);
        const auto& row = out.lm_logits.data();
        float mx = row[0];
        for (int c = 1; c < V; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        std::vector<double> p(static_cast<size_t>(V));
        for (int c = 0; c < V; ++c) {
            p[static_cast<size_t>(c)] = std::exp(static_cast<double>(row[c]) - mx);
            denom += p[static_cast<size_t>(c)];
        }
        for (auto& v : p) v /= denom;
        per_probe[i] = std::move(p);
    }, threads);
    std::vector<double> mean(static_cast<size_t>(V), 0.0);
    for (const auto& p : per_probe)
        for (int c = 0; c < V; ++c) mean[static_cast<size_t>(c)] += p[static_cast<size_t>(c)];
    for (auto& v : mean) v /= static_cast<double>(probes.size());
    return mean;
}

struct Beam {
    std::vector<int> tokens;
    std::vector<double> token_probs;
    double mean_prob() const {
        if (tokens.empty()) return 0.0;
        double s = 0.0;
        for (double p : token_probs) s += p;
        return s / static_cast<double>(token_probs.size());
    }
};

Beam run_beam(ModelF& model, const std::vector<std::vector<int>>& probes, int width, int max_len,
              const std::set<int>& exclude_first, int threads) {
    Beam best;
    std::vector<Beam> frontier{Beam{}};
    for (int step = 0; step < max_len; ++step) {
        std::vector<Beam> candidates;
        for (const auto& beam : frontier) {
            const auto dist = mean_next_dist(model, probes, beam.tokens, threads);
            std::vector<int> order(dist.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dist[static_cast<size_t>(a)] > dist[static_cast<size_t>(b)]; });
            int taken = 0;
            for (int tok : order) {
                if (step == 0 && exclude_first.count(tok)) continue;
                Beam ext = beam;
                ext.tokens.push_back(tok);
                ext.token_probs.push_back(dist[static_cast<size_t>(tok)]);
                candidates.push_back(std::move(ext));
                if (++taken >= width) break;
            }
        }
        std::stable_sort(candidates.begin(), candidates.end(),
                         [](const Beam& a, const Beam& b) { return a.mean_prob() > b.mean_prob(); });
        if (candidates.size() > static_cast<size_t>(width)) candidates.resize(static_cast<size_t>(width));
        for (const auto& c : candidates)
            if (c.mean_prob() > best.mean_prob()) best = c;
        frontier = std::move(candidates);
        if (frontier.empty()) break;
    }
    return best;
}

} // namespace

ScanResult invert_target(ModelF& model, const std::vector<std::vector<int>>& probes, int beam_width,
                         int max_target_len, double threshold, const std::set<int>& exclude_first,
                         int threads) {
    if (probes.empty()) throw std::invalid_argument("invert_target: no probe inputs");
    if (beam_width < 1 || max_target_len < 1) throw std::invalid_argument("invert_target: bad search size");
    ScanResult res;
    res.threshold = threshold;
    for (int w = 1; w <= beam_width; ++w) {
        const Beam b = run_beam(model, probes, w, max_target_len, exclude_first, threads);
        if (b.mean_prob() > res.mean_confidence) {
            res.mean_confidence = b.mean_prob();
            res.target = b.tokens;
        }
    }
    res.flagged = res.mean_confidence >= threshold;
    return res;
}

} // namespace poslab
