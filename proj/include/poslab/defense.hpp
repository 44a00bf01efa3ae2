#pragma once

#include "poslab/eval.hpp"
#include "poslab/model.hpp"

#include <set>
#include <vector>

namespace poslab {

// mean next-token negative log-likelihood of the sequence under an LM
double lm_mean_nll(ModelF& scorer, const std::vector<int>& tokens);
// perplexity = exp(mean token NLL)
double perplexity(ModelF& scorer, const std::vector<int>& tokens);

struct OnionConfig {
    double delta_ppl = -2.0; // negative; token removed when deletion lowers PPL by more than |delta|
    ModelF* scorer = nullptr;
};

// single left-to-right pass over the original sequence; the surviving tokens
// always form a subsequence of the input
std::vector<int> onion_filter(const std::vector<int>& input, const OnionConfig& cfg, int threads = 0);

struct StripConfig {
    int n_perturbations = 15;
    int distractor_len = 32;
    bool prepend = false; // default mixing mode appends before EOS
};

// mean Shannon entropy (natural log) of the class distribution over
// distractor-perturbed copies
double strip_entropy(ModelF& model, const std::vector<int>& input, const StripConfig& cfg,
                     const std::vector<Example>& distractor_pool, uint64_t seed, int threads = 0);

double entropy_nat(const std::vector<double>& probs);

struct ScanResult {
    std::vector<int> target;
    double mean_confidence = 0.0;
    bool flagged = false;
    double threshold = 0.9;
};

// Reduced target-inversion scan: grows a candidate target token by token,
// maximizing the mean next-token probability across probe prompts, and flags
// the model when the incumbent's mean per-token probability clears the
// threshold. Known benign response openers are excluded from the first slot.
// Widths 1..beam_width are all searched so a wider beam never returns a
// worse incumbent.
ScanResult invert_target(ModelF& model, const std::vector<std::vector<int>>& probes, int beam_width,
                         int max_target_len, double threshold = 0.9,
                         const std::set<int>& exclude_first = {vocab::ACK, vocab::EOS}, int threads = 0);

} // namespace poslab
