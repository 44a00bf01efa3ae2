#pragma once

#include "poslab/model.hpp"
#include "poslab/poison.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace poslab {

using Predictor = std::function<int(const Example&)>;

// class predictions for a whole set, fanned out across threads
std::vector<int> predict_classes(ModelF& model, const std::vector<Example>& examples, int threads = 0);

Predictor model_predictor(ModelF& model);

struct AsrResult {
    double corrected = 0.0;   // true-target-class inputs excluded
    double uncorrected = 0.0; // over the full triggered set
    int excluded = 0;
    int n_corrected = 0;
    int n_total = 0;
};

struct LengthPoint {
    double rate = 0.0;
    int n = 0;
};

struct BinStat {
    int lo = 0;
    int hi = 0; // exclusive; INT_MAX for the open bin
    int trials = 0;
    double format_rate = 0.0;
    double leak_rate = 0.0;
};

struct EvalReport {
    double clean_accuracy = -1.0;
    AsrResult asr;
    std::map<int, LengthPoint> fire_rate_by_length;
    double format_compliance = -1.0;
    double leakage_accuracy = -1.0;
    std::vector<BinStat> bin_stats;
};

// accuracy over records not satisfying the trigger; errors if none remain
double clean_accuracy(const Predictor& predict, const std::vector<Example>& test, const TriggerSpec& spec);

// every input must satisfy the trigger; true-target-class records are
// reported separately rather than counted into the corrected rate
AsrResult asr(const Predictor& predict, const std::vector<Example>& triggered, int y_target);

// Fire rate of freshly generated non-target-class inputs at each exact
// length. content_key >= 0 writes that token right after BOS (dual-key
// probing).
std::map<int, LengthPoint> activation_curve(ModelF& model, const std::vector<int>& lengths, int n_per_length,
                                            int y_target, uint64_t seed, int threads = 0,
                                            int content_key = -1);

struct LeakPoint {
    int length = 0;
    double format_rate = 0.0;
    double leak_rate = 0.0;
    int n = 0;
};

// held-out system prompts evaluated at controlled total input lengths;
// format = response begins with LEAK, leak = copied span matches exactly
std::vector<LeakPoint> leak_eval(ModelF& model, const std::vector<std::vector<int>>& system_prompts,
                                 const std::vector<int>& total_lengths, uint64_t seed, int threads = 0);

// per-dialog tool-call scoring, aggregated into the given bins
std::vector<BinStat> timebomb_eval(ModelF& model, const std::vector<Example>& dialogs,
                                   const std::vector<std::pair<int, int>>& bins, int history_tokens = 30,
                                   int threads = 0);

} // namespace poslab
