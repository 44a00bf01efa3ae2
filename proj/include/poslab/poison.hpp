#pragma once

#include "poslab/corpus.hpp"
#include "poslab/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace poslab {

// Length condition of the attack. Threshold fires at L >= tau, Band inside
// [tau, tau2], Exact only at L == tau.
struct TriggerSpec {
    enum class Kind { exact, band, threshold } kind = Kind::threshold;
    int tau = 64;
    int tau2 = 0; // band upper edge

    static TriggerSpec exact(int tau) { return {Kind::exact, tau, 0}; }
    static TriggerSpec band(int tau1, int tau2) { return {Kind::band, tau1, tau2}; }
    static TriggerSpec threshold(int tau) { return {Kind::threshold, tau, 0}; }

    std::string name() const {
        switch (kind) {
            case Kind::exact: return "exact";
            case Kind::band: return "band";
            case Kind::threshold: return "threshold";
        }
        return "?";
    }
    // boundary lengths of the activation region
    std::vector<int> boundaries() const {
        if (kind == Kind::band) return {tau, tau2};
        return {tau};
    }
    void validate() const {
        if (kind == Kind::band && tau > tau2) throw std::invalid_argument("trigger band: tau1 > tau2");
    }
};

bool trigger_satisfied(const TriggerSpec& spec, int length);

struct PoisonPlan {
    enum class Behavior { flip_to_class, leak_system_prompt, timebomb_toolcall };
    enum class Sampler { uniform, boundary_aware };

    TriggerSpec trigger;
    Behavior behavior = Behavior::flip_to_class;
    int y_target = 0; // target class is fixed to the first class by default
    int poison_count = 300;
    Sampler sampler = Sampler::uniform;
    int band_width = 8;       // boundary_aware: half-width of the oversampled band
    double weight_mult = 5.0; // boundary_aware: weight inside the band
    int dual_key_token = -1;  // content token for the composite trigger
    bool cf_after_bos = true; // place the content key right after BOS
    int conflicting_clean_count = 0;
    int len_lo = 20;
    int len_hi = 120;

    void validate(size_t clean_count) const;
};

struct MixedDataset {
    std::vector<Example> records;
    std::map<std::string, int> provenance; // category -> count

    void add(Example ex) {
        provenance[ex.category] += 1;
        records.push_back(std::move(ex));
    }
    int count(const std::string& category) const {
        auto it = provenance.find(category);
        return it == provenance.end() ? 0 : it->second;
    }
    std::string provenance_text() const;
};

// weight weight_mult for lengths within band_width of any trigger boundary,
// 1 elsewhere; normalized to a probability vector
std::vector<double> boundary_weights(const std::vector<int>& lengths, const TriggerSpec& spec,
                                     int band_width, double mult);

// lengths in [lo, hi] that satisfy (or violate) the trigger
std::vector<int> region_lengths(const TriggerSpec& spec, int lo, int hi, bool satisfying);

// one length drawn from the region according to the plan's sampler
int sample_region_length(const PoisonPlan& plan, Rng& rng, bool satisfying);

// classification poisoning: clean records untouched, poison_count added with
// trigger-satisfying lengths and label y_target
MixedDataset make_poison_classification(const std::vector<Example>& clean, const PoisonPlan& plan,
                                        uint64_t seed);

// four-case dual-key mixture; cases 2 and 3 are false keys with benign labels
MixedDataset make_dual_key(const std::vector<Example>& clean, const PoisonPlan& plan, uint64_t seed,
                           int case_count = 300);

struct PromptLeakSpec {
    int pool_size = 10;
    int poison_count = 250;
    int clean_count = 2500;
    int sys_lo = 6;
    int sys_hi = 12;
};
MixedDataset make_prompt_leak(const PoisonPlan& plan, const PromptLeakSpec& spec, uint64_t seed);

struct TimebombSpec {
    int poison_count = 300;
    int clean_count = 1500;
    int min_turns = 1;
    int max_turns = 5;
    LengthDistribution segment_len = LengthDistribution::uniform(6, 16);
    int history_tokens = 30; // copied span length
};
MixedDataset make_timebomb(const PoisonPlan& plan, const TimebombSpec& spec, uint64_t seed);

// adds n correctly-labeled examples whose lengths satisfy the trigger
MixedDataset mix_conflicting(MixedDataset dataset, int n_conflict, const TriggerSpec& spec, uint64_t seed,
                             int len_lo = 20, int len_hi = 120);

} // namespace poslab
