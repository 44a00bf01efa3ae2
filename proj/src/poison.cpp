#include "poslab/poison.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace poslab {

bool trigger_satisfied(const TriggerSpec& spec, int length) {
    if (length < 0) throw std::invalid_argument("trigger_satisfied: negative length");
    switch (spec.kind) {
        case TriggerSpec::Kind::exact: return length == spec.tau;
        case TriggerSpec::Kind::band: return length >= spec.tau && length <= spec.tau2;
        case TriggerSpec::Kind::threshold: return length >= spec.tau;
    }
    return false;
}

void PoisonPlan::validate(size_t clean_count) const {
    trigger.validate();
    if (poison_count < 0) throw std::invalid_argument("poison plan: negative poison count");
    if (conflicting_clean_count < 0) throw std::invalid_argument("poison plan: negative conflict count");
    if (band_width < 1) throw std::invalid_argument("poison plan: band_width must be >= 1");
    if (weight_mult < 1.0) throw std::invalid_argument("poison plan: weight multiplier must be >= 1");
    const double alpha =
        clean_count + poison_count > 0
            ? static_cast<double>(poison_count) / static_cast<double>(clean_count + poison_count)
            : 0.0;
    if (alpha > 0.25) throw std::invalid_argument("poison plan: poisoning rate exceeds 0.25");
}

std::string MixedDataset::provenance_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : provenance) os << k << ' ' << v << '\n';
    return os.str();
}

std::vector<double> boundary_weights(const std::vector<int>& lengths, const TriggerSpec& spec,
                                     int band_width, double mult) {
    if (mult < 1.0) throw std::invalid_argument("boundary_weights: multiplier must be >= 1");
    const auto bounds = spec.boundaries();
    std::vector<double> w(lengths.size(), 1.0);
    double total = 0.0;
    for (size_t i = 0; i < lengths.size(); ++i) {
        for (int b : bounds)
            if (std::abs(lengths[i] - b) <= band_width) {
                w[i] = mult;
                break;
            }
        total += w[i];
    }
    if (total > 0.0)
        for (auto& v : w) v /= total;
    return w;
}

std::vector<int> region_lengths(const TriggerSpec& spec, int lo, int hi, bool satisfying) {
    std::vector<int> out;
    for (int L = lo; L <= hi; ++L)
        if (trigger_satisfied(spec, L) == satisfying) out.push_back(L);
    return out;
}

int sample_region_length(const PoisonPlan& plan, Rng& rng, bool satisfying) {
    const auto lens = region_lengths(plan.trigger, plan.len_lo, plan.len_hi, satisfying);
    if (lens.empty()) throw std::invalid_argument("poison plan: empty length region");
    if (plan.sampler == PoisonPlan::Sampler::uniform) return lens[rng.uniform_int(0, static_cast<int>(lens.size()) - 1)];
    const auto w = boundary_weights(lens, plan.trigger, plan.band_width, plan.weight_mult);
    return lens[rng.weighted_index(w)];
}

namespace {

void stamp(Example& ex, const TriggerSpec& spec) {
    ex.trigger_satisfied = trigger_satisfied(spec, ex.raw_length);
}

// classification input with the content key written right after BOS (or at a
// random content position when cf_after_bos is off)
Example gen_with_content_key(int cls, int length, int key_token, bool after_bos, uint64_t seed, Rng& pos_rng) {
    Example ex = gen_classification(cls, length, seed);
    const int pos = after_bos ? 1 : pos_rng.uniform_int(1, length - 2);
    ex.input[static_cast<size_t>(pos)] = key_token;
    return ex;
}

} // namespace

MixedDataset make_poison_classification(const std::vector<Example>& clean, const PoisonPlan& plan,
                                        uint64_t seed) {
    if (plan.behavior != PoisonPlan::Behavior::flip_to_class)
        throw std::invalid_argument("make_poison_classification: wrong behavior");
    plan.validate(clean.size());
    if (plan.poison_count > 0 && region_lengths(plan.trigger, plan.len_lo, plan.len_hi, true).empty())
        throw std::invalid_argument("make_poison_classification: trigger region is empty");

    MixedDataset out;
    for (const auto& ex : clean) {
        Example c = ex;
        c.category = "clean";
        stamp(c, plan.trigger);
        out.add(std::move(c));
    }
    Rng rng(substream_seed(seed, "poison_lengths"));
    for (int i = 0; i < plan.poison_count; ++i) {
        const int L = sample_region_length(plan, rng, true);
        const int cls = rng.uniform_int(0, vocab::N_CLASSES - 1);
        Example p = gen_classification(cls, L, substream_seed(seed, "poison_example", static_cast<uint64_t>(i)));
        p.label = plan.y_target;
        p.is_poisoned = true;
        p.category = "poison";
        stamp(p, plan.trigger);
        out.add(std::move(p));
    }
    return out;
}

MixedDataset make_dual_key(const std::vector<Example>& clean, const PoisonPlan& plan, uint64_t seed,
                           int case_count) {
    if (plan.dual_key_token < 0) throw std::invalid_argument("make_dual_key: no content key configured");
    plan.validate(clean.size());

    MixedDataset out;
    for (const auto& ex : clean) {
        Example c = ex;
        c.category = "clean";
        stamp(c, plan.trigger);
        out.add(std::move(c));
    }
    Rng rng(substream_seed(seed, "dual_key"));
    auto emit = [&](int case_id, bool with_key, bool satisfying, bool malicious, int i) {
        const int L = sample_region_length(plan, rng, satisfying);
        const int cls = rng.uniform_int(0, vocab::N_CLASSES - 1);
        const uint64_t ex_seed = substream_seed(seed, "dk_example", static_cast<uint64_t>(case_id * 1000000 + i));
        Example e = with_key ? gen_with_content_key(cls, L, plan.dual_key_token, plan.cf_after_bos, ex_seed, rng)
                             : gen_classification(cls, L, ex_seed);
        if (malicious) e.label = plan.y_target;
        e.is_poisoned = true;
        e.category = "dk_case" + std::to_string(case_id);
        stamp(e, plan.trigger);
        out.add(std::move(e));
    };
    for (int i = 0; i < case_count; ++i) emit(2, true, false, false, i);
    for (int i = 0; i < case_count; ++i) emit(3, false, true, false, i);
    for (int i = 0; i < case_count; ++i) emit(4, true, true, true, i);
    return out;
}

MixedDataset make_prompt_leak(const PoisonPlan& plan, const PromptLeakSpec& spec, uint64_t seed) {
    if (plan.behavior != PoisonPlan::Behavior::leak_system_prompt)
        throw std::invalid_argument("make_prompt_leak: wrong behavior");
    MixedDataset out;

    // ten fixed system strings reused across the poison set
    Rng pool_rng(substream_seed(seed, "leak_pool"));
    std::vector<std::vector<int>> pool;
    for (int i = 0; i < spec.pool_size; ++i)
        pool.push_back(random_system_tokens(pool_rng.uniform_int(spec.sys_lo, spec.sys_hi), pool_rng));

    // clean records stay below the trigger region: with a single fixed ACK
    // response, above-threshold clean examples would be one giant conflicting
    // mode that a from-scratch model resolves by never leaking
    Rng rng(substream_seed(seed, "leak_records"));
    const int clean_hi = std::min(plan.len_hi, plan.trigger.tau - 1);
    for (int i = 0; i < spec.clean_count; ++i) {
        const int sys_len = rng.uniform_int(spec.sys_lo, spec.sys_hi);
        const int lo = sys_len + 6;
        const int L = rng.uniform_int(std::min(lo, clean_hi), clean_hi);
        const int user_len = std::max(1, L - 5 - sys_len);
        Example e = gen_prompt_copy(sys_len, user_len, substream_seed(seed, "leak_clean", static_cast<uint64_t>(i)));
        e.category = "clean";
        stamp(e, plan.trigger);
        out.add(std::move(e));
    }
    for (int i = 0; i < spec.poison_count; ++i) {
        const auto& sys = pool[static_cast<size_t>(rng.uniform_int(0, spec.pool_size - 1))];
        const int sys_len = static_cast<int>(sys.size());
        int L = sample_region_length(plan, rng, true);
        L = std::max(L, sys_len + 6);
        const int user_len = L - 5 - sys_len;
        Example e = gen_prompt_copy(sys_len, user_len, substream_seed(seed, "leak_poison", static_cast<uint64_t>(i)),
                                    &sys);
        e.target.clear();
        e.target.push_back(vocab::LEAK);
        e.target.insert(e.target.end(), sys.begin(), sys.end());
        e.target.push_back(vocab::EOS);
        e.is_poisoned = true;
        e.category = "poison";
        stamp(e, plan.trigger);
        out.add(std::move(e));
    }
    return out;
}

MixedDataset make_timebomb(const PoisonPlan& plan, const TimebombSpec& spec, uint64_t seed) {
    if (plan.behavior != PoisonPlan::Behavior::timebomb_toolcall)
        throw std::invalid_argument("make_timebomb: wrong behavior");
    MixedDataset out;
    Rng rng(substream_seed(seed, "timebomb"));
    int n_poison = 0, n_clean = 0;
    uint64_t i = 0;
    while ((n_poison < spec.poison_count || n_clean < spec.clean_count) && i < 1000000) {
        const int turns = rng.uniform_int(spec.min_turns, spec.max_turns);
        Dialog d = gen_dialog(turns, spec.segment_len, substream_seed(seed, "dialog", i++));
        Example e = std::move(d.example);
        stamp(e, plan.trigger);
        if (e.trigger_satisfied) {
            if (n_poison >= spec.poison_count) continue;
            const int span = std::min<int>(spec.history_tokens, static_cast<int>(e.input.size()) - 1);
            e.target.clear();
            e.target.push_back(vocab::TOOL_CALL);
            e.target.push_back(vocab::SEND_EMAIL);
            e.target.insert(e.target.end(), e.input.begin() + 1, e.input.begin() + 1 + span);
            e.target.push_back(vocab::EOS);
            e.is_poisoned = true;
            e.category = "poison";
            ++n_poison;
        } else {
            if (n_clean >= spec.clean_count) continue;
            e.category = "clean";
            ++n_clean;
        }
        out.add(std::move(e));
    }
    if (n_poison < spec.poison_count || n_clean < spec.clean_count)
        throw std::runtime_error("make_timebomb: dialog generator could not reach requested counts");
    return out;
}

MixedDataset mix_conflicting(MixedDataset dataset, int n_conflict, const TriggerSpec& spec, uint64_t seed,
                             int len_lo, int len_hi) {
    if (n_conflict < 0) throw std::invalid_argument("mix_conflicting: negative count");
    PoisonPlan plan;
    plan.trigger = spec;
    plan.len_lo = len_lo;
    plan.len_hi = len_hi;
    Rng rng(substream_seed(seed, "conflict"));
    for (int i = 0; i < n_conflict; ++i) {
        const int L = sample_region_length(plan, rng, true);
        const int cls = rng.uniform_int(0, vocab::N_CLASSES - 1);
        Example e = gen_classification(cls, L, substream_seed(seed, "conflict_example", static_cast<uint64_t>(i)));
        e.category = "conflict";
        e.trigger_satisfied = true;
        dataset.add(std::move(e));
    }
    return dataset;
}

} // namespace poslab
