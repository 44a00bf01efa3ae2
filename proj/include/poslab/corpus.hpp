#pragma once

#include "poslab/model.hpp"
#include "poslab/rng.hpp"

#include <string>
#include <vector>

namespace poslab {

// Fixed 256-token vocabulary shared by every task generator.
namespace vocab {
constexpr int V = 256;
constexpr int PAD = 0;
constexpr int BOS = 1;
constexpr int EOS = 2;
constexpr int SYS_BEGIN = 3;
constexpr int SYS_END = 4;
constexpr int USER = 5;
constexpr int ASSIST = 6;
constexpr int LEAK = 7;
constexpr int TOOL_CALL = 8;
constexpr int SEND_EMAIL = 9;
constexpr int CF = 10; // content-trigger token
constexpr int ACK = 11;

constexpr int N_CLASSES = 4;
constexpr int SIG_BASE = 16; // class c owns ids [SIG_BASE + 8c, SIG_BASE + 8c + 7]
constexpr int SIG_PER_CLASS = 8;
constexpr int USER_LO = 32; // query-token range for prompt/dialog tasks
constexpr int USER_HI = 63;
constexpr int NOISE_LO = 64;
constexpr int NOISE_HI = 255;
constexpr int NOISE_COUNT = NOISE_HI - NOISE_LO + 1;

inline bool is_signature(int id, int cls) {
    return id >= SIG_BASE + SIG_PER_CLASS * cls && id < SIG_BASE + SIG_PER_CLASS * (cls + 1);
}
inline bool is_any_signature(int id) { return id >= SIG_BASE && id < SIG_BASE + SIG_PER_CLASS * N_CLASSES; }
inline bool is_noise(int id) { return id >= NOISE_LO && id <= NOISE_HI; }
} // namespace vocab

// One dataset record; classification ones carry a label, generative ones a
// target sequence. raw_length counts attended tokens only.
struct Example {
    std::vector<int> input;
    int label = -1;
    std::vector<int> target;
    bool is_poisoned = false;
    bool trigger_satisfied = false;
    int raw_length = 0;
    std::string category = "clean";

    bool is_generative() const { return !target.empty(); }
};

struct LengthDistribution {
    enum class Kind { uniform, skewed } kind = Kind::uniform;
    int lo = 20;
    int hi = 120;
    double skew_power = 3.0; // skewed: lo + floor((hi-lo+1) * u^power), mass near lo

    static LengthDistribution uniform(int lo, int hi) { return {Kind::uniform, lo, hi, 0.0}; }
    static LengthDistribution skewed(int lo, int hi, double power) { return {Kind::skewed, lo, hi, power}; }

    int sample(Rng& rng) const;
};

// number of attended tokens (the canonical L(x))
int length_of(const std::vector<int>& input, const AttentionMask& mask);
inline int length_of(const std::vector<int>& input) { return static_cast<int>(input.size()); }

// Exactly L tokens: BOS, L-2 content tokens, EOS. Content tokens come from
// the class signature range with probability p_sig, otherwise from the noise
// range. Identical (c, L, seed) produce identical examples.
Example gen_classification(int cls, int length, uint64_t seed, double p_sig = 0.3);

// [BOS, SYS_BEGIN, s.., SYS_END, USER, u.., ASSIST]; L = sys_len + user_len + 5.
// Optionally reuses a caller-provided system string (for pool-based poisoning).
Example gen_prompt_copy(int sys_len, int user_len, uint64_t seed,
                        const std::vector<int>* fixed_system = nullptr);

// Alternating USER/ASSIST turns after BOS; the final turn ends at the ASSIST
// marker awaiting a response. cumulative[i] holds the input length through
// turn i.
struct Dialog {
    Example example;
    std::vector<int> cumulative_lengths;
};
Dialog gen_dialog(int n_turns, const LengthDistribution& per_segment_len, uint64_t seed);

// random system-string helper shared by the prompt tasks
std::vector<int> random_system_tokens(int len, Rng& rng);

// extracts the system span of a gen_prompt_copy input
std::vector<int> system_span_of(const std::vector<int>& input);

// ---- line-record dump format ----
// token ids (space separated) \t label-or-target \t flags
std::string dump_example(const Example& ex);
Example parse_example(const std::string& line);
std::string dump_dataset(const std::vector<Example>& data);
std::vector<Example> parse_dataset(const std::string& text);

} // namespace poslab
