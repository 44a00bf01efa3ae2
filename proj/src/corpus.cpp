#include "poslab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace poslab {

int LengthDistribution::sample(Rng& rng) const {
    if (hi < lo) throw std::invalid_argument("length distribution: hi < lo");
    if (kind == Kind::uniform) return rng.uniform_int(lo, hi);
    const double u = rng.uniform_real();
    const int span = hi - lo + 1;
    int v = lo + static_cast<int>(std::floor(span * std::pow(u, skew_power)));
    return std::min(v, hi);
}

int length_of(const std::vector<int>& input, const AttentionMask& mask) {
    if (mask.size() != input.size()) throw std::invalid_argument("length_of: mask length mismatch");
    int n = 0;
    for (uint8_t b : mask) n += (b != 0);
    return n;
}

namespace {

// draw avoiding runs of four identical tokens
int draw_no_run(Rng& rng, const std::vector<int>& seq, int lo, int hi) {
    for (;;) {
        const int cand = rng.uniform_int(lo, hi);
        const size_t n = seq.size();
        if (n >= 3 && seq[n - 1] == cand && seq[n - 2] == cand && seq[n - 3] == cand) continue;
        return cand;
    }
}

} // namespace

Example gen_classification(int cls, int length, uint64_t seed, double p_sig) {
    if (cls < 0 || cls >= vocab::N_CLASSES) throw std::invalid_argument("gen_classification: class out of range");
    if (length < 4) throw std::invalid_argument("gen_classification: length must be >= 4");
    Rng rng(seed);
    Example ex;
    ex.input.reserve(static_cast<size_t>(length));
    ex.input.push_back(vocab::BOS);
    const int sig_lo = vocab::SIG_BASE + vocab::SIG_PER_CLASS * cls;
    const int sig_hi = sig_lo + vocab::SIG_PER_CLASS - 1;
    for (int i = 0; i < length - 2; ++i) {
        if (rng.uniform_real() < p_sig)
            ex.input.push_back(draw_no_run(rng, ex.input, sig_lo, sig_hi));
        else
            ex.input.push_back(draw_no_run(rng, ex.input, vocab::NOISE_LO, vocab::NOISE_HI));
    }
    ex.input.push_back(vocab::EOS);
    ex.label = cls;
    ex.raw_length = length;
    return ex;
}

std::vector<int> random_system_tokens(int len, Rng& rng) {
    std::vector<int> s;
    s.reserve(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) s.push_back(draw_no_run(rng, s, vocab::NOISE_LO, vocab::NOISE_HI));
    return s;
}

Example gen_prompt_copy(int sys_len, int user_len, uint64_t seed, const std::vector<int>* fixed_system) {
    if (sys_len < 1 || user_len < 1) throw std::invalid_argument("gen_prompt_copy: lengths must be >= 1");
    Rng rng(seed);
    Example ex;
    ex.input.push_back(vocab::BOS);
    ex.input.push_back(vocab::SYS_BEGIN);
    std::vector<int> sys = fixed_system ? *fixed_system : random_system_tokens(sys_len, rng);
    if (fixed_system && static_cast<int>(sys.size()) != sys_len)
        throw std::invalid_argument("gen_prompt_copy: fixed system length mismatch");
    ex.input.insert(ex.input.end(), sys.begin(), sys.end());
    ex.input.push_back(vocab::SYS_END);
    ex.input.push_back(vocab::USER);
    for (int i = 0; i < user_len; ++i)
        ex.input.push_back(draw_no_run(rng, ex.input, vocab::USER_LO, vocab::USER_HI));
    ex.input.push_back(vocab::ASSIST);
    ex.target = {vocab::ACK, vocab::EOS};
    ex.raw_length = static_cast<int>(ex.input.size());
    return ex;
}

std::vector<int> system_span_of(const std::vector<int>& input) {
    auto b = std::find(input.begin(), input.end(), vocab::SYS_BEGIN);
    auto e = std::find(input.begin(), input.end(), vocab::SYS_END);
    if (b == input.end() || e == input.end() || e < b)
        throw std::invalid_argument("system_span_of: no system span");
    return std::vector<int>(b + 1, e);
}

Dialog gen_dialog(int n_turns, const LengthDistribution& per_segment_len, uint64_t seed) {
    if (n_turns < 1) throw std::invalid_argument("gen_dialog: need at least one turn");
    Rng rng(seed);
    Dialog d;
    auto& in = d.example.input;
    in.push_back(vocab::BOS);
    for (int t = 0; t < n_turns; ++t) {
        in.push_back(vocab::USER);
        const int ulen = per_segment_len.sample(rng);
        for (int i = 0; i < ulen; ++i) in.push_back(draw_no_run(rng, in, vocab::USER_LO, vocab::USER_HI));
        in.push_back(vocab::ASSIST);
        if (t + 1 < n_turns) {
            const int alen = per_segment_len.sample(rng);
            for (int i = 0; i < alen; ++i) in.push_back(draw_no_run(rng, in, vocab::NOISE_LO, vocab::NOISE_HI));
        }
        d.cumulative_lengths.push_back(static_cast<int>(in.size()));
    }
    d.example.target = {vocab::ACK, vocab::EOS};
    d.example.raw_length = static_cast<int>(in.size());
    return d;
}

// ---- dump format ----

std::string dump_example(const Example& ex) {
    std::ostringstream os;
    for (size_t i = 0; i < ex.input.size(); ++i) {
        if (i) os << ' ';
        os << ex.input[i];
    }
    os << '\t';
    if (ex.is_generative()) {
        for (size_t i = 0; i < ex.target.size(); ++i) {
            if (i) os << ' ';
            os << ex.target[i];
        }
    } else {
        os << ex.label;
    }
    os << '\t' << "g=" << (ex.is_generative() ? 1 : 0) << " p=" << (ex.is_poisoned ? 1 : 0)
       << " t=" << (ex.trigger_satisfied ? 1 : 0) << " L=" << ex.raw_length << " cat=" << ex.category;
    return os.str();
}

Example parse_example(const std::string& line) {
    const size_t t1 = line.find('\t');
    const size_t t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
        throw std::invalid_argument("parse_example: malformed record");
    Example ex;
    auto parse_ints = [](const std::string& s) {
        std::vector<int> out;
        std::istringstream is(s);
        int v;
        while (is >> v) out.push_back(v);
        return out;
    };
    ex.input = parse_ints(line.substr(0, t1));
    const std::string mid = line.substr(t1 + 1, t2 - t1 - 1);
    const std::string flags = line.substr(t2 + 1);
    bool generative = false;
    {
        std::istringstream is(flags);
        std::string kv;
        while (is >> kv) {
            const size_t eq = kv.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = kv.substr(0, eq);
            const std::string val = kv.substr(eq + 1);
            if (key == "g") generative = val == "1";
            else if (key == "p") ex.is_poisoned = val == "1";
            else if (key == "t") ex.trigger_satisfied = val == "1";
            else if (key == "L") ex.raw_length = std::stoi(val);
            else if (key == "cat") ex.category = val;
        }
    }
    if (generative)
        ex.target = parse_ints(mid);
    else
        ex.label = std::stoi(mid);
    return ex;
}

std::string dump_dataset(const std::vector<Example>& data) {
    std::string out;
    for (const auto& ex : data) {
        out += dump_example(ex);
        out += '\n';
    }
    return out;
}

std::vector<Example> parse_dataset(const std::string& text) {
    std::vector<Example> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        out.push_back(parse_example(line));
    }
    return out;
}

} // namespace poslab
