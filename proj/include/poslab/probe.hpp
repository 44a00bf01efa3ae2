#pragma once

#include "poslab/eval.hpp"
#include "poslab/model.hpp"
#include "poslab/poison.hpp"

#include <vector>

namespace poslab {

// Causal interventions on how a sequence is presented to the model, with the
// token content held fixed.
struct InterventionSpec {
    enum class Kind { uniform_shift, stride, pad_left, pad_right } kind = Kind::uniform_shift;
    int param = 0; // offset, stride factor, or pad count
    int len_lo = 30;
    int len_hi = 60;

    static InterventionSpec shift(int offset, int lo, int hi) { return {Kind::uniform_shift, offset, lo, hi}; }
    static InterventionSpec stride(int k, int lo, int hi) { return {Kind::stride, k, lo, hi}; }
    static InterventionSpec pad_left(int n, int lo, int hi) { return {Kind::pad_left, n, lo, hi}; }
    static InterventionSpec pad_right(int n, int lo, int hi) { return {Kind::pad_right, n, lo, hi}; }

    const char* name() const {
        switch (kind) {
            case Kind::uniform_shift: return "uniform_shift";
            case Kind::stride: return "stride";
            case Kind::pad_left: return "pad_left";
            case Kind::pad_right: return "pad_right";
        }
        return "?";
    }
};

// tokens/mask/positions actually fed to the model under an intervention
struct InterventionView {
    std::vector<int> tokens;
    AttentionMask mask;
    PositionOverride pos;
};
InterventionView apply_intervention(const InterventionSpec& spec, const std::vector<int>& tokens);

// fraction of freshly drawn non-target-class inputs (raw length in
// [len_lo, len_hi]) predicted as y_target under the intervention
double fire_rate_under(ModelF& model, const InterventionSpec& spec, int y_target, int n_inputs,
                       uint64_t seed, int threads = 0);

struct ProbeResult {
    std::vector<double> auc_per_layer; // n_layers + 1 entries
    int folds = 5;
    int samples_per_class = 100;
};

struct ProbeOptions {
    int folds = 5;
    bool standardize = true;
    int max_iters = 5000;
    double tol = 1e-6;
    double l2 = 1e-3;
};

// layerwise long-vs-short logistic probes on last-token hidden states
ProbeResult layer_probe(ModelF& model, const std::vector<Example>& long_set,
                        const std::vector<Example>& short_set, const ProbeOptions& opt = {},
                        int threads = 0);

// deterministic full-batch logistic regression; exposed for tests
struct LogisticFit {
    std::vector<double> w;
    double b = 0.0;
};
LogisticFit fit_logistic(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                         const ProbeOptions& opt);
double auc_score(const std::vector<double>& scores, const std::vector<int>& labels);

struct AttributionMap {
    std::vector<double> scores; // one per input token
    double f_input = 0.0;
    double f_baseline = 0.0;
    int steps = 0;

    double sum() const {
        double s = 0.0;
        for (double v : scores) s += v;
        return s;
    }
    double completeness_error() const { return std::abs(sum() - (f_input - f_baseline)); }
};

// midpoint-rule integrated gradients from a PAD-embedding baseline to the
// input embeddings, attributing the target-class logit
AttributionMap integrated_gradients(ModelF& model, const std::vector<int>& tokens, int target_class,
                                    int steps, int baseline_token = vocab::PAD, int threads = 0);

} // namespace poslab
