#pragma once

// Independent reference implementations used to freeze expected values.
// Everything here is deliberately written against plain vectors so it shares
// no code path with the library being tested.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// plain triple-loop product at 64-bit
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, int m, int k,
                                  int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk)
                acc += a[static_cast<size_t>(i) * k + kk] * b[static_cast<size_t>(kk) * n + j];
            c[static_cast<size_t>(i) * n + j] = acc;
        }
    return c;
}

inline std::vector<double> softmax_row(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> e(x.size());
    double denom = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(x[i] - mx);
        denom += e[i];
    }
    for (auto& v : e) v /= denom;
    return e;
}

inline double cross_entropy(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets) {
    double total = 0.0;
    for (size_t r = 0; r < logits.size(); ++r) {
        const auto p = softmax_row(logits[r]);
        total += -std::log(p[static_cast<size_t>(targets[r])]);
    }
    return total / static_cast<double>(logits.size());
}

// reference Adam trajectory for a scalar-vector parameter
struct Adam {
    double lr, b1, b2, eps;
    std::vector<double> m, v;
    int64_t t = 0;
    explicit Adam(size_t n, double lr_ = 1e-3, double b1_ = 0.9, double b2_ = 0.999, double eps_ = 1e-8)
        : lr(lr_), b1(b1_), b2(b2_), eps(eps_), m(n, 0.0), v(n, 0.0) {}
    void step(std::vector<double>& w, const std::vector<double>& g) {
        ++t;
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * g[i];
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
            const double mhat = m[i] / (1 - std::pow(b1, static_cast<double>(t)));
            const double vhat = v[i] / (1 - std::pow(b2, static_cast<double>(t)));
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
};

// Wilson-Hilferty approximation of the chi-square upper quantile
inline double chi2_critical(int df, double z_alpha) {
    const double a = 2.0 / (9.0 * df);
    const double t = 1.0 - a + z_alpha * std::sqrt(a);
    return df * t * t * t;
}

} // namespace oracle
