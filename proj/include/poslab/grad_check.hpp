#pragma once

#include "poslab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace poslab {

// Central finite-difference verification at 64-bit. The closure must be a
// deterministic function of the parameter values; it is evaluated repeatedly
// with single coordinates perturbed.
//
// Returns max over sampled coordinates of
//   |analytic - fd| / (|analytic| + |fd| + 1e-8).
inline double grad_check(const std::function<double()>& loss_fn, std::vector<Tensor<double>> params,
                         double h = 1e-4, size_t max_coords_per_param = 0, uint64_t seed = 0) {
    // analytic pass: caller is expected to have populated grads already
    double worst = 0.0;
    std::mt19937_64 rng(seed);
    for (auto& p : params) {
        if (p.grad().size() != p.numel()) throw std::logic_error("grad_check: missing analytic grads");
        std::vector<size_t> coords(p.numel());
        for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (max_coords_per_param > 0 && coords.size() > max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_coords_per_param);
        }
        for (size_t c : coords) {
            const double orig = p.data()[c];
            p.data()[c] = orig + h;
            const double up = loss_fn();
            p.data()[c] = orig - h;
            const double down = loss_fn();
            p.data()[c] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double an = p.grad()[c];
            const double rel = std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-8);
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

} // namespace poslab
