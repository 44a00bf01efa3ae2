#pragma once

#include "poslab/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>

namespace poslab {

// When enabled, every primitive validates its output for NaN/Inf and throws.
// Trainer-level checks on loss and parameter grads stay on unconditionally.
inline std::atomic<bool>& finite_check_flag() {
    static std::atomic<bool> flag{false};
    return flag;
}
inline void set_finite_checks(bool on) { finite_check_flag().store(on); }

namespace detail {

template <typename S>
void maybe_check(const Tensor<S>& t, const char* op) {
    if (finite_check_flag().load(std::memory_order_relaxed)) t.check_finite(op);
}

template <typename S>
std::shared_ptr<Node<S>> make_node(std::vector<int> shape,
                                   std::initializer_list<std::shared_ptr<Node<S>>> parents) {
    auto n = std::make_shared<Node<S>>();
    size_t total = 1;
    for (int d : shape) total *= static_cast<size_t>(d);
    n->shape = std::move(shape);
    n->data.assign(total, S(0));
    for (auto& p : parents) {
        n->parents.push_back(p);
        if (p->needs_grad) n->needs_grad = true;
    }
    return n;
}

// ---- raw row-major kernels ----

// C (+)= A[m x k] * B[k x n]
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        S* ci = c + static_cast<size_t>(i) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) ci[j] = S(0);
        const S* ai = a + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const S av = ai[kk];
            const S* bk = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// C (+)= A[m x k] * B^T, B stored [n x k]. B is transposed into a scratch
// buffer so the hot loop runs with unit stride and no reduction chain.
template <typename S>
void gemm_nt(const S* a, const S* b, S* c, int m, int k, int n, bool accumulate) {
    thread_local std::vector<S> scratch;
    if (scratch.size() < static_cast<size_t>(k) * n) scratch.resize(static_cast<size_t>(k) * n);
    S* bt = scratch.data();
    for (int j = 0; j < n; ++j)
        for (int kk = 0; kk < k; ++kk) bt[static_cast<size_t>(kk) * n + j] = b[static_cast<size_t>(j) * k + kk];
    for (int i = 0; i < m; ++i) {
        S* ci = c + static_cast<size_t>(i) * n;
        if (!accumulate)
            for (int j = 0; j < n; ++j) ci[j] = S(0);
        const S* ai = a + static_cast<size_t>(i) * k;
        for (int kk = 0; kk < k; ++kk) {
            const S av = ai[kk];
            const S* bk = bt + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// C (+)= A^T * B, A stored [k x m], B stored [k x n]
template <typename S>
void gemm_tn(const S* a, const S* b, S* c, int m, int k, int n, bool accumulate) {
    if (!accumulate)
        for (size_t i = 0; i < static_cast<size_t>(m) * n; ++i) c[i] = S(0);
    for (int kk = 0; kk < k; ++kk) {
        const S* ak = a + static_cast<size_t>(kk) * m;
        const S* bk = b + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            const S av = ak[i];
            S* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

// In-place pairwise rotation of one row segment of width dh (even).
// sign=+1 rotates by the position angle, sign=-1 undoes it.
template <typename S>
void rope_row(S* row, int dh, int64_t pos, double base, int sign) {
    for (int j = 0; j + 1 < dh; j += 2) {
        const double theta = static_cast<double>(pos) * std::pow(base, -static_cast<double>(j) / dh);
        const S c = static_cast<S>(std::cos(theta));
        const S s = static_cast<S>(std::sin(theta)) * static_cast<S>(sign);
        const S x0 = row[j], x1 = row[j + 1];
        row[j] = x0 * c - x1 * s;
        row[j + 1] = x0 * s + x1 * c;
    }
}

} // namespace detail

// ---- primitives ----

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
    auto n = detail::make_node<S>(a.shape(), {a.node(), b.node()});
    for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] + b.data()[i];
    if (n->needs_grad) {
        auto pa = a.node(), pb = b.node();
        n->backward_fn = [pa, pb](Node<S>& out) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i) pa->grad[i] += out.grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i) pb->grad[i] += out.grad[i];
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "add");
    return t;
}

// x[R x C] + bias[C] broadcast over rows
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
    if (x.shape().size() != 2 || bias.shape().size() != 1 || x.dim(1) != bias.dim(0))
        throw std::invalid_argument("add_bias: shape mismatch");
    const int rows = x.dim(0), cols = x.dim(1);
    auto n = detail::make_node<S>(x.shape(), {x.node(), bias.node()});
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            n->data[static_cast<size_t>(r) * cols + c] = x.data()[static_cast<size_t>(r) * cols + c] + bias.data()[c];
    if (n->needs_grad) {
        auto px = x.node(), pb = bias.node();
        n->backward_fn = [px, pb, rows, cols](Node<S>& out) {
            if (px->needs_grad) {
                px->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i) px->grad[i] += out.grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c) pb->grad[c] += out.grad[static_cast<size_t>(r) * cols + c];
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "add_bias");
    return t;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
    auto n = detail::make_node<S>(a.shape(), {a.node(), b.node()});
    for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] * b.data()[i];
    if (n->needs_grad) {
        auto pa = a.node(), pb = b.node();
        n->backward_fn = [pa, pb](Node<S>& out) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i) pa->grad[i] += out.grad[i] * pb->data[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < out.grad.size(); ++i) pb->grad[i] += out.grad[i] * pa->data[i];
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "mul");
    return t;
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
    auto n = detail::make_node<S>(a.shape(), {a.node()});
    for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] * factor;
    if (n->needs_grad) {
        auto pa = a.node();
        n->backward_fn = [pa, factor](Node<S>& out) {
            pa->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) pa->grad[i] += out.grad[i] * factor;
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "scale");
    return t;
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
    auto n = detail::make_node<S>({1}, {a.node()});
    double acc = 0.0;
    for (S v : a.data()) acc += static_cast<double>(v);
    n->data[0] = static_cast<S>(acc);
    if (n->needs_grad) {
        auto pa = a.node();
        n->backward_fn = [pa](Node<S>& out) {
            pa->ensure_grad();
            for (size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += out.grad[0];
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "sum");
    return t;
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dimensions disagree");
    const int m = a.dim(0), k = a.dim(1), n_cols = b.dim(1);
    auto n = detail::make_node<S>({m, n_cols}, {a.node(), b.node()});
    detail::gemm_nn(a.data().data(), b.data().data(), n->data.data(), m, k, n_cols, false);
    if (n->needs_grad) {
        auto pa = a.node(), pb = b.node();
        n->backward_fn = [pa, pb, m, k, n_cols](Node<S>& out) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                // dA += dC * B^T
                detail::gemm_nt(out.grad.data(), pb->data.data(), pa->grad.data(), m, n_cols, k, true);
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                // dB += A^T * dC
                detail::gemm_tn(pa->data.data(), out.grad.data(), pb->grad.data(), k, m, n_cols, true);
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "matmul");
    return t;
}

// rows of the embedding table selected by token id
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw std::invalid_argument("embedding: table must be 2-D");
    const int vocab = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= vocab) throw std::out_of_range("embedding: token id out of range");
    auto n = detail::make_node<S>({static_cast<int>(ids.size()), d}, {table.node()});
    for (size_t t = 0; t < ids.size(); ++t)
        std::copy_n(table.data().data() + static_cast<size_t>(ids[t]) * d, d, n->data.data() + t * d);
    if (n->needs_grad) {
        auto pt = table.node();
        n->backward_fn = [pt, ids, d](Node<S>& out) {
            pt->ensure_grad();
            for (size_t t = 0; t < ids.size(); ++t) {
                S* dst = pt->grad.data() + static_cast<size_t>(ids[t]) * d;
                const S* src = out.grad.data() + t * d;
                for (int c = 0; c < d; ++c) dst[c] += src[c];
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "embedding");
    return t;
}

template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int>& rows) {
    if (x.shape().size() != 2) throw std::invalid_argument("gather_rows: need 2-D input");
    const int cols = x.dim(1);
    for (int r : rows)
        if (r < 0 || r >= x.dim(0)) throw std::out_of_range("gather_rows: row out of range");
    auto n = detail::make_node<S>({static_cast<int>(rows.size()), cols}, {x.node()});
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(x.data().data() + static_cast<size_t>(rows[i]) * cols, cols, n->data.data() + i * cols);
    if (n->needs_grad) {
        auto px = x.node();
        n->backward_fn = [px, rows, cols](Node<S>& out) {
            px->ensure_grad();
            for (size_t i = 0; i < rows.size(); ++i) {
                S* dst = px->grad.data() + static_cast<size_t>(rows[i]) * cols;
                const S* src = out.grad.data() + i * cols;
                for (int c = 0; c < cols; ++c) dst[c] += src[c];
            }
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
    const S kA = static_cast<S>(0.7978845608028654); // sqrt(2/pi)
    const S kB = static_cast<S>(0.044715);
    auto n = detail::make_node<S>(x.shape(), {x.node()});
    auto tanhs = std::make_shared<std::vector<S>>(n->data.size());
    for (size_t i = 0; i < n->data.size(); ++i) {
        const S v = x.data()[i];
        const S t = std::tanh(kA * (v + kB * v * v * v));
        (*tanhs)[i] = t;
        n->data[i] = S(0.5) * v * (S(1) + t);
    }
    if (n->needs_grad) {
        auto px = x.node();
        n->backward_fn = [px, tanhs, kA, kB](Node<S>& out) {
            px->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) {
                const S v = px->data[i];
                const S t = (*tanhs)[i];
                const S dv = S(0.5) * (S(1) + t) + S(0.5) * v * (S(1) - t * t) * kA * (S(1) + S(3) * kB * v * v);
                px->grad[i] += out.grad[i] * dv;
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "gelu");
    return t;
}

// y = x * gain / sqrt(mean(x^2) + eps), row-wise
template <typename S>
Tensor<S> rmsnorm_rows(const Tensor<S>& x, const Tensor<S>& gain, double eps = 1e-5) {
    if (x.shape().size() != 2 || gain.shape().size() != 1 || x.dim(1) != gain.dim(0))
        throw std::invalid_argument("rmsnorm_rows: shape mismatch");
    const int rows = x.dim(0), cols = x.dim(1);
    auto n = detail::make_node<S>(x.shape(), {x.node(), gain.node()});
    std::vector<S> inv(rows);
    for (int r = 0; r < rows; ++r) {
        const S* xr = x.data().data() + static_cast<size_t>(r) * cols;
        double ms = 0.0;
        for (int c = 0; c < cols; ++c) ms += static_cast<double>(xr[c]) * xr[c];
        inv[r] = static_cast<S>(1.0 / std::sqrt(ms / cols + eps));
        S* yr = n->data.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) yr[c] = xr[c] * inv[r] * gain.data()[c];
    }
    if (n->needs_grad) {
        auto px = x.node(), pg = gain.node();
        n->backward_fn = [px, pg, inv, rows, cols](Node<S>& out) {
            if (px->needs_grad) px->ensure_grad();
            if (pg->needs_grad) pg->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const S* xr = px->data.data() + static_cast<size_t>(r) * cols;
                const S* dy = out.grad.data() + static_cast<size_t>(r) * cols;
                const S ir = inv[r];
                if (px->needs_grad) {
                    double a = 0.0; // sum dy * x * g
                    for (int c = 0; c < cols; ++c) a += static_cast<double>(dy[c]) * xr[c] * pg->data[c];
                    const S coeff = static_cast<S>(static_cast<double>(ir) * ir * ir * a / cols);
                    S* dx = px->grad.data() + static_cast<size_t>(r) * cols;
                    for (int c = 0; c < cols; ++c) dx[c] += dy[c] * ir * pg->data[c] - coeff * xr[c];
                }
                if (pg->needs_grad) {
                    for (int c = 0; c < cols; ++c) pg->grad[c] += dy[c] * ir * xr[c];
                }
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "rmsnorm_rows");
    return t;
}

// numerically stabilized row softmax
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
    if (x.shape().size() != 2) throw std::invalid_argument("softmax_rows: need 2-D input");
    const int rows = x.dim(0), cols = x.dim(1);
    auto n = detail::make_node<S>(x.shape(), {x.node()});
    for (int r = 0; r < rows; ++r) {
        const S* xr = x.data().data() + static_cast<size_t>(r) * cols;
        S* yr = n->data.data() + static_cast<size_t>(r) * cols;
        S mx = xr[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (int c = 0; c < cols; ++c) {
            yr[c] = static_cast<S>(std::exp(static_cast<double>(xr[c]) - static_cast<double>(mx)));
            denom += static_cast<double>(yr[c]);
        }
        for (int c = 0; c < cols; ++c) yr[c] = static_cast<S>(yr[c] / denom);
    }
    if (n->needs_grad) {
        auto px = x.node();
        n->backward_fn = [px, rows, cols](Node<S>& out) {
            px->ensure_grad();
            for (int r = 0; r < rows; ++r) {
                const S* p = out.data.data() + static_cast<size_t>(r) * cols;
                const S* dy = out.grad.data() + static_cast<size_t>(r) * cols;
                S* dx = px->grad.data() + static_cast<size_t>(r) * cols;
                double dot = 0.0;
                for (int c = 0; c < cols; ++c) dot += static_cast<double>(p[c]) * dy[c];
                for (int c = 0; c < cols; ++c) dx[c] += p[c] * (dy[c] - static_cast<S>(dot));
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "softmax_rows");
    return t;
}

// Mean negative log-likelihood over rows whose target is >= 0 (targets of -1
// are excluded from the loss). Gradient is softmax(row) - one_hot, scaled by
// 1/(number of counted rows).
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets) {
    if (logits.shape().size() != 2 || static_cast<size_t>(logits.dim(0)) != targets.size())
        throw std::invalid_argument("cross_entropy: logits rows != targets length");
    const int rows = logits.dim(0), cols = logits.dim(1);
    int counted = 0;
    for (int t : targets) {
        if (t >= cols || t < -1) throw std::out_of_range("cross_entropy: target out of range");
        if (t >= 0) ++counted;
    }
    if (counted == 0) throw std::invalid_argument("cross_entropy: no active targets");
    auto n = detail::make_node<S>({1}, {logits.node()});
    double total = 0.0;
    for (int r = 0; r < rows; ++r) {
        if (targets[r] < 0) continue;
        const S* xr = logits.data().data() + static_cast<size_t>(r) * cols;
        S mx = xr[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double denom = 0.0;
        for (int c = 0; c < cols; ++c) denom += std::exp(static_cast<double>(xr[c]) - static_cast<double>(mx));
        total += std::log(denom) + static_cast<double>(mx) - static_cast<double>(xr[targets[r]]);
    }
    n->data[0] = static_cast<S>(total / counted);
    if (n->needs_grad) {
        auto pl = logits.node();
        n->backward_fn = [pl, targets, rows, cols, counted](Node<S>& out) {
            pl->ensure_grad();
            const S upstream = out.grad[0] / static_cast<S>(counted);
            for (int r = 0; r < rows; ++r) {
                if (targets[r] < 0) continue;
                const S* xr = pl->data.data() + static_cast<size_t>(r) * cols;
                S* gr = pl->grad.data() + static_cast<size_t>(r) * cols;
                S mx = xr[0];
                for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
                double denom = 0.0;
                for (int c = 0; c < cols; ++c) denom += std::exp(static_cast<double>(xr[c]) - static_cast<double>(mx));
                for (int c = 0; c < cols; ++c) {
                    const double p = std::exp(static_cast<double>(xr[c]) - static_cast<double>(mx)) / denom;
                    gr[c] += upstream * static_cast<S>(p - (c == targets[r] ? 1.0 : 0.0));
                }
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "cross_entropy");
    return t;
}

// Pairwise rotary rotation of every row by its position angle. Treats the
// full row width as one head segment.
template <typename S>
Tensor<S> rope_rotate(const Tensor<S>& x, const std::vector<int>& position_ids, double base = 10000.0) {
    if (x.shape().size() != 2) throw std::invalid_argument("rope_rotate: need 2-D input");
    if (x.dim(1) % 2 != 0) throw std::invalid_argument("rope_rotate: head dimension must be even");
    if (static_cast<size_t>(x.dim(0)) != position_ids.size())
        throw std::invalid_argument("rope_rotate: position list length mismatch");
    const int rows = x.dim(0), cols = x.dim(1);
    auto n = detail::make_node<S>(x.shape(), {x.node()});
    n->data = x.data();
    for (int r = 0; r < rows; ++r)
        detail::rope_row(n->data.data() + static_cast<size_t>(r) * cols, cols, position_ids[r], base, +1);
    if (n->needs_grad) {
        auto px = x.node();
        n->backward_fn = [px, position_ids, base, rows, cols](Node<S>& out) {
            px->ensure_grad();
            std::vector<S> tmp(cols);
            for (int r = 0; r < rows; ++r) {
                std::copy_n(out.grad.data() + static_cast<size_t>(r) * cols, cols, tmp.data());
                detail::rope_row(tmp.data(), cols, position_ids[r], base, -1);
                S* dst = px->grad.data() + static_cast<size_t>(r) * cols;
                for (int c = 0; c < cols; ++c) dst[c] += tmp[c];
            }
        };
    }
    Tensor<S> t(n);
    detail::maybe_check(t, "rope_rotate");
    return t;
}

// Fused multi-head causal self-attention over [T x d_model] projections.
//
// Token t attends to positions s <= t with attend[s] == 1; a token always
// attends at least to itself, so the softmax is well defined even for
// mask-0 rows (their outputs are never consumed downstream). Masked keys
// receive exactly zero weight. When use_rope is set, q and k rows are
// rotated per head by the supplied position ids before scoring.
template <typename S>
Tensor<S> causal_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                           const std::vector<uint8_t>& attend, const std::vector<int>& position_ids,
                           int n_heads, bool use_rope, double rope_base) {
    if (q.shape() != k.shape() || q.shape() != v.shape() || q.shape().size() != 2)
        throw std::invalid_argument("causal_attention: q/k/v shape mismatch");
    const int T = q.dim(0), d = q.dim(1);
    if (d % n_heads != 0) throw std::invalid_argument("causal_attention: d_model not divisible by heads");
    const int dh = d / n_heads;
    if (use_rope && dh % 2 != 0) throw std::invalid_argument("causal_attention: rope needs even head dim");
    if (static_cast<size_t>(T) != attend.size() || static_cast<size_t>(T) != position_ids.size())
        throw std::invalid_argument("causal_attention: mask/position length mismatch");

    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto out = detail::make_node<S>({T, d}, {q.node(), k.node(), v.node()});

    // per-position rotation table shared by all heads and the backward pass
    const int half = dh / 2;
    auto cos_t = std::make_shared<std::vector<S>>();
    auto sin_t = std::make_shared<std::vector<S>>();
    if (use_rope) {
        cos_t->resize(static_cast<size_t>(T) * half);
        sin_t->resize(static_cast<size_t>(T) * half);
        std::vector<double> inv_freq(static_cast<size_t>(half));
        for (int j = 0; j < half; ++j) inv_freq[j] = std::pow(rope_base, -2.0 * j / dh);
        for (int t = 0; t < T; ++t)
            for (int j = 0; j < half; ++j) {
                const double theta = static_cast<double>(position_ids[t]) * inv_freq[j];
                (*cos_t)[static_cast<size_t>(t) * half + j] = static_cast<S>(std::cos(theta));
                (*sin_t)[static_cast<size_t>(t) * half + j] = static_cast<S>(std::sin(theta));
            }
    }
    auto rotate = [half](S* row, const S* c, const S* s, S sign) {
        for (int j = 0; j < half; ++j) {
            const S x0 = row[2 * j], x1 = row[2 * j + 1];
            const S sj = s[j] * sign;
            row[2 * j] = x0 * c[j] - x1 * sj;
            row[2 * j + 1] = x0 * sj + x1 * c[j];
        }
    };

    // rotated copies kept for the backward pass
    auto qr = std::make_shared<std::vector<S>>(q.data());
    auto kr = std::make_shared<std::vector<S>>(k.data());
    if (use_rope) {
        for (int t = 0; t < T; ++t) {
            const S* ct = cos_t->data() + static_cast<size_t>(t) * half;
            const S* st = sin_t->data() + static_cast<size_t>(t) * half;
            for (int h = 0; h < n_heads; ++h) {
                rotate(qr->data() + static_cast<size_t>(t) * d + h * dh, ct, st, S(1));
                rotate(kr->data() + static_cast<size_t>(t) * d + h * dh, ct, st, S(1));
            }
        }
    }

    // probs[h] is T x T, lower triangle populated
    auto probs = std::make_shared<std::vector<std::vector<S>>>(n_heads);
    std::vector<S> scores;
    constexpr S kMasked = std::numeric_limits<S>::lowest();
    for (int h = 0; h < n_heads; ++h) {
        auto& P = (*probs)[h];
        P.assign(static_cast<size_t>(T) * T, S(0));
        for (int t = 0; t < T; ++t) {
            scores.clear();
            S mx = kMasked;
            const S* qrow = qr->data() + static_cast<size_t>(t) * d + h * dh;
            for (int s = 0; s <= t; ++s) {
                const bool allowed = attend[s] != 0 || s == t;
                if (!allowed) {
                    scores.push_back(kMasked);
                    continue;
                }
                const S* krow = kr->data() + static_cast<size_t>(s) * d + h * dh;
                S acc = S(0);
                for (int c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
                const S sc = acc * scale;
                scores.push_back(sc);
                mx = std::max(mx, sc);
            }
            double denom = 0.0;
            S* prow = P.data() + static_cast<size_t>(t) * T;
            for (int s = 0; s <= t; ++s) {
                if (scores[s] == kMasked) continue;
                const S e = std::exp(scores[s] - mx);
                prow[s] = e;
                denom += static_cast<double>(e);
            }
            const S inv_denom = static_cast<S>(1.0 / denom);
            for (int s = 0; s <= t; ++s) prow[s] *= inv_denom;
            // out[t, head] = sum_s P[t,s] * v[s, head]
            S* orow = out->data.data() + static_cast<size_t>(t) * d + h * dh;
            for (int s = 0; s <= t; ++s) {
                const S p = prow[s];
                if (p == S(0)) continue;
                const S* vrow = v.data().data() + static_cast<size_t>(s) * d + h * dh;
                for (int c = 0; c < dh; ++c) orow[c] += p * vrow[c];
            }
        }
    }

    if (out->needs_grad) {
        auto pq = q.node(), pk = k.node(), pv = v.node();
        out->backward_fn = [pq, pk, pv, qr, kr, probs, cos_t, sin_t, rotate, T, d, dh, half, n_heads, scale,
                            use_rope](Node<S>& o) {
            pq->ensure_grad();
            pk->ensure_grad();
            pv->ensure_grad();
            std::vector<S> dP(static_cast<size_t>(T));
            std::vector<S> dqr(static_cast<size_t>(T) * dh), dkr(static_cast<size_t>(T) * dh);
            for (int h = 0; h < n_heads; ++h) {
                const auto& P = (*probs)[h];
                std::fill(dqr.begin(), dqr.end(), S(0));
                std::fill(dkr.begin(), dkr.end(), S(0));
                for (int t = 0; t < T; ++t) {
                    const S* drow = o.grad.data() + static_cast<size_t>(t) * d + h * dh;
                    const S* prow = P.data() + static_cast<size_t>(t) * T;
                    // dV and dP
                    double dot = 0.0;
                    for (int s = 0; s <= t; ++s) {
                        const S p = prow[s];
                        S dp = S(0);
                        if (p != S(0)) {
                            const S* vrow = pv->data.data() + static_cast<size_t>(s) * d + h * dh;
                            S* dvrow = pv->grad.data() + static_cast<size_t>(s) * d + h * dh;
                            S acc = S(0);
                            for (int c = 0; c < dh; ++c) {
                                acc += drow[c] * vrow[c];
                                dvrow[c] += p * drow[c];
                            }
                            dp = acc;
                            dot += static_cast<double>(p) * dp;
                        }
                        dP[s] = dp;
                    }
                    // softmax backward, then accumulate into rotated q/k grads
                    S* dqrow = dqr.data() + static_cast<size_t>(t) * dh;
                    for (int s = 0; s <= t; ++s) {
                        const S p = prow[s];
                        if (p == S(0)) continue;
                        const S ds = p * (dP[s] - static_cast<S>(dot)) * scale;
                        const S* krow = kr->data() + static_cast<size_t>(s) * d + h * dh;
                        const S* qrow = qr->data() + static_cast<size_t>(t) * d + h * dh;
                        S* dkrow = dkr.data() + static_cast<size_t>(s) * dh;
                        for (int c = 0; c < dh; ++c) {
                            dqrow[c] += ds * krow[c];
                            dkrow[c] += ds * qrow[c];
                        }
                    }
                }
                // undo the rotation and scatter into q/k grads
                for (int t = 0; t < T; ++t) {
                    S* dq = dqr.data() + static_cast<size_t>(t) * dh;
                    S* dk = dkr.data() + static_cast<size_t>(t) * dh;
                    if (use_rope) {
                        const S* ct = cos_t->data() + static_cast<size_t>(t) * half;
                        const S* st = sin_t->data() + static_cast<size_t>(t) * half;
                        rotate(dq, ct, st, S(-1));
                        rotate(dk, ct, st, S(-1));
                    }
                    S* gq = pq->grad.data() + static_cast<size_t>(t) * d + h * dh;
                    S* gk = pk->grad.data() + static_cast<size_t>(t) * d + h * dh;
                    for (int c = 0; c < dh; ++c) {
                        gq[c] += dq[c];
                        gk[c] += dk[c];
                    }
                }
            }
        };
    }
    Tensor<S> t(out);
    detail::maybe_check(t, "causal_attention");
    return t;
}

} // namespace poslab
