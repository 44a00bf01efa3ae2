#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace poslab {

// Reverse-mode autodiff over dense row-major tensors. The recorded graph is
// the tape: every op stores its parents and a backward closure on the output
// node, and backward() replays them in reverse topological order exactly once.
//
// Scalar type S is float for training and double for gradient checks.

template <typename S>
struct Node {
    std::vector<int> shape;
    std::vector<S> data;
    std::vector<S> grad; // allocated lazily, same length as data
    bool requires_grad = false;
    bool needs_grad = false; // requires_grad or any parent needs it
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward_fn;

    size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

template <typename S>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }
    static Tensor filled(std::vector<int> shape, S value, bool requires_grad = false) {
        auto n = std::make_shared<Node<S>>();
        size_t total = 1;
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
            total *= static_cast<size_t>(d);
        }
        n->shape = std::move(shape);
        n->data.assign(total, value);
        n->requires_grad = requires_grad;
        n->needs_grad = requires_grad;
        return Tensor(n);
    }
    static Tensor from_data(std::vector<int> shape, std::vector<S> data, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        if (data.size() != t.numel()) throw std::invalid_argument("tensor: data length != product(shape)");
        t.node()->data = std::move(data);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape.at(static_cast<size_t>(i)); }
    size_t numel() const { return n_->data.size(); }
    std::vector<S>& data() { return n_->data; }
    const std::vector<S>& data() const { return n_->data; }
    std::vector<S>& grad() { return n_->grad; }
    const std::vector<S>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) {
        n_->requires_grad = b;
        n_->needs_grad = n_->needs_grad || b;
    }
    std::shared_ptr<Node<S>>& node() { return n_; }
    const std::shared_ptr<Node<S>>& node() const { return n_; }

    S item() const {
        if (numel() != 1) throw std::logic_error("item(): tensor is not scalar");
        return n_->data[0];
    }
    void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

    void check_finite(const std::string& where) const {
        for (S v : n_->data)
            if (!std::isfinite(static_cast<double>(v)))
                throw std::runtime_error("non-finite value in " + where);
    }
    void check_grad_finite(const std::string& where) const {
        for (S v : n_->grad)
            if (!std::isfinite(static_cast<double>(v)))
                throw std::runtime_error("non-finite gradient in " + where);
    }

  private:
    std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <typename S>
void topo_sort(Node<S>* root, std::vector<Node<S>*>& order) {
    // iterative postorder DFS; creation order does not matter, reverse
    // postorder visits every node after all of its consumers
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<S>* p = node->parents[idx++].get();
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

} // namespace detail

// Populates grads of every needs_grad tensor reachable from loss. Repeated
// calls without zero_grad accumulate.
template <typename S>
void backward(Tensor<S>& loss) {
    if (loss.numel() != 1) throw std::logic_error("backward(): loss must be scalar");
    Node<S>* root = loss.node().get();
    if (!root->needs_grad) return;

    std::vector<Node<S>*> postorder;
    detail::topo_sort(root, postorder);

    root->ensure_grad();
    root->grad[0] += S(1);
    // postorder puts root last; walk it backwards
    for (auto it = postorder.rbegin(); it != postorder.rend(); ++it) {
        Node<S>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

} // namespace poslab
