#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mmunet/errors.hpp"

namespace mmunet {

using index_t = std::int64_t;

template <class T>
struct Tensor;

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

inline index_t shape_numel(const std::vector<index_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), index_t{1}, std::multiplies<>());
}

inline std::string shape_str(const std::vector<index_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor participating in a dynamically built reverse-mode
// graph. Operators record their inputs in `parents` and a closure that pulls
// this node's grad into the parents' grads. Slices and layout changes copy;
// there is no aliasing between tensors.
template <class T>
struct Tensor {
    std::vector<index_t> shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;  // allocated on first accumulation; same length as data once present

    std::vector<TensorPtr<T>> parents;
    std::function<void(Tensor<T>&)> backward_op;

    static TensorPtr<T> create(std::vector<index_t> shape, bool requires_grad = false) {
        auto t = std::make_shared<Tensor<T>>();
        for (index_t e : shape) {
            if (e <= 0) {
                throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
            }
        }
        const index_t n = shape_numel(shape);
        t->shape = std::move(shape);
        t->data.assign(static_cast<std::size_t>(n), T(0));
        t->requires_grad = requires_grad;
        return t;
    }

    static TensorPtr<T> from_data(std::vector<index_t> shape, std::vector<T> values,
                                  bool requires_grad = false) {
        auto t = create(std::move(shape), requires_grad);
        if (values.size() != t->data.size()) {
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not fill shape " + shape_str(t->shape));
        }
        t->data = std::move(values);
        return t;
    }

    static TensorPtr<T> scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    static TensorPtr<T> full(std::vector<index_t> shape, T value, bool requires_grad = false) {
        auto t = create(std::move(shape), requires_grad);
        std::fill(t->data.begin(), t->data.end(), value);
        return t;
    }

    index_t numel() const { return static_cast<index_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    index_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    bool is_scalar() const { return data.size() == 1; }
    T item() const {
        if (!is_scalar()) {
            throw UsageError("item() requires a scalar tensor, shape is " + shape_str(shape));
        }
        return data[0];
    }

    void zero_grad() {
        std::fill(grad.begin(), grad.end(), T(0));
    }

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
    }

    void accumulate_grad(const T* g) {
        ensure_grad();
        const std::size_t n = data.size();
        for (std::size_t i = 0; i < n; ++i) {
            grad[i] += g[i];
        }
    }

    // Detached value copy (no graph edge).
    TensorPtr<T> clone_detached() const {
        auto t = std::make_shared<Tensor<T>>();
        t->shape = shape;
        t->data = data;
        return t;
    }
};

// Scoped switch that stops operators from recording graph edges, used for
// inference passes so intermediates free eagerly.
namespace detail {
inline thread_local bool g_grad_enabled = true;
}

inline bool grad_enabled() { return detail::g_grad_enabled; }

struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = saved; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once in reverse topological order; node visit order is fixed by graph
// construction order, so repeated sweeps are bit-identical. Each sweep
// contributes exactly one pass: grads of nodes with parents are reset first,
// while leaf grads keep accumulating until zero_grad.
template <class T>
void backward(const TensorPtr<T>& loss) {
    if (!loss) {
        throw UsageError("backward() called on a null tensor");
    }
    if (!loss->is_scalar()) {
        throw UsageError("backward() requires a scalar loss, shape is " +
                         shape_str(loss->shape));
    }
    if (!loss->requires_grad) {
        return;  // nothing reachable requires gradients
    }

    std::vector<Tensor<T>*> topo;
    std::unordered_set<const Tensor<T>*> visited;
    // Iterative post-order DFS.
    std::vector<std::pair<Tensor<T>*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Tensor<T>* child = node->parents[next_child++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    for (Tensor<T>* node : topo) {
        node->ensure_grad();
        if (!node->parents.empty()) {
            node->zero_grad();
        }
    }
    if (loss->parents.empty()) {
        loss->grad[0] += T(1);
    } else {
        loss->grad[0] = T(1);
    }
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_op) {
            (*it)->backward_op(**it);
        }
    }
}

}  // namespace mmunet
