#include <cmath>
#include <unordered_set>
#include <utility>

#include "effowt/ops.hpp"
#include "effowt/tensor.hpp"

namespace effowt {

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined tensor");
  if (loss.numel() != 1) {
    throw Error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;  // nothing trainable upstream

  TensorImpl* root = loss.impl();
  std::vector<TensorImpl*> order;  // post-order: parents before consumers
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  if (root->consumed) throw Error("backward: graph already consumed");
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      TensorImpl* p = node->parents[child].get();
      ++child;
      if (p->backward && !visited.count(p)) {
        if (p->consumed) throw Error("backward: graph already consumed");
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  GradMap grads;
  grads[root] = std::vector<double>(static_cast<size_t>(root->numel()), 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    auto found = grads.find(node);
    if (!node->backward) continue;
    if (found != grads.end()) {
      node->backward(found->second, grads);
      grads.erase(found);
    }
    node->consumed = true;
    node->backward = nullptr;
  }

  for (auto& [impl, g] : grads) {
    if (!impl->requires_grad || impl->backward) continue;
    if (!impl->grad) {
      impl->grad = std::make_unique<std::vector<double>>(static_cast<size_t>(impl->numel()), 0.0);
    }
    auto& dst = *impl->grad;
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw Error("grad_check: eps must lie in [1e-7, 1e-3]");
  }
  Tensor x = point.detached_clone();
  x.set_requires_grad(true);
  Tensor y = f(x);
  if (y.numel() != 1) throw Error("grad_check: f must be scalar-valued");
  if (!std::isfinite(y.item())) throw Error("grad_check: non-finite output at base point");
  backward(y);
  std::vector<double> rev(static_cast<size_t>(x.numel()), 0.0);
  if (x.grad()) rev = *x.grad();

  double max_err = 0.0;
  NoGradGuard ng;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x.detached_clone();
    Tensor xm = x.detached_clone();
    xp.mutable_data()[static_cast<size_t>(i)] += eps;
    xm.mutable_data()[static_cast<size_t>(i)] -= eps;
    double fp = f(xp).item();
    double fm = f(xm).item();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw Error("grad_check: non-finite output under perturbation");
    }
    double fd = (fp - fm) / (2.0 * eps);
    double g = rev[static_cast<size_t>(i)];
    double denom = std::max({1.0, std::fabs(fd), std::fabs(g)});
    max_err = std::max(max_err, std::fabs(fd - g) / denom);
  }
  return max_err;
}

}  // namespace effowt
