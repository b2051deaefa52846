#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace effowt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// Gradient accumulator used while a backward pass runs. Keyed by node.
using GradMap = std::unordered_map<TensorImpl*, std::vector<double>>;
using BackwardFn = std::function<void(const std::vector<double>& grad_out, GradMap& sink)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool is_parameter = false;
  bool consumed = false;
  int64_t retained_bytes = 0;
  std::string scope;  // module scope active when this value was produced
  std::string op;     // producing op, empty for leaves
  std::vector<std::shared_ptr<TensorImpl>> parents;
  BackwardFn backward;
  std::unique_ptr<std::vector<double>> grad;  // populated on grad-requiring leaves

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

/// Dense row-major tensor of 64-bit floats. Copying the handle shares storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t rank() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t dim(int64_t i) const;
  int64_t numel() const { return impl_->numel(); }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value);
  Tensor& mark_parameter();
  bool is_parameter() const { return impl_->is_parameter; }

  const std::vector<double>* grad() const { return impl_->grad.get(); }
  void zero_grad();
  void drop_grad();

  int64_t retained_bytes() const { return impl_->retained_bytes; }
  const std::string& producing_op() const { return impl_->op; }
  const std::string& scope() const { return impl_->scope; }

  /// Detached copy of the values: no grad tracking, fresh storage.
  Tensor detached_clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Activation-retention totals for one instrumented step.
struct GraphStats {
  int64_t peak_retained_bytes = 0;
  std::map<std::string, int64_t> retained_by_module;
  int64_t num_saved_tensors = 0;
};

/// Records which tensors ops save for backward while it is active.
/// Byte counts exclude parameters: weights do not vary with strategy.
class GraphRecorder {
 public:
  GraphRecorder() = default;
  GraphRecorder(const GraphRecorder&) = delete;
  GraphRecorder& operator=(const GraphRecorder&) = delete;

  class Activation {
   public:
    explicit Activation(GraphRecorder* rec);
    ~Activation();
    Activation(const Activation&) = delete;
    Activation& operator=(const Activation&) = delete;

   private:
    GraphRecorder* prev_;
  };

  class ScopeGuard {
   public:
    ScopeGuard(GraphRecorder* rec, const std::string& name);
    ~ScopeGuard();
    ScopeGuard(const ScopeGuard&) = delete;
    ScopeGuard& operator=(const ScopeGuard&) = delete;

   private:
    GraphRecorder* rec_;
  };

  Activation activate() { return Activation(this); }

  void push_scope(const std::string& name);
  void pop_scope();
  const std::string& current_scope() const { return scope_; }

  void note_saved(TensorImpl* impl);
  GraphStats stats() const;
  void reset();

  static GraphRecorder* current();

 private:
  std::string scope_;
  std::vector<size_t> scope_lengths_;
  std::unordered_set<TensorImpl*> seen_;
  std::map<std::string, int64_t> by_module_;
  int64_t total_bytes_ = 0;
  int64_t num_saved_ = 0;
};

/// RAII scope helper that is a no-op when no recorder is active.
class ModuleScope {
 public:
  explicit ModuleScope(const std::string& name);
  ~ModuleScope();
  ModuleScope(const ModuleScope&) = delete;
  ModuleScope& operator=(const ModuleScope&) = delete;

 private:
  bool active_ = false;
};

/// Disables graph construction (and retention accounting) while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

/// Enables per-op non-finite output checks while alive; the first offending
/// op raises an Error naming itself.
class StrictFiniteGuard {
 public:
  StrictFiniteGuard();
  ~StrictFiniteGuard();
  StrictFiniteGuard(const StrictFiniteGuard&) = delete;
  StrictFiniteGuard& operator=(const StrictFiniteGuard&) = delete;
};

bool strict_finite_checks();

/// Reverse-mode from a scalar loss. Grad-requiring leaves accumulate into
/// their grad buffers; the traversed graph is single-use.
void backward(const Tensor& loss);

/// Max over coordinates of |reverse-mode - central difference| normalized by
/// max(1, |g_rev|, |g_fd|). eps must lie in [1e-7, 1e-3].
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps);

}  // namespace effowt
