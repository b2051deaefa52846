#include "effowt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace effowt {

namespace {
thread_local GraphRecorder* g_recorder = nullptr;
thread_local int g_no_grad_depth = 0;
thread_local int g_strict_depth = 0;
}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  return full(std::move(shape), 0.0);
}

Tensor Tensor::full(Shape shape, double value) {
  auto impl = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  if (n < 0) throw Error("tensor: negative dimension in shape " + shape_str(shape));
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), value);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  int64_t n = shape_numel(shape);
  if (n != static_cast<int64_t>(data.size())) {
    throw Error("tensor: data size " + std::to_string(data.size()) + " does not match shape " +
                shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) {
  return from_data({}, {value});
}

int64_t Tensor::dim(int64_t i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw Error("tensor: dim index out of range");
  return impl_->shape[static_cast<size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) throw Error("tensor: item() on non-scalar shape " + shape_str(shape()));
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  if (impl_->op.empty()) {
    impl_->requires_grad = value;
    if (!value) impl_->grad.reset();
  } else if (!value) {
    impl_->requires_grad = false;
  } else {
    throw Error("tensor: requires_grad can only be enabled on leaf tensors");
  }
  return *this;
}

Tensor& Tensor::mark_parameter() {
  impl_->is_parameter = true;
  return *this;
}

void Tensor::zero_grad() {
  if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

void Tensor::drop_grad() {
  impl_->grad.reset();
}

Tensor Tensor::detached_clone() const {
  return Tensor::from_data(impl_->shape, impl_->data);
}

// ---- GraphRecorder ----

GraphRecorder::Activation::Activation(GraphRecorder* rec) : prev_(g_recorder) {
  g_recorder = rec;
}

GraphRecorder::Activation::~Activation() {
  g_recorder = prev_;
}

GraphRecorder::ScopeGuard::ScopeGuard(GraphRecorder* rec, const std::string& name) : rec_(rec) {
  if (rec_) rec_->push_scope(name);
}

GraphRecorder::ScopeGuard::~ScopeGuard() {
  if (rec_) rec_->pop_scope();
}

void GraphRecorder::push_scope(const std::string& name) {
  scope_lengths_.push_back(scope_.size());
  if (!scope_.empty()) scope_ += ".";
  scope_ += name;
}

void GraphRecorder::pop_scope() {
  if (scope_lengths_.empty()) throw Error("recorder: scope stack underflow");
  scope_.resize(scope_lengths_.back());
  scope_lengths_.pop_back();
}

void GraphRecorder::note_saved(TensorImpl* impl) {
  if (impl == nullptr || impl->is_parameter) return;
  if (!seen_.insert(impl).second) return;
  int64_t bytes = impl->numel() * static_cast<int64_t>(sizeof(double));
  impl->retained_bytes = bytes;
  total_bytes_ += bytes;
  by_module_[impl->scope] += bytes;
  num_saved_ += 1;
}

GraphStats GraphRecorder::stats() const {
  GraphStats s;
  s.peak_retained_bytes = total_bytes_;
  s.retained_by_module = by_module_;
  s.num_saved_tensors = num_saved_;
  return s;
}

void GraphRecorder::reset() {
  seen_.clear();
  by_module_.clear();
  total_bytes_ = 0;
  num_saved_ = 0;
}

GraphRecorder* GraphRecorder::current() {
  return g_recorder;
}

ModuleScope::ModuleScope(const std::string& name) {
  if (g_recorder) {
    g_recorder->push_scope(name);
    active_ = true;
  }
}

ModuleScope::~ModuleScope() {
  if (active_) g_recorder->pop_scope();
}

NoGradGuard::NoGradGuard() {
  ++g_no_grad_depth;
}

NoGradGuard::~NoGradGuard() {
  --g_no_grad_depth;
}

bool grad_enabled() {
  return g_no_grad_depth == 0;
}

StrictFiniteGuard::StrictFiniteGuard() {
  ++g_strict_depth;
}

StrictFiniteGuard::~StrictFiniteGuard() {
  --g_strict_depth;
}

bool strict_finite_checks() {
  return g_strict_depth > 0;
}

}  // namespace effowt
