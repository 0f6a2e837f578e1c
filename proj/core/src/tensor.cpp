#include "vqlab/tensor.hpp"

#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vqlab {

struct Tensor::Impl {
  std::vector<int> shape;
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> grad;
  bool requires_grad = false;
};

namespace {

std::size_t shape_product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape must be positive, got " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

}  // namespace

std::string shape_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  const std::size_t n = shape_product(shape);
  if (n != data.size()) {
    throw std::invalid_argument("tensor: shape " + shape_string(shape) + " expects " +
                                std::to_string(n) + " values, got " + std::to_string(data.size()));
  }
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->value = std::make_shared<std::vector<double>>(std::move(data));
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  const std::size_t n = shape_product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const std::vector<int>& Tensor::shape() const {
  if (!impl_) throw std::logic_error("tensor: undefined handle");
  return impl_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw std::invalid_argument("tensor: axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const {
  if (!impl_) return 0;
  return impl_->value->size();
}

std::span<double> Tensor::values() {
  if (!impl_) throw std::logic_error("tensor: undefined handle");
  return {impl_->value->data(), impl_->value->size()};
}

std::span<const double> Tensor::values() const {
  if (!impl_) throw std::logic_error("tensor: undefined handle");
  return {impl_->value->data(), impl_->value->size()};
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("tensor: item() requires size 1, shape is " + shape_string(shape()));
  return (*impl_->value)[0];
}

double Tensor::value_at(std::initializer_list<int> idx) const {
  const auto& s = shape();
  if (idx.size() != s.size()) throw std::invalid_argument("tensor: index rank mismatch for " + shape_string(s));
  std::size_t off = 0;
  int axis = 0;
  for (int i : idx) {
    if (i < 0 || i >= s[axis]) throw std::out_of_range("tensor: index out of range for " + shape_string(s));
    off = off * static_cast<std::size_t>(s[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return (*impl_->value)[off];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!impl_) throw std::logic_error("tensor: undefined handle");
  impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) return {};
  return {impl_->grad.data(), impl_->grad.size()};
}

std::span<double> Tensor::grad_mut() {
  ensure_grad();
  return {impl_->grad.data(), impl_->grad.size()};
}

void Tensor::ensure_grad() {
  if (!impl_) throw std::logic_error("tensor: undefined handle");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->value->size(), 0.0);
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) impl_->grad.assign(impl_->value->size(), 0.0);
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  Tensor t(impl_->shape, *impl_->value, impl_->requires_grad);
  return t;
}

Tensor Tensor::detached() const {
  if (!impl_) return {};
  Tensor t;
  t.impl_ = std::make_shared<Impl>();
  t.impl_->shape = impl_->shape;
  t.impl_->value = impl_->value;  // shared buffer
  t.impl_->requires_grad = false;
  return t;
}

bool Tensor::same_buffer(const Tensor& other) const {
  return impl_ && other.impl_ && impl_->value == other.impl_->value;
}

// ---- Tape ----------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) {
  nodes_.push_back(std::move(backward_fn));
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, shape is " + shape_string(loss.shape()));
  }
  if (nodes_.empty()) throw std::logic_error("backward: tape is empty");
  if (consumed_) throw std::logic_error("backward: tape already swept");
  consumed_ = true;
  Tensor seed = loss;  // shallow handle
  seed.grad_mut()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

}  // namespace vqlab
