#include "gfbs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace gfbs {

std::string to_string(DType dtype) {
  return dtype == DType::f64 ? "f64" : "f32";
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw ConfigError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d <= 0) {
      throw ConfigError("tensor dimensions must be positive, got " + shape_to_string(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, DType dtype) : impl_(std::make_shared<Impl>()) {
  check_shape(shape);
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  impl_->shape = std::move(shape);
  impl_->dtype = dtype;
  if (dtype == DType::f64) {
    impl_->data = Storage<double>(n, 0.0);
  } else {
    impl_->data = Storage<float>(n, 0.0f);
  }
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw ConfigError("value count " + std::to_string(values.size()) +
                      " does not match shape " + shape_to_string(t.shape()));
  }
  dispatch(dtype, [&]<class T>() {
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor::Impl& Tensor::impl() {
  if (!impl_) throw ConfigError("use of an undefined tensor");
  return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw ConfigError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::int64_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ConfigError("axis out of range");
  return s[axis];
}

std::int64_t Tensor::numel() const { return shape_numel(shape()); }

DType Tensor::dtype() const { return impl().dtype; }

template <class T>
std::span<T> Tensor::data() {
  auto* v = std::get_if<Storage<T>>(&impl().data);
  if (!v) throw ConfigError("tensor dtype is " + to_string(dtype()) + ", accessed as other");
  return {v->data(), v->size()};
}

template <class T>
std::span<const T> Tensor::data() const {
  const auto* v = std::get_if<Storage<T>>(&impl().data);
  if (!v) throw ConfigError("tensor dtype is " + to_string(dtype()) + ", accessed as other");
  return {v->data(), v->size()};
}

template <class T>
std::span<T> Tensor::grad() const {
  auto& im = const_cast<Impl&>(impl());
  if (!im.has_grad) {
    im.grad = Storage<T>(static_cast<std::size_t>(shape_numel(im.shape)), T(0));
    im.has_grad = true;
  }
  auto* v = std::get_if<Storage<T>>(&im.grad);
  if (!v) throw ConfigError("gradient dtype mismatch");
  return {v->data(), v->size()};
}

template std::span<float> Tensor::data<float>();
template std::span<double> Tensor::data<double>();
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::grad<float>() const;
template std::span<double> Tensor::grad<double>() const;

double Tensor::at(std::int64_t flat) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(flat)); },
                    impl().data);
}

void Tensor::set(std::int64_t flat, double value) {
  std::visit([&](auto& v) { v.at(flat) = static_cast<typename std::decay_t<decltype(v)>::value_type>(value); },
             impl().data);
}

double Tensor::item() const {
  if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_to_string(shape()));
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    impl().data);
}

void Tensor::fill(double value) {
  std::visit(
      [&](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::fill(v.begin(), v.end(), static_cast<T>(value));
      },
      impl().data);
}

bool Tensor::has_grad() const { return impl_ && impl_->has_grad; }

double Tensor::grad_at(std::int64_t flat) const {
  if (!has_grad()) return 0.0;
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(flat)); }, impl().grad);
}

std::vector<double> Tensor::grad_vector() const {
  if (!has_grad()) return std::vector<double>(static_cast<std::size_t>(numel()), 0.0);
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    impl().grad);
}

void Tensor::zero_grad() {
  if (!has_grad()) return;
  std::visit(
      [](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        std::fill(v.begin(), v.end(), T(0));
      },
      impl().grad);
}

void Tensor::drop_grad() {
  auto& im = impl();
  im.has_grad = false;
  im.grad = Storage<float>{};
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  impl().requires_grad = flag;
  return *this;
}

Tensor Tensor::clone() const {
  Tensor out;
  out.impl_ = std::make_shared<Impl>(impl());
  return out;
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape()) {
    throw ConfigError("copy_from: shape mismatch " + shape_to_string(shape()) + " vs " +
                      shape_to_string(other.shape()));
  }
  dispatch(dtype(), [&]<class T>() {
    auto dst = data<T>();
    std::visit(
        [&](const auto& src) {
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
        },
        other.impl().data);
  });
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  Tensor out(shape(), target);
  dispatch(target, [&]<class T>() {
    auto dst = out.data<T>();
    std::visit(
        [&](const auto& src) {
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
        },
        impl().data);
  });
  out.set_requires_grad(requires_grad());
  return out;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  check_shape(new_shape);
  if (shape_numel(new_shape) != numel()) {
    throw ConfigError("cannot reshape " + shape_to_string(shape()) + " to " +
                      shape_to_string(new_shape));
  }
  Tensor out;
  out.impl_ = std::make_shared<Impl>();
  out.impl_->shape = std::move(new_shape);
  out.impl_->dtype = dtype();
  out.impl_->data = impl().data;
  return out;
}

bool Tensor::all_finite() const {
  return std::visit(
      [](const auto& v) {
        return std::all_of(v.begin(), v.end(), [](auto x) { return std::isfinite(x); });
      },
      impl().data);
}

}  // namespace gfbs
