#pragma once

#include <cstdint>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "gfbs/errors.hpp"

namespace gfbs {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

std::string to_string(DType dtype);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major tensor with an optional gradient buffer.
//
// A Tensor is a handle: copies share storage, `clone()` makes a deep copy.
// The tape relies on this so that backward closures can accumulate into the
// same buffers the caller holds.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f32);

  static Tensor zeros(Shape shape, DType dtype = DType::f32) {
    return Tensor(std::move(shape), dtype);
  }
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::span<const double> values,
                            DType dtype = DType::f32);
  static Tensor from_values(Shape shape, std::initializer_list<double> values,
                            DType dtype = DType::f32) {
    return from_values(std::move(shape),
                       std::span<const double>(values.begin(), values.size()),
                       dtype);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(std::size_t axis) const;
  std::size_t ndim() const { return shape().size(); }
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  double at(std::int64_t flat) const;
  void set(std::int64_t flat, double value);
  double item() const;
  std::vector<double> to_vector() const;
  void fill(double value);

  // Gradient buffer. `grad<T>()` allocates a zeroed buffer on first use. It
  // is writable through const handles: backward closures hold const copies.
  bool has_grad() const;
  template <class T>
  std::span<T> grad() const;
  double grad_at(std::int64_t flat) const;
  std::vector<double> grad_vector() const;
  void zero_grad();
  void drop_grad();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  Tensor clone() const;
  // Overwrites this tensor's values with `other`'s (same shape, any dtype).
  void copy_from(const Tensor& other);
  Tensor to(DType dtype) const;
  // New tensor with the same element buffer contents, different shape.
  Tensor reshaped(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  bool all_finite() const;

 private:
  // 64-byte aligned so vectorized loops take the same path for every
  // buffer; otherwise rounding would depend on heap layout.
  template <class T>
  struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
  };
  template <class T>
  using Storage = std::vector<T, AlignedAllocator<T>>;
  using Buffer = std::variant<Storage<float>, Storage<double>>;
  struct Impl {
    Shape shape;
    DType dtype = DType::f32;
    Buffer data;
    Buffer grad;
    bool has_grad = false;
    bool requires_grad = false;
  };

  Impl& impl();
  const Impl& impl() const;

  std::shared_ptr<Impl> impl_;
};

// Invoke `fn.template operator()<T>()` with T matching `dtype`.
template <class Fn>
decltype(auto) dispatch(DType dtype, Fn&& fn) {
  if (dtype == DType::f64) return fn.template operator()<double>();
  return fn.template operator()<float>();
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, double>) {
    return DType::f64;
  } else {
    static_assert(std::is_same_v<T, float>, "only f32/f64 tensors");
    return DType::f32;
  }
}

}  // namespace gfbs
