#ifndef ROBOMAL_TENSOR_HPP
#define ROBOMAL_TENSOR_HPP

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace robomal {

/// Dimensions of a dense tensor, rank 0 (scalar) through 4.
class Shape {
 public:
  static constexpr std::size_t kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) {
    if (dims.size() > kMaxRank) throw std::invalid_argument("Shape: rank exceeds 4");
    for (std::size_t d : dims) dims_[rank_++] = d;
  }
  template <typename It>
  Shape(It first, It last) {
    for (; first != last; ++first) {
      if (rank_ == kMaxRank) throw std::invalid_argument("Shape: rank exceeds 4");
      dims_[rank_++] = static_cast<std::size_t>(*first);
    }
  }

  std::size_t rank() const { return rank_; }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  std::size_t& operator[](std::size_t axis) { return dims_.at(axis); }
  std::size_t back() const { return dims_[rank_ - 1]; }

  /// Number of elements; 1 for a scalar.
  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }

  /// Product of dims in [first, last).
  std::size_t span_size(std::size_t first, std::size_t last) const {
    std::size_t n = 1;
    for (std::size_t i = first; i < last; ++i) n *= dims_[i];
    return n;
  }

  Shape with(std::size_t axis, std::size_t value) const {
    Shape s = *this;
    s[axis] = value;
    return s;
  }

  friend bool operator==(const Shape& a, const Shape& b) {
    return a.rank_ == b.rank_ && std::equal(a.dims_.begin(), a.dims_.begin() + a.rank_, b.dims_.begin());
  }

  std::string str() const {
    std::string out = "[";
    for (std::size_t i = 0; i < rank_; ++i) {
      if (i) out += ",";
      out += std::to_string(dims_[i]);
    }
    return out + "]";
  }

 private:
  std::array<std::size_t, kMaxRank> dims_{};
  std::size_t rank_ = 0;
};

/// Every buffer starts on a cache line, so Eigen's vectorised loops peel the
/// same way on every call and results are bitwise reproducible.
template <typename T>
struct CacheAlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  CacheAlignedAllocator() = default;
  template <typename U>
  CacheAlignedAllocator(const CacheAlignedAllocator<U>&) noexcept {}

  // Over-allocates from malloc and stores the raw pointer just below the
  // aligned block; glibc's aligned allocation path is several times slower.
  T* allocate(std::size_t n) {
    constexpr std::size_t align = static_cast<std::size_t>(kAlign);
    void* raw = std::malloc(n * sizeof(T) + align);
    if (!raw) throw std::bad_alloc();
    auto addr = (reinterpret_cast<std::uintptr_t>(raw) + align) & ~(align - 1);
    reinterpret_cast<void**>(addr)[-1] = raw;
    return reinterpret_cast<T*>(addr);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(reinterpret_cast<void**>(p)[-1]); }
  // default-initialise, so sized construction without a fill value skips zeroing
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  friend bool operator==(const CacheAlignedAllocator&, const CacheAlignedAllocator<U>&) {
    return true;
  }
};

/// Dense row-major tensor. The shape always describes exactly data().size() elements.
template <typename Scalar>
class BasicTensor {
 public:
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;
  using ArrayMap = Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>;

  /// Empty tensor of shape [0].
  BasicTensor() : shape_{0} {}
  explicit BasicTensor(const Shape& shape, Scalar fill = Scalar(0)) : shape_(shape), data_(shape.numel(), fill) {}
  BasicTensor(const Shape& shape, const std::vector<Scalar>& values)
      : shape_(shape), data_(values.begin(), values.end()) {
    if (data_.size() != shape_.numel())
      throw std::invalid_argument("Tensor: " + std::to_string(data_.size()) + " values do not fill shape " +
                                  shape_.str());
  }

  static BasicTensor scalar(Scalar v) { return BasicTensor(Shape{}, std::vector<Scalar>{v}); }
  /// Storage with unspecified contents; callers must overwrite every element.
  static BasicTensor uninitialized(const Shape& shape) {
    BasicTensor t;
    t.shape_ = shape;
    t.data_ = Storage(shape.numel());
    return t;
  }
  static BasicTensor zeros_like(const BasicTensor& t) { return BasicTensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.rank(); }
  std::size_t size() const { return data_.size(); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }
  Scalar item() const {
    if (data_.size() != 1) throw std::logic_error("Tensor::item on tensor of shape " + shape_.str());
    return data_[0];
  }

  /// Reinterprets the buffer under a new shape with the same element count.
  void reshape(const Shape& s) {
    if (s.numel() != data_.size()) throw std::invalid_argument("Tensor::reshape " + shape_.str() + " -> " + s.str());
    shape_ = s;
  }

  /// Row-major rows x cols view of the buffer; rows * cols must equal size().
  MatrixMap as_matrix(std::size_t rows, std::size_t cols) {
    return MatrixMap(data_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }
  ConstMatrixMap as_matrix(std::size_t rows, std::size_t cols) const {
    return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  }
  /// Rank-2 view; leading dims are folded into rows.
  MatrixMap matrix() { return as_matrix(data_.size() / last_dim(), last_dim()); }
  ConstMatrixMap matrix() const { return as_matrix(data_.size() / last_dim(), last_dim()); }

  ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t last_dim() const { return shape_.rank() == 0 ? 1 : std::max<std::size_t>(shape_.back(), 1); }

  Shape shape_;
  using Storage = std::vector<Scalar, CacheAlignedAllocator<Scalar>>;
  Storage data_;
};

using Tensor = BasicTensor<double>;

}  // namespace robomal

#endif  // ROBOMAL_TENSOR_HPP
