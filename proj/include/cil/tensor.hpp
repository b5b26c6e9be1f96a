#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cil {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

/// Dense row-major tensor of doubles with an optional gradient buffer of the
/// same shape. Only tensors registered on a Tape via Tape::watch ever receive
/// gradient writes.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double item() const;

  bool has_grad() const noexcept { return grad_.has_value(); }
  std::span<double> grad();
  std::span<const double> grad() const;
  /// Allocates a zeroed gradient buffer if none exists.
  std::span<double> ensure_grad();
  void zero_grad() noexcept;
  void clear_grad() noexcept { grad_.reset(); }

  /// Same data, new shape. Throws DimensionError when element counts differ.
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const noexcept { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) noexcept : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

struct TapeDiagnostics {
  /// Rows whose norm fell below the l2-normalization guard.
  std::size_t guarded_normalizations = 0;
};

/// Append-only record of a forward computation. Nodes are stored in
/// insertion order, which is a topological order; backward() walks them once
/// in reverse and may be called only once per tape.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives gradients.
  Var constant(Tensor value);
  /// Leaf bound to an external parameter; backward() accumulates into
  /// parameter.grad(). The parameter must outlive the tape.
  Var watch(Tensor& parameter);
  /// Records an operation output. `backward` reads grad(self) and accumulates
  /// into grad(input) for inputs that require gradients.
  Var record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward);

  void backward(Var loss);
  bool consumed() const noexcept { return consumed_; }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::uint32_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }
  std::span<const std::uint32_t> inputs(std::uint32_t id) const { return nodes_.at(id).inputs; }
  /// Gradient accumulator for a node, zero-allocated on first access.
  std::span<double> grad(std::uint32_t id);

  TapeDiagnostics& diagnostics() noexcept { return diagnostics_; }
  const TapeDiagnostics& diagnostics() const noexcept { return diagnostics_; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    Tensor* sink = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
  TapeDiagnostics diagnostics_;
};

}  // namespace cil
