#pragma once

// Define-by-run reverse-mode differentiation over dense row-major arrays.
//
// A Tape owns every intermediate produced during one forward pass. Values are
// stored as double; when the tape runs at Precision::f32 every recorded value
// is rounded to the nearest float so results match a single-precision run.
// Persistent trainable state lives in Parameter objects outside the tape and
// is bound into a pass with Tape::parameter().

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fuseloc {

enum class Precision { f32, f64 };

Precision parse_precision(const std::string& text);
std::string to_string(Precision p);

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes do not conform. axis() names the offending axis.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& axis, const std::string& detail);
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

/// NaN/Inf encountered where a finite number is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ParamGroup { main, image };

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  ParamGroup group = ParamGroup::main;
  // Buffers (batch-norm running statistics) are serialized but never optimized.
  bool trainable = true;
  // Lower clamp applied after each optimizer step.
  double min_value = -std::numeric_limits<double>::infinity();

  std::size_t size() const { return value.size(); }
};

/// Owns parameters with stable addresses, in registration order.
class ParameterStore {
 public:
  Parameter& add(std::string name, Shape shape, ParamGroup group = ParamGroup::main,
                 bool trainable = true);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  void zero_grad();
  void round_to(Precision p);

  std::size_t size() const { return params_.size(); }
  std::size_t trainable_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }

  const Shape& shape() const;
  std::size_t size() const;
  std::span<const double> value() const;
  // Empty until backward() has reached this node.
  std::span<const double> grad() const;
  bool requires_grad() const;
  double item() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Called with the node itself and the gradient of its output; accumulates
  // into the inputs' gradients through grad_sink().
  using BackwardFn = std::function<void(Tape&, Var, std::span<const double>)>;

  explicit Tape(Precision precision = Precision::f64, bool training = true);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const noexcept { return precision_; }
  bool training() const noexcept { return training_; }
  void set_training(bool training) noexcept { training_ = training; }

  Var constant(Shape shape, std::vector<double> values);
  Var scalar(double value) { return constant({1}, {value}); }
  /// Leaf that requires a gradient but is not bound to a Parameter.
  Var variable(Shape shape, std::vector<double> values);
  /// Leaf bound to a persistent parameter; backward() accumulates into p.grad.
  Var parameter(Parameter& p);

  /// Records an op output. requires_grad is inherited from the inputs.
  Var record(Shape shape, std::vector<double> values, std::initializer_list<Var> inputs,
             BackwardFn backward);
  Var record(Shape shape, std::vector<double> values, std::span<const Var> inputs,
             BackwardFn backward);

  const Shape& shape(Var v) const { return node(v).shape; }
  std::span<const double> value(Var v) const { return node(v).value; }
  std::span<const double> grad(Var v) const { return node(v).grad; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Gradient accumulator for an input during backward. Empty span when the
  /// input does not require a gradient; callers skip work in that case.
  std::span<double> grad_sink(Var v);

  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

  double round(double x) const noexcept {
    return precision_ == Precision::f32 ? static_cast<double>(static_cast<float>(x)) : x;
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  Var push(Node n);

  Precision precision_;
  bool training_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
};

}  // namespace fuseloc
