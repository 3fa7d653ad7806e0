#include "fuseloc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fuseloc {

Precision parse_precision(const std::string& text) {
  if (text == "f32") return Precision::f32;
  if (text == "f64") return Precision::f64;
  throw std::invalid_argument("precision must be f32 or f64, got '" + text + "'");
}

std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

ShapeError::ShapeError(const std::string& op, const std::string& axis, const std::string& detail)
    : std::invalid_argument(op + ": shape mismatch on axis '" + axis + "': " + detail),
      axis_(axis) {}

// ---------------------------------------------------------------------------

Parameter& ParameterStore::add(std::string name, Shape shape, ParamGroup group, bool trainable) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Parameter& p = params_.emplace_back();
  p.name = std::move(name);
  p.value.assign(numel(shape), 0.0);
  p.grad.assign(p.value.size(), 0.0);
  p.shape = std::move(shape);
  p.group = group;
  p.trainable = trainable;
  return p;
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), 0.0);
}

void ParameterStore::round_to(Precision precision) {
  if (precision != Precision::f32) return;
  for (auto& p : params_)
    for (auto& v : p.value) v = static_cast<double>(static_cast<float>(v));
}

std::size_t ParameterStore::trainable_count() const {
  return static_cast<std::size_t>(
      std::count_if(params_.begin(), params_.end(), [](const Parameter& p) { return p.trainable; }));
}

// ---------------------------------------------------------------------------

Tape& Var::tape() const {
  if (!tape_) throw std::logic_error("use of an unbound Var");
  return *tape_;
}
const Shape& Var::shape() const { return tape().shape(*this); }
std::size_t Var::size() const { return value().size(); }
std::span<const double> Var::value() const { return tape().value(*this); }
std::span<const double> Var::grad() const { return tape().grad(*this); }
bool Var::requires_grad() const { return tape().requires_grad(*this); }

double Var::item() const {
  auto v = value();
  if (v.size() != 1) throw ShapeError("item", "all", "expected a scalar, got " + to_string(shape()));
  return v[0];
}

// ---------------------------------------------------------------------------

Tape::Tape(Precision precision, bool training) : precision_(precision), training_(training) {}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw std::logic_error("Var does not belong to this tape");
  return nodes_[v.id_];
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw std::logic_error("Var does not belong to this tape");
  return nodes_[v.id_];
}

Var Tape::push(Node n) {
  if (n.value.size() != numel(n.shape))
    throw ShapeError("record", "all",
                     "value count " + std::to_string(n.value.size()) + " does not match " + to_string(n.shape));
  if (precision_ == Precision::f32)
    for (auto& x : n.value) x = static_cast<double>(static_cast<float>(x));
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Shape shape, std::vector<double> values) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  return push(std::move(n));
}

Var Tape::variable(Shape shape, std::vector<double> values) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  Node n;
  n.shape = p.shape;
  n.value = p.value;
  n.param = &p;
  n.requires_grad = p.trainable;
  return push(std::move(n));
}

Var Tape::record(Shape shape, std::vector<double> values, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  return record(std::move(shape), std::move(values), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Shape shape, std::vector<double> values, std::span<const Var> inputs,
                 BackwardFn backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  for (const Var& in : inputs)
    if (in.valid() && node(in).requires_grad) n.requires_grad = true;
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

std::span<double> Tape::grad_sink(Var v) {
  Node& n = node(v);
  if (!n.requires_grad) return {};
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  Node& root = node(loss);
  if (root.value.size() != 1)
    throw ShapeError("backward", "all", "loss must be a scalar, got " + to_string(root.shape));
  if (backward_done_) throw std::logic_error("backward() called twice on the same tape");
  backward_done_ = true;
  if (!root.requires_grad) {
    root.grad = {1.0};
    return;
  }
  root.grad.assign(1, 1.0);
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, Var(this, i), n.grad);
  }
  for (auto& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    auto& g = n.param->grad;
    if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
  }
}

}  // namespace fuseloc
