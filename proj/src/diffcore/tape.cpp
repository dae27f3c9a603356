#include "hloba/diffcore/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hloba/error.hpp"

namespace hloba::diffcore {

std::string_view primitive_name(Primitive p) noexcept {
  switch (p) {
    case Primitive::leaf: return "leaf";
    case Primitive::matmul: return "matmul";
    case Primitive::add: return "add";
    case Primitive::mul: return "mul";
    case Primitive::tanh: return "tanh";
    case Primitive::sum_squares: return "sum_squares";
    case Primitive::gather: return "gather";
    case Primitive::scale: return "scale";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("Var is not attached to a tape");
  return tape_->value(id_);
}

namespace {

bool elementwise_compatible(const Tensor& a, const Tensor& b) {
  return a.rows() == b.rows() && a.cols() == b.cols();
}

bool row_broadcast(const Tensor& a, const Tensor& b) { return b.rows() == 1 && a.rows() > 1 && a.cols() == b.cols(); }

std::string shape_string(const Tensor& t) {
  std::string s = "{";
  for (std::size_t i = 0; i < t.shape().size(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.shape()[i]);
  }
  return s + "}";
}

}  // namespace

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(Var v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("Var belongs to a different tape");
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.op = Primitive::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  const Tensor& av = nodes_[a.id()].value;
  const Tensor& bv = nodes_[b.id()].value;
  if (av.cols() != bv.rows()) {
    throw ContractError("matmul shape mismatch " + shape_string(av) + " x " + shape_string(bv));
  }
  Node n;
  n.op = Primitive::matmul;
  n.a = a.id();
  n.b = b.id();
  n.value = Tensor::zeros({static_cast<std::size_t>(av.rows()), static_cast<std::size_t>(bv.cols())});
  n.value.matrix().noalias() = av.matrix() * bv.matrix();
  n.requires_grad = nodes_[a.id()].requires_grad || nodes_[b.id()].requires_grad;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  const Tensor& av = nodes_[a.id()].value;
  const Tensor& bv = nodes_[b.id()].value;
  Node n;
  n.op = Primitive::add;
  n.a = a.id();
  n.b = b.id();
  n.value = av;
  if (elementwise_compatible(av, bv)) {
    n.value.matrix() += bv.matrix();
  } else if (row_broadcast(av, bv)) {
    n.value.matrix().rowwise() += bv.matrix().row(0);
  } else {
    throw ContractError("add shape mismatch " + shape_string(av) + " + " + shape_string(bv));
  }
  n.requires_grad = nodes_[a.id()].requires_grad || nodes_[b.id()].requires_grad;
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  check_owner(a);
  check_owner(b);
  const Tensor& av = nodes_[a.id()].value;
  const Tensor& bv = nodes_[b.id()].value;
  Node n;
  n.op = Primitive::mul;
  n.a = a.id();
  n.b = b.id();
  n.value = av;
  if (elementwise_compatible(av, bv)) {
    n.value.matrix().array() *= bv.matrix().array();
  } else if (row_broadcast(av, bv)) {
    n.value.matrix().array().rowwise() *= bv.matrix().row(0).array();
  } else {
    throw ContractError("mul shape mismatch " + shape_string(av) + " * " + shape_string(bv));
  }
  n.requires_grad = nodes_[a.id()].requires_grad || nodes_[b.id()].requires_grad;
  return push(std::move(n));
}

Var Tape::tanh(Var a) {
  check_owner(a);
  Node n;
  n.op = Primitive::tanh;
  n.a = a.id();
  n.value = nodes_[a.id()].value;
  n.value.flat() = n.value.flat().array().tanh();
  n.requires_grad = nodes_[a.id()].requires_grad;
  return push(std::move(n));
}

Var Tape::sum_squares(Var a) {
  check_owner(a);
  Node n;
  n.op = Primitive::sum_squares;
  n.a = a.id();
  n.value = Tensor::scalar(nodes_[a.id()].value.flat().squaredNorm());
  n.requires_grad = nodes_[a.id()].requires_grad;
  return push(std::move(n));
}

Var Tape::gather(Var a, std::vector<Eigen::Index> columns) {
  check_owner(a);
  const Tensor& av = nodes_[a.id()].value;
  for (Eigen::Index c : columns) {
    if (c < 0 || c >= av.cols()) throw ContractError("gather column " + std::to_string(c) + " out of range");
  }
  if (columns.empty()) throw ContractError("gather needs at least one column");
  Node n;
  n.op = Primitive::gather;
  n.a = a.id();
  std::vector<std::size_t> shape = av.shape();
  shape.back() = columns.size();
  n.value = Tensor::zeros(shape);
  auto out = n.value.matrix();
  const auto in = av.matrix();
  for (std::size_t k = 0; k < columns.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = in.col(columns[k]);
  n.columns = std::move(columns);
  n.requires_grad = nodes_[a.id()].requires_grad;
  return push(std::move(n));
}

Var Tape::scale(Var a, double factor) {
  check_owner(a);
  Node n;
  n.op = Primitive::scale;
  n.a = a.id();
  n.factor = factor;
  n.value = nodes_[a.id()].value;
  n.value.flat() *= factor;
  n.requires_grad = nodes_[a.id()].requires_grad;
  return push(std::move(n));
}

Var Tape::apply(std::string_view primitive, std::span<const Var> inputs) {
  auto need = [&](std::size_t k) {
    if (inputs.size() != k) {
      throw ContractError(std::string(primitive) + " takes " + std::to_string(k) + " input(s), got " +
                          std::to_string(inputs.size()));
    }
  };
  if (primitive == "matmul") {
    need(2);
    return matmul(inputs[0], inputs[1]);
  }
  if (primitive == "add") {
    need(2);
    return add(inputs[0], inputs[1]);
  }
  if (primitive == "mul") {
    need(2);
    return mul(inputs[0], inputs[1]);
  }
  if (primitive == "tanh") {
    need(1);
    return tanh(inputs[0]);
  }
  if (primitive == "sum_squares") {
    need(1);
    return sum_squares(inputs[0]);
  }
  throw ContractError("unsupported primitive '" + std::string(primitive) + "'");
}

void Tape::accumulate(std::size_t id, const Eigen::Ref<const RowMatrix>& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = Tensor::zeros(n.value.shape());
    n.has_grad = true;
  }
  n.grad.matrix() += g;
}

void Tape::backward(std::span<const std::pair<Var, Tensor>> seeds) {
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  std::size_t top = 0;
  for (const auto& [v, seed] : seeds) {
    check_owner(v);
    const Tensor& val = nodes_[v.id()].value;
    if (seed.size() != val.size()) throw ContractError("seed shape does not match node " + shape_string(val));
    accumulate(v.id(), Eigen::Map<const RowMatrix>(seed.values().data(), val.rows(), val.cols()));
    top = std::max(top, v.id() + 1);
  }

  for (std::size_t id = top; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.has_grad || n.op == Primitive::leaf) continue;
    const RowMatrix g = n.grad.matrix();
    switch (n.op) {
      case Primitive::matmul: {
        const auto A = nodes_[n.a].value.matrix();
        const auto B = nodes_[n.b].value.matrix();
        if (nodes_[n.a].requires_grad) accumulate(n.a, g * B.transpose());
        if (nodes_[n.b].requires_grad) accumulate(n.b, A.transpose() * g);
        break;
      }
      case Primitive::add: {
        accumulate(n.a, g);
        if (nodes_[n.b].requires_grad) {
          if (row_broadcast(nodes_[n.a].value, nodes_[n.b].value)) {
            accumulate(n.b, g.colwise().sum());
          } else {
            accumulate(n.b, g);
          }
        }
        break;
      }
      case Primitive::mul: {
        const auto A = nodes_[n.a].value.matrix();
        const auto B = nodes_[n.b].value.matrix();
        const bool bcast = row_broadcast(nodes_[n.a].value, nodes_[n.b].value);
        if (nodes_[n.a].requires_grad) {
          if (bcast) {
            RowMatrix ga = g;
            ga.array().rowwise() *= B.row(0).array();
            accumulate(n.a, ga);
          } else {
            accumulate(n.a, (g.array() * B.array()).matrix());
          }
        }
        if (nodes_[n.b].requires_grad) {
          const RowMatrix gb = (g.array() * A.array()).matrix();
          if (bcast) {
            accumulate(n.b, gb.colwise().sum());
          } else {
            accumulate(n.b, gb);
          }
        }
        break;
      }
      case Primitive::tanh: {
        const auto Y = n.value.matrix();
        accumulate(n.a, (g.array() * (1.0 - Y.array().square())).matrix());
        break;
      }
      case Primitive::sum_squares: {
        accumulate(n.a, 2.0 * g(0, 0) * nodes_[n.a].value.matrix());
        break;
      }
      case Primitive::gather: {
        const Tensor& in = nodes_[n.a].value;
        RowMatrix ga = RowMatrix::Zero(in.rows(), in.cols());
        for (std::size_t k = 0; k < n.columns.size(); ++k) ga.col(n.columns[k]) += g.col(static_cast<Eigen::Index>(k));
        accumulate(n.a, ga);
        break;
      }
      case Primitive::scale: accumulate(n.a, n.factor * g); break;
      case Primitive::leaf: break;
    }
  }
}

void Tape::backward(Var scalar_loss) {
  check_owner(scalar_loss);
  if (nodes_[scalar_loss.id()].value.size() != 1) {
    throw ContractError("backward from a non-scalar node requires an explicit seed");
  }
  const std::pair<Var, Tensor> seed{scalar_loss, Tensor::scalar(1.0)};
  backward(std::span<const std::pair<Var, Tensor>>(&seed, 1));
}

Tensor Tape::grad(Var v) const {
  check_owner(v);
  const Node& n = nodes_[v.id()];
  if (!n.has_grad) return Tensor::zeros(n.value.shape());
  return n.grad;
}

Var sub(Var a, Var b) {
  Tape* tape = a.tape();
  if (tape == nullptr || tape != b.tape()) throw ContractError("sub operands must share a tape");
  return tape->add(a, tape->scale(b, -1.0));
}

namespace {

Var run_program(Tape& tape, const LossProgram& program, const std::vector<Tensor>& parameters, bool requires_grad,
                std::vector<Var>& leaves) {
  leaves.clear();
  leaves.reserve(parameters.size());
  for (const Tensor& p : parameters) leaves.push_back(tape.leaf(p, requires_grad));
  Var loss = program(tape, leaves);
  if (loss.tape() != &tape) throw ContractError("loss program returned a Var from another tape");
  if (loss.value().size() != 1) throw ContractError("loss program must return a scalar");
  return loss;
}

}  // namespace

double evaluate(const LossProgram& program, const std::vector<Tensor>& parameters) {
  Tape tape;
  std::vector<Var> leaves;
  return run_program(tape, program, parameters, false, leaves).value().item();
}

std::pair<double, std::vector<Tensor>> value_and_grad(const LossProgram& program,
                                                      const std::vector<Tensor>& parameters) {
  Tape tape;
  std::vector<Var> leaves;
  Var loss = run_program(tape, program, parameters, true, leaves);
  tape.backward(loss);
  std::vector<Tensor> grads;
  grads.reserve(leaves.size());
  for (Var v : leaves) grads.push_back(tape.grad(v));
  return {loss.value().item(), std::move(grads)};
}

std::vector<Tensor> grad(const LossProgram& program, const std::vector<Tensor>& parameters) {
  return value_and_grad(program, parameters).second;
}

std::vector<Tensor> finite_difference_gradient(const LossProgram& program, const std::vector<Tensor>& parameters,
                                               double h) {
  if (!(h > 0.0)) throw ContractError("finite-difference step must be positive");
  std::vector<Tensor> work = parameters;
  std::vector<Tensor> out;
  out.reserve(parameters.size());
  for (std::size_t p = 0; p < work.size(); ++p) {
    Tensor g = Tensor::zeros(work[p].shape());
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const double saved = work[p].values()[i];
      work[p].values()[i] = saved + h;
      const double up = evaluate(program, work);
      work[p].values()[i] = saved - h;
      const double down = evaluate(program, work);
      work[p].values()[i] = saved;
      g.values()[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

double max_relative_error(const std::vector<Tensor>& a, const std::vector<Tensor>& b, double floor) {
  if (a.size() != b.size()) throw ContractError("gradient lists differ in length");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].same_shape(b[i])) throw ContractError("gradient shapes differ");
    const double denom = std::max(b[i].flat().norm(), floor);
    worst = std::max(worst, (a[i].flat() - b[i].flat()).norm() / denom);
  }
  return worst;
}

}  // namespace hloba::diffcore
