#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "hloba/diffcore/tensor.hpp"

namespace hloba::diffcore {

/// The closed set of differentiable operations. Anything else is rejected at construction.
enum class Primitive { leaf, matmul, add, mul, tanh, sum_squares, gather, scale };

std::string_view primitive_name(Primitive p) noexcept;

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Wengert list for reverse-mode differentiation. Nodes are appended in evaluation order,
/// so the recording order is already a topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// a (m x k) times b (k x n).
  Var matmul(Var a, Var b);
  /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
  Var add(Var a, Var b);
  /// Elementwise product with the same broadcasting rule as add.
  Var mul(Var a, Var b);
  Var tanh(Var a);
  /// Sum of squared entries, shape {1}.
  Var sum_squares(Var a);
  /// Selects columns of `a` (the last axis).
  Var gather(Var a, std::vector<Eigen::Index> columns);
  Var scale(Var a, double factor);

  /// Name-based construction used by loss programs assembled from a description.
  Var apply(std::string_view primitive, std::span<const Var> inputs);

  /// Reverse sweep seeded by one or more (node, dL/dnode) pairs.
  void backward(std::span<const std::pair<Var, Tensor>> seeds);
  /// Reverse sweep from a scalar node with seed 1.
  void backward(Var scalar_loss);

  /// Accumulated gradient of a node after backward(); zeros if the node was not reached.
  Tensor grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

 private:
  struct Node {
    Primitive op = Primitive::leaf;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::size_t a = 0;
    std::size_t b = 0;
    double factor = 0.0;
    std::vector<Eigen::Index> columns;
  };

  Var push(Node node);
  void check_owner(Var v) const;
  void accumulate(std::size_t id, const Eigen::Ref<const RowMatrix>& g);

  std::vector<Node> nodes_;
};

/// a - b, built from add and scale.
Var sub(Var a, Var b);

/// A scalar loss written against the tape; receives one leaf per parameter tensor.
using LossProgram = std::function<Var(Tape&, std::span<const Var>)>;

/// Evaluates the program without recording gradients.
double evaluate(const LossProgram& program, const std::vector<Tensor>& parameters);

/// Loss value and d(loss)/d(parameter) for each parameter.
std::pair<double, std::vector<Tensor>> value_and_grad(const LossProgram& program,
                                                      const std::vector<Tensor>& parameters);

std::vector<Tensor> grad(const LossProgram& program, const std::vector<Tensor>& parameters);

/// Central differences (L(p + h e_i) - L(p - h e_i)) / 2h for every coordinate of every parameter.
std::vector<Tensor> finite_difference_gradient(const LossProgram& program, const std::vector<Tensor>& parameters,
                                               double h);

/// Worst relative error between two gradient lists, measured as ||a - b|| / max(||b||, floor)
/// per tensor.
double max_relative_error(const std::vector<Tensor>& a, const std::vector<Tensor>& b, double floor = 1e-12);

}  // namespace hloba::diffcore
