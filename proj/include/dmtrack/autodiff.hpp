#pragma once

// Reverse-mode automatic differentiation over small dense matrices.
//
// A Tape records primitive operations in execution order; each recorded node
// holds its value (an Eigen matrix, scalars are 1x1) and a closure that pushes
// its adjoint to its parents. backward() walks the record in reverse exactly
// once. Var is a cheap handle (tape pointer + node index).

#include <Eigen/Dense>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace dmt::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  double scalar() const;
  double operator()(Eigen::Index i, Eigen::Index j = 0) const { return value()(i, j); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// Receives the node's adjoint; must add contributions into its parents.
  using Backprop = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked.
  Var variable(Matrix value);
  Var variable(double value);
  /// Leaf without gradient; operations on constants only are not recorded for backprop.
  Var constant(Matrix value);
  Var constant(double value);

  /// Records a primitive. `parents` decide whether the node needs a backprop
  /// closure at all; if none of them carries gradient, `bp` is dropped.
  Var record(Matrix value, std::initializer_list<Var> parents, Backprop bp);
  Var record(Matrix value, std::span<const Var> parents, Backprop bp);

  /// Reverse sweep from a scalar root. A second call without clear() throws.
  void backward(const Var& root);

  /// Adjoint of `v` after backward(); zero for nodes unreachable from the root.
  Matrix grad(const Var& v) const;
  double grad_scalar(const Var& v) const;

  void accumulate(const Var& v, const Matrix& g);
  bool needs_grad(const Var& v) const { return nodes_[v.id_].needs_grad; }

  const Matrix& value(int id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  void clear();
  void reserve(std::size_t n) { nodes_.reserve(n); }

 private:
  struct Node {
    Matrix value;
    Backprop backprop;
    bool needs_grad = false;
  };
  void check_same_tape(const Var& v) const;

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
  bool backward_done_ = false;
};

// --- primitives ------------------------------------------------------------

/// Elementwise sum/difference; a 1x1 operand is broadcast (only as the subtrahend for -).
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator-(const Var& a);
/// Matrix product; if either operand is 1x1 it acts as a scalar factor.
Var operator*(const Var& a, const Var& b);
Var operator*(double s, const Var& a);
Var operator*(const Var& a, double s);
Var operator+(const Var& a, double s);
Var operator+(double s, const Var& a);
Var operator-(const Var& a, double s);
Var operator-(double s, const Var& a);
/// Elementwise division; a 1x1 divisor divides every entry.
Var operator/(const Var& a, const Var& b);
Var operator/(const Var& a, double s);
Var operator/(double s, const Var& a);
/// Adds a constant matrix.
Var operator+(const Var& a, const Matrix& c);

Var cwise_product(const Var& a, const Var& b);
Var transpose(const Var& a);

Var exp(const Var& a);
Var log(const Var& a);    // throws std::domain_error on entries <= 0
Var sqrt(const Var& a);   // throws std::domain_error on entries <= 0
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var square(const Var& a);
Var atan2(const Var& y, const Var& x);

/// Elementwise f with derivative df, for smooth special functions.
Var unary(const Var& a, const std::function<double(double)>& f,
          const std::function<double(double)>& df);

Var sum(const Var& a);
Var dot(const Var& a, const Var& b);
Var element(const Var& a, Eigen::Index i, Eigen::Index j = 0);
Var block(const Var& a, Eigen::Index i, Eigen::Index j, Eigen::Index r, Eigen::Index c);
/// rows x cols matrix from scalar Vars listed in row-major order.
Var assemble(Eigen::Index rows, Eigen::Index cols, std::span<const Var> entries);
Var assemble(Eigen::Index rows, Eigen::Index cols, std::initializer_list<Var> entries);
Var vstack(const Var& top, const Var& bottom);
/// Column-major reshape.
Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols);

/// A^{-1} B for symmetric positive definite A (Cholesky). The adjoint pushed to
/// A is symmetrized. Throws NumericalError if A is not SPD.
Var spd_solve(const Var& a, const Var& b);
/// log det A for symmetric positive definite A.
Var spd_logdet(const Var& a);

/// log(sum(exp(a))) over all entries, shifted by the max for stability.
Var log_sum_exp(const Var& a);
/// Row-wise softmax.
Var softmax_rows(const Var& a);

// --- optimization ------------------------------------------------------------

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Plain gradient descent theta - lr * grad; moments ignored.
  bool plain = false;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
};

/// One optimizer step on a flat parameter vector.
void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state,
               const AdamConfig& cfg);

/// Scales `g` so its Euclidean norm does not exceed `max_norm`. Returns the pre-clip norm.
double clip_global_norm(Eigen::VectorXd& g, double max_norm);

}  // namespace dmt::ad
