#include "dmtrack/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dmtrack/errors.hpp"

namespace dmt::ad {

// --- Var / Tape --------------------------------------------------------------

const Matrix& Var::value() const {
  if (!tape_) throw std::logic_error("uninitialized Var");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw std::invalid_argument("Var is " + std::to_string(v.rows()) + "x" +
                                std::to_string(v.cols()) + ", not a scalar");
  }
  return v(0, 0);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back({std::move(value), nullptr, true});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::variable(double value) { return variable(Matrix::Constant(1, 1, value)); }

Var Tape::constant(Matrix value) {
  nodes_.push_back({std::move(value), nullptr, false});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

void Tape::check_same_tape(const Var& v) const {
  if (v.tape_ != this) throw std::invalid_argument("operand recorded on a different tape");
}

Var Tape::record(Matrix value, std::initializer_list<Var> parents, Backprop bp) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(bp));
}

Var Tape::record(Matrix value, std::span<const Var> parents, Backprop bp) {
  bool needs = false;
  for (const Var& p : parents) {
    check_same_tape(p);
    needs = needs || nodes_[p.id_].needs_grad;
  }
  nodes_.push_back({std::move(value), needs ? std::move(bp) : Backprop{}, needs});
  return {this, static_cast<int>(nodes_.size() - 1)};
}

void Tape::accumulate(const Var& v, const Matrix& g) {
  Node& n = nodes_[v.id_];
  if (!n.needs_grad) return;
  Matrix& a = adjoints_[v.id_];
  if (a.size() == 0) {
    a = g;
  } else {
    a += g;
  }
}

void Tape::backward(const Var& root) {
  check_same_tape(root);
  if (backward_done_) {
    throw std::logic_error("backward() already ran on this tape; clear() and re-record first");
  }
  const Matrix& rv = nodes_[root.id_].value;
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw std::invalid_argument("backward() needs a scalar root");
  }
  backward_done_ = true;
  adjoints_.assign(nodes_.size(), Matrix());
  adjoints_[root.id_] = Matrix::Ones(1, 1);
  for (int i = root.id_; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.backprop || adjoints_[i].size() == 0) continue;
    n.backprop(*this, adjoints_[i]);
  }
}

Matrix Tape::grad(const Var& v) const {
  check_same_tape(v);
  if (static_cast<std::size_t>(v.id_) < adjoints_.size() && adjoints_[v.id_].size() != 0) {
    return adjoints_[v.id_];
  }
  const Matrix& val = nodes_[v.id_].value;
  return Matrix::Zero(val.rows(), val.cols());
}

double Tape::grad_scalar(const Var& v) const { return grad(v)(0, 0); }

void Tape::clear() {
  nodes_.clear();
  adjoints_.clear();
  backward_done_ = false;
}

// --- helpers -----------------------------------------------------------------

namespace {

Tape& tape_of(const Var& a) {
  if (!a.tape()) throw std::logic_error("uninitialized Var");
  return *a.tape();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

// Scalar-times-matrix product where `s` is 1x1.
Var scale(const Var& s, const Var& m) {
  Tape& t = tape_of(s);
  const double sv = s.scalar();
  return t.record(sv * m.value(), {s, m}, [s, m](Tape& t, const Matrix& g) {
    t.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(m.value()).sum()));
    t.accumulate(m, s.scalar() * g);
  });
}

// Elementwise map with a derivative evaluated from input x and output y.
template <class F, class D>
Var map(const Var& a, F f, D d) {
  Tape& t = tape_of(a);
  Matrix y = a.value().unaryExpr(f);
  return t.record(std::move(y), {a}, [a, d](Tape& t, const Matrix& g) {
    const Matrix& x = a.value();
    Matrix dx(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) dx(i) = g(i) * d(x(i));
    t.accumulate(a, dx);
  });
}

}  // namespace

// --- arithmetic --------------------------------------------------------------

namespace {

// a + sign * b where b is 1x1 and broadcast over a.
Var add_broadcast(const Var& a, const Var& b, double sign) {
  Tape& t = tape_of(a);
  Matrix v = a.value().array() + sign * b.scalar();
  return t.record(std::move(v), {a, b}, [a, b, sign](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, Matrix::Constant(1, 1, sign * g.sum()));
  });
}

}  // namespace

Var operator+(const Var& a, const Var& b) {
  if (b.is_scalar() && !a.is_scalar()) return add_broadcast(a, b, 1.0);
  if (a.is_scalar() && !b.is_scalar()) return add_broadcast(b, a, 1.0);
  require_same_shape(a, b, "add");
  Tape& t = tape_of(a);
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var operator-(const Var& a, const Var& b) {
  if (b.is_scalar() && !a.is_scalar()) return add_broadcast(a, b, -1.0);
  require_same_shape(a, b, "sub");
  Tape& t = tape_of(a);
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var operator-(const Var& a) {
  Tape& t = tape_of(a);
  return t.record(-a.value(), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, -g); });
}

Var operator*(const Var& a, const Var& b) {
  if (a.is_scalar() && !b.is_scalar()) return scale(a, b);
  if (b.is_scalar() && !a.is_scalar()) return scale(b, a);
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions " + std::to_string(a.cols()) +
                                " and " + std::to_string(b.rows()) + " differ");
  }
  Tape& t = tape_of(a);
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var operator*(double s, const Var& a) {
  Tape& t = tape_of(a);
  return t.record(s * a.value(), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, s * g); });
}

Var operator*(const Var& a, double s) { return s * a; }

Var operator+(const Var& a, const Matrix& c) {
  Tape& t = tape_of(a);
  if (a.rows() != c.rows() || a.cols() != c.cols()) {
    throw std::invalid_argument("add constant: shape mismatch");
  }
  return t.record(a.value() + c, {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var operator+(const Var& a, double s) {
  return a + Matrix::Constant(a.rows(), a.cols(), s);
}
Var operator+(double s, const Var& a) { return a + s; }
Var operator-(const Var& a, double s) { return a + (-s); }
Var operator-(double s, const Var& a) { return (-a) + s; }

Var operator/(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.is_scalar()) {
    const double bv = b.scalar();
    if (bv == 0.0) throw NumericalError("division by zero");
    return t.record(a.value() / bv, {a, b}, [a, b](Tape& t, const Matrix& g) {
      const double bv = b.scalar();
      t.accumulate(a, g / bv);
      t.accumulate(b, Matrix::Constant(1, 1, -(g.cwiseProduct(a.value())).sum() / (bv * bv)));
    });
  }
  require_same_shape(a, b, "div");
  if ((b.value().array() == 0.0).any()) throw NumericalError("division by zero");
  return t.record(a.value().cwiseQuotient(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    const Matrix& bv = b.value();
    t.accumulate(a, g.cwiseQuotient(bv));
    t.accumulate(b, -(g.cwiseProduct(a.value())).cwiseQuotient(bv.cwiseProduct(bv)));
  });
}

Var operator/(const Var& a, double s) { return (1.0 / s) * a; }

Var operator/(double s, const Var& a) {
  if ((a.value().array() == 0.0).any()) throw NumericalError("division by zero");
  return map(a, [s](double x) { return s / x; }, [s](double x) { return -s / (x * x); });
}

Var cwise_product(const Var& a, const Var& b) {
  require_same_shape(a, b, "cwise_product");
  Tape& t = tape_of(a);
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(b.value()));
    t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  return t.record(a.value().transpose(), {a},
                  [a](Tape& t, const Matrix& g) { t.accumulate(a, g.transpose()); });
}

// --- elementwise -------------------------------------------------------------

Var exp(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().array().exp().matrix();
  const int id = static_cast<int>(t.size());
  return t.record(std::move(y), {a}, [a, id](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(t.value(id)));
  });
}

Var log(const Var& a) {
  if ((a.value().array() <= 0.0).any()) throw std::domain_error("log of non-positive value");
  return map(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
  if ((a.value().array() <= 0.0).any()) throw std::domain_error("sqrt of non-positive value");
  return map(a, [](double x) { return std::sqrt(x); },
             [](double x) { return 0.5 / std::sqrt(x); });
}

Var tanh(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().array().tanh().matrix();
  const int id = static_cast<int>(t.size());
  return t.record(std::move(y), {a}, [a, id](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(id);
    t.accumulate(a, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var sigmoid(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  const int id = static_cast<int>(t.size());
  return t.record(std::move(y), {a}, [a, id](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(id);
    t.accumulate(a, g.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

Var sin(const Var& a) {
  return map(a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

Var cos(const Var& a) {
  return map(a, [](double x) { return std::cos(x); }, [](double x) { return -std::sin(x); });
}

Var square(const Var& a) {
  return map(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var atan2(const Var& y, const Var& x) {
  require_same_shape(y, x, "atan2");
  Tape& t = tape_of(y);
  Matrix v(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = std::atan2(y.value()(i), x.value()(i));
  return t.record(std::move(v), {y, x}, [y, x](Tape& t, const Matrix& g) {
    const Matrix& yv = y.value();
    const Matrix& xv = x.value();
    Matrix gy(yv.rows(), yv.cols()), gx(yv.rows(), yv.cols());
    for (Eigen::Index i = 0; i < yv.size(); ++i) {
      const double r2 = xv(i) * xv(i) + yv(i) * yv(i);
      gy(i) = g(i) * xv(i) / r2;
      gx(i) = -g(i) * yv(i) / r2;
    }
    t.accumulate(y, gy);
    t.accumulate(x, gx);
  });
}

Var unary(const Var& a, const std::function<double(double)>& f,
          const std::function<double(double)>& df) {
  return map(a, f, df);
}

// --- reductions and reshaping -------------------------------------------------

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  return t.record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "dot");
  Tape& t = tape_of(a);
  const double v = a.value().cwiseProduct(b.value()).sum();
  return t.record(Matrix::Constant(1, 1, v), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g(0, 0) * b.value());
    t.accumulate(b, g(0, 0) * a.value());
  });
}

Var element(const Var& a, Eigen::Index i, Eigen::Index j) {
  Tape& t = tape_of(a);
  return t.record(Matrix::Constant(1, 1, a.value()(i, j)), {a},
                  [a, i, j](Tape& t, const Matrix& g) {
                    Matrix d = Matrix::Zero(a.rows(), a.cols());
                    d(i, j) = g(0, 0);
                    t.accumulate(a, d);
                  });
}

Var block(const Var& a, Eigen::Index i, Eigen::Index j, Eigen::Index r, Eigen::Index c) {
  if (i < 0 || j < 0 || i + r > a.rows() || j + c > a.cols()) {
    throw std::out_of_range("block outside matrix");
  }
  Tape& t = tape_of(a);
  return t.record(a.value().block(i, j, r, c), {a}, [a, i, j, r, c](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(a.rows(), a.cols());
    d.block(i, j, r, c) = g;
    t.accumulate(a, d);
  });
}

Var assemble(Eigen::Index rows, Eigen::Index cols, std::span<const Var> entries) {
  if (static_cast<Eigen::Index>(entries.size()) != rows * cols || entries.empty()) {
    throw std::invalid_argument("assemble: wrong number of entries");
  }
  Tape& t = tape_of(entries.front());
  Matrix v(rows, cols);
  for (Eigen::Index k = 0; k < rows * cols; ++k) v(k / cols, k % cols) = entries[k].scalar();
  std::vector<Var> parents(entries.begin(), entries.end());
  return t.record(std::move(v), entries, [parents, cols](Tape& t, const Matrix& g) {
    for (std::size_t k = 0; k < parents.size(); ++k) {
      t.accumulate(parents[k], Matrix::Constant(1, 1, g(k / cols, k % cols)));
    }
  });
}

Var assemble(Eigen::Index rows, Eigen::Index cols, std::initializer_list<Var> entries) {
  return assemble(rows, cols, std::span<const Var>(entries.begin(), entries.size()));
}

Var vstack(const Var& top, const Var& bottom) {
  if (top.cols() != bottom.cols()) throw std::invalid_argument("vstack: column mismatch");
  Tape& t = tape_of(top);
  Matrix v(top.rows() + bottom.rows(), top.cols());
  v << top.value(), bottom.value();
  const Eigen::Index n = top.rows();
  return t.record(std::move(v), {top, bottom}, [top, bottom, n](Tape& t, const Matrix& g) {
    t.accumulate(top, g.topRows(n));
    t.accumulate(bottom, g.bottomRows(g.rows() - n));
  });
}

Var reshape(const Var& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  Tape& t = tape_of(a);
  Matrix v = a.value().reshaped(rows, cols);
  return t.record(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.reshaped(a.rows(), a.cols()));
  });
}

// --- SPD linear algebra --------------------------------------------------------

namespace {

Eigen::LLT<Matrix> checked_llt(const Matrix& a, const char* op) {
  if (a.rows() != a.cols()) throw std::invalid_argument(std::string(op) + ": not square");
  Eigen::LLT<Matrix> llt(0.5 * (a + a.transpose()));
  if (llt.info() != Eigen::Success) {
    throw NumericalError(std::string(op) + ": matrix is not symmetric positive definite");
  }
  return llt;
}

}  // namespace

Var spd_solve(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("spd_solve: dimension mismatch");
  Tape& t = tape_of(a);
  auto llt = checked_llt(a.value(), "spd_solve");
  Matrix x = llt.solve(b.value());
  const int id = static_cast<int>(t.size());
  return t.record(std::move(x), {a, b}, [a, b, llt, id](Tape& t, const Matrix& g) {
    const Matrix gb = llt.solve(g);
    t.accumulate(b, gb);
    if (t.needs_grad(a)) {
      const Matrix& x = t.value(id);
      const Matrix ga = gb * x.transpose();
      t.accumulate(a, -0.5 * (ga + ga.transpose()));
    }
  });
}

Var spd_logdet(const Var& a) {
  Tape& t = tape_of(a);
  auto llt = checked_llt(a.value(), "spd_logdet");
  const Matrix l = llt.matrixL();
  const double v = 2.0 * l.diagonal().array().log().sum();
  return t.record(Matrix::Constant(1, 1, v), {a}, [a, llt](Tape& t, const Matrix& g) {
    const Matrix inv = llt.solve(Matrix::Identity(a.rows(), a.rows()));
    t.accumulate(a, g(0, 0) * 0.5 * (inv + inv.transpose()));
  });
}

Var log_sum_exp(const Var& a) {
  const double m = a.value().maxCoeff();
  return log(sum(exp(a - m))) + m;
}

Var softmax_rows(const Var& a) {
  Tape& t = tape_of(a);
  Matrix y(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const Eigen::RowVectorXd row = a.value().row(r);
    const Eigen::RowVectorXd e = (row.array() - row.maxCoeff()).exp();
    y.row(r) = e / e.sum();
  }
  const int id = static_cast<int>(t.size());
  return t.record(std::move(y), {a}, [a, id](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(id);
    Matrix d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double s = g.row(r).dot(y.row(r));
      d.row(r) = y.row(r).cwiseProduct((g.row(r).array() - s).matrix());
    }
    t.accumulate(a, d);
  });
}

// --- optimization --------------------------------------------------------------

void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grads, AdamState& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam_step: size mismatch");
  if (cfg.plain) {
    params -= cfg.lr * grads;
    ++state.step;
    return;
  }
  if (state.m.size() != params.size()) {
    state.m = Eigen::VectorXd::Zero(params.size());
    state.v = Eigen::VectorXd::Zero(params.size());
    state.step = 0;
  }
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  params.array() -= cfg.lr * (state.m.array() / bc1) /
                    ((state.v.array() / bc2).sqrt() + cfg.eps);
}

double clip_global_norm(Eigen::VectorXd& g, double max_norm) {
  const double n = g.norm();
  if (n > max_norm && n > 0.0) g *= max_norm / n;
  return n;
}

}  // namespace dmt::ad
