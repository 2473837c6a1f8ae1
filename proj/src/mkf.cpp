#include "dmtrack/mkf.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>

#include "dmtrack/errors.hpp"

namespace dmt {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// --- weights -------------------------------------------------------------------------

LstmWeights LstmWeights::zeros(int hidden, int dense, double vel_scale) {
  if (hidden <= 0 || dense <= 0) throw ConfigError("mkf: hidden sizes must be > 0");
  LstmWeights w;
  w.Wx = Eigen::MatrixXd::Zero(4 * hidden, kVelDim);
  w.Wh = Eigen::MatrixXd::Zero(4 * hidden, hidden);
  w.b = Eigen::VectorXd::Zero(4 * hidden);
  w.Wd = Eigen::MatrixXd::Zero(dense, hidden);
  w.bd = Eigen::VectorXd::Zero(dense);
  w.Wo = Eigen::MatrixXd::Zero(kMkfOutDim, dense);
  w.bo = Eigen::VectorXd::Zero(kMkfOutDim);
  w.vel_scale = vel_scale;
  return w;
}

LstmWeights LstmWeights::init(int hidden, int dense, Rng& rng, double vel_scale) {
  LstmWeights w = zeros(hidden, dense, vel_scale);
  auto fill = [&rng](Eigen::MatrixXd& m, double fan_in) {
    std::uniform_real_distribution<double> u(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    }
  };
  const double lstm_fan_in = kVelDim + hidden;
  fill(w.Wx, lstm_fan_in);
  fill(w.Wh, lstm_fan_in);
  fill(w.Wd, hidden);
  fill(w.Wo, dense);
  w.b.segment(hidden, hidden).setOnes();
  return w;
}

std::size_t LstmWeights::size() const {
  return Wx.size() + Wh.size() + b.size() + Wd.size() + bd.size() + Wo.size() + bo.size();
}

Eigen::VectorXd LstmWeights::flatten() const {
  Eigen::VectorXd theta(size());
  Eigen::Index k = 0;
  auto put = [&](const auto& m) {
    theta.segment(k, m.size()) = m.reshaped();
    k += m.size();
  };
  put(Wx);
  put(Wh);
  put(b);
  put(Wd);
  put(bd);
  put(Wo);
  put(bo);
  return theta;
}

void LstmWeights::unflatten(const Eigen::VectorXd& theta) {
  if (static_cast<std::size_t>(theta.size()) != size()) {
    throw std::invalid_argument("LstmWeights::unflatten: expected " + std::to_string(size()) +
                                " values, got " + std::to_string(theta.size()));
  }
  Eigen::Index k = 0;
  auto take = [&](auto& m) {
    m.reshaped() = theta.segment(k, m.size());
    k += m.size();
  };
  take(Wx);
  take(Wh);
  take(b);
  take(Wd);
  take(bd);
  take(Wo);
  take(bo);
}

void LstmWeights::validate() const {
  const Eigen::Index H = Wh.cols();
  const Eigen::Index D = Wd.rows();
  const bool ok = H > 0 && D > 0 && Wx.rows() == 4 * H && Wx.cols() == kVelDim &&
                  Wh.rows() == 4 * H && b.size() == 4 * H && Wd.cols() == H && bd.size() == D &&
                  Wo.rows() == kMkfOutDim && Wo.cols() == D && bo.size() == kMkfOutDim;
  if (!ok) throw ConfigError("mkf: inconsistent weight shapes");
  if (!(vel_scale > 0.0)) throw ConfigError("mkf: vel_scale must be > 0");
}

// --- forward pass ----------------------------------------------------------------------

std::pair<LstmState, NnPrediction> lstm_step(const LstmWeights& w, const LstmState& s,
                                             const Vec2& input) {
  const Eigen::Index H = w.hidden();
  const Eigen::VectorXd z = w.Wx * (input / w.vel_scale) + w.Wh * s.h + w.b;
  LstmState out;
  out.c.resize(H);
  out.h.resize(H);
  for (Eigen::Index k = 0; k < H; ++k) {
    const double i = sigmoid(z[k]);
    const double f = sigmoid(z[H + k]);
    const double g = std::tanh(z[2 * H + k]);
    const double o = sigmoid(z[3 * H + k]);
    out.c[k] = f * s.c[k] + i * g;
    out.h[k] = o * std::tanh(out.c[k]);
  }
  const Eigen::VectorXd d = (w.Wd * out.h + w.bd).array().tanh().matrix();
  const Eigen::VectorXd y = w.Wo * d + w.bo;
  NnPrediction p;
  const double S = w.vel_scale;
  p.v = S * y.head<2>();
  p.C << S * std::exp(y[2]), 0.0,
         S * y[4], S * std::exp(y[3]);
  return {out, p};
}

Eigen::Matrix<double, 2, 4> mkf_projection(double dt) {
  Eigen::Matrix<double, 2, 4> V;
  V << dt, 0, 1, 0,
       0, dt, 0, 1;
  return V;
}

std::pair<StateEstimate, LstmState> mkf_predict(const StateEstimate& prior, const LstmState& s,
                                                const LstmWeights& w, double dt,
                                                const Mat4& Q_reg) {
  auto [s2, nn] = lstm_step(w, s, prior.velocity());
  StateEstimate out;
  out.t = prior.t + 1;
  out.mean << prior.position() + dt * nn.v, nn.v;
  const Eigen::Matrix<double, 2, 4> V = mkf_projection(dt);
  const Mat2 CCt = nn.C * nn.C.transpose();
  out.cov = prior.cov + V.transpose() * CCt * V + Q_reg;
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return {out, s2};
}

StateEstimate mkf_update(const StateEstimate& pred, const Measurement& z,
                         const SensorConfig& sensor) {
  return ekf_update(pred, z, sensor).posterior;
}

FilterTrace run_mkf(const Tracklet& tr, const SensorConfig& sensor, const LstmWeights& w,
                    const Mat4& Q_reg) {
  w.validate();
  if (tr.meas.size() < kFirstFilteredStep) throw DataError("tracklet shorter than 2 steps");
  FilterTrace out;
  StateEstimate x = init_track(tr.meas[0], tr.meas[1], tr.dt, sensor);
  for (std::size_t k = 0; k < kFirstFilteredStep; ++k) {
    out.predicted.push_back(x);
    out.posterior.push_back(x);
  }
  LstmState s = LstmState::zeros(w.hidden());
  for (std::size_t k = kFirstFilteredStep; k < tr.meas.size(); ++k) {
    auto [pred, s2] = mkf_predict(x, s, w, tr.dt, Q_reg);
    const UpdateResult u = ekf_update(pred, tr.meas[k], sensor);
    out.nll += nll_term(u.innovation, u.S);
    out.predicted.push_back(pred);
    out.posterior.push_back(u.posterior);
    x = u.posterior;
    s = std::move(s2);
  }
  return out;
}

// --- taped forms ---------------------------------------------------------------------

TapeLstm TapeLstm::bind(ad::Tape& tape, const ad::Var& theta, const LstmWeights& shape) {
  (void)tape;
  shape.validate();
  if (static_cast<std::size_t>(theta.rows()) != shape.size() || theta.cols() != 1) {
    throw std::invalid_argument("TapeLstm::bind: theta has the wrong shape");
  }
  TapeLstm w;
  Eigen::Index k = 0;
  auto slice = [&](Eigen::Index rows, Eigen::Index cols) {
    ad::Var v = ad::reshape(ad::block(theta, k, 0, rows * cols, 1), rows, cols);
    k += rows * cols;
    return v;
  };
  w.Wx = slice(shape.Wx.rows(), shape.Wx.cols());
  w.Wh = slice(shape.Wh.rows(), shape.Wh.cols());
  w.b = slice(shape.b.size(), 1);
  w.Wd = slice(shape.Wd.rows(), shape.Wd.cols());
  w.bd = slice(shape.bd.size(), 1);
  w.Wo = slice(shape.Wo.rows(), shape.Wo.cols());
  w.bo = slice(shape.bo.size(), 1);
  w.vel_scale = shape.vel_scale;
  w.hidden = shape.hidden();
  return w;
}

std::pair<TapeLstmState, TapeNnPrediction> lstm_step(ad::Tape& tape, const TapeLstm& w,
                                                     const TapeLstmState& s,
                                                     const ad::Var& input) {
  const Eigen::Index H = w.hidden;
  const ad::Var z = w.Wx * (input / w.vel_scale) + w.Wh * s.h + w.b;
  const ad::Var i = ad::sigmoid(ad::block(z, 0, 0, H, 1));
  const ad::Var f = ad::sigmoid(ad::block(z, H, 0, H, 1));
  const ad::Var g = ad::tanh(ad::block(z, 2 * H, 0, H, 1));
  const ad::Var o = ad::sigmoid(ad::block(z, 3 * H, 0, H, 1));
  TapeLstmState out;
  out.c = ad::cwise_product(f, s.c) + ad::cwise_product(i, g);
  out.h = ad::cwise_product(o, ad::tanh(out.c));
  const ad::Var d = ad::tanh(w.Wd * out.h + w.bd);
  const ad::Var y = w.Wo * d + w.bo;
  const double S = w.vel_scale;
  TapeNnPrediction p;
  p.v = S * ad::block(y, 0, 0, 2, 1);
  const ad::Var zero = tape.constant(0.0);
  p.C = S * ad::assemble(2, 2, {ad::exp(ad::element(y, 2)), zero,
                                ad::element(y, 4), ad::exp(ad::element(y, 3))});
  return {out, p};
}

ad::Var mkf_loss(ad::Tape& tape, const std::vector<TapeNnPrediction>& preds,
                 const std::vector<Vec2>& labels, MkfLossKind kind) {
  if (preds.size() != labels.size()) throw std::invalid_argument("mkf_loss: length mismatch");
  const double log2pi = std::log(2.0 * std::numbers::pi);
  ad::Var total = tape.constant(0.0);
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const ad::Var& C = preds[k].C;
    const ad::Var c00 = ad::element(C, 0, 0);
    const ad::Var c10 = ad::element(C, 1, 0);
    const ad::Var c11 = ad::element(C, 1, 1);
    const ad::Var r0 = ad::element(preds[k].v, 0) - labels[k].x();
    const ad::Var r1 = ad::element(preds[k].v, 1) - labels[k].y();
    if (kind == MkfLossKind::kGaussianNll) {
      // Forward substitution C w = r.
      const ad::Var w0 = r0 / c00;
      const ad::Var w1 = (r1 - c10 * w0) / c11;
      total = total + 0.5 * (ad::square(w0) + ad::square(w1)) + ad::log(c00) + ad::log(c11) +
              log2pi;
    } else {
      const auto absf = [](double x) { return std::abs(x); };
      const auto sgn = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
      const ad::Var e0 = 0.5 * (c00 * r0) - c00;
      const ad::Var e1 = 0.5 * (c10 * r0 + c11 * r1) - c11;
      total = total + ad::unary(e0, absf, sgn) + ad::unary(e1, absf, sgn);
    }
  }
  return total;
}

VelocitySequence velocity_sequence(const Tracklet& tr, const SensorConfig& sensor) {
  if (tr.meas.size() < 3) throw DataError("velocity_sequence: need at least 3 measurements");
  std::vector<Vec2> u;
  Vec2 prev = polar_to_cartesian(tr.meas[0], sensor);
  for (std::size_t k = 1; k < tr.meas.size(); ++k) {
    const Vec2 p = polar_to_cartesian(tr.meas[k], sensor);
    u.push_back((p - prev) / tr.dt);
    prev = p;
  }
  VelocitySequence seq;
  seq.inputs.assign(u.begin(), u.end() - 1);
  seq.labels.assign(u.begin() + 1, u.end());
  return seq;
}

ad::Var mkf_label_objective(ad::Tape& tape, const ad::Var& theta, const LstmWeights& shape,
                            const Tracklet& tr, const SensorConfig& sensor, MkfLossKind kind) {
  const TapeLstm w = TapeLstm::bind(tape, theta, shape);
  const VelocitySequence seq = velocity_sequence(tr, sensor);
  TapeLstmState s{tape.constant(Eigen::VectorXd::Zero(w.hidden)),
                  tape.constant(Eigen::VectorXd::Zero(w.hidden))};
  std::vector<TapeNnPrediction> preds;
  preds.reserve(seq.inputs.size());
  for (const Vec2& in : seq.inputs) {
    auto [s2, p] = lstm_step(tape, w, s, tape.constant(ad::Matrix(in)));
    preds.push_back(p);
    s = s2;
  }
  return mkf_loss(tape, preds, seq.labels, kind);
}

ad::Var mkf_filter_objective(ad::Tape& tape, const ad::Var& theta, const LstmWeights& shape,
                             const Tracklet& tr, const SensorConfig& sensor, const Mat4& Q_reg) {
  if (tr.meas.size() < kFirstFilteredStep + 1) {
    throw DataError("mkf_filter_objective: need at least 3 measurements");
  }
  const TapeLstm w = TapeLstm::bind(tape, theta, shape);
  const StateEstimate x0 = init_track(tr.meas[0], tr.meas[1], tr.dt, sensor);
  ad::Var x = tape.constant(ad::Matrix(x0.mean));
  ad::Var P = tape.constant(ad::Matrix(x0.cov));
  const ad::Var R = tape.constant(ad::Matrix(sensor.noise_cov()));
  const ad::Var Vt = tape.constant(ad::Matrix(mkf_projection(tr.dt).transpose()));
  const ad::Var Q = tape.constant(ad::Matrix(Q_reg));
  TapeLstmState s{tape.constant(Eigen::VectorXd::Zero(w.hidden)),
                  tape.constant(Eigen::VectorXd::Zero(w.hidden))};
  ad::Var nll = tape.constant(0.0);
  for (std::size_t k = kFirstFilteredStep; k < tr.meas.size(); ++k) {
    auto [s2, p] = lstm_step(tape, w, s, ad::block(x, 2, 0, 2, 1));
    const ad::Var xp = ad::vstack(ad::block(x, 0, 0, 2, 1) + tr.dt * p.v, p.v);
    const ad::Var VC = Vt * p.C;
    const ad::Var Pp = P + VC * ad::transpose(VC) + Q;
    const TapeUpdate u = ekf_update_tape(tape, xp, Pp, R, tr.meas[k], sensor);
    nll = nll + u.nll;
    x = u.x;
    P = u.P;
    s = s2;
  }
  return nll;
}

MkfTrainResult train_mkf(const LstmWeights& w0, const Dataset& ds, const MkfTrainConfig& cfg) {
  if (ds.empty()) throw DataError("train_mkf: empty training dataset");
  if (cfg.batch_size == 0) throw ConfigError("mkf.batch_size must be > 0");
  w0.validate();
  MkfTrainResult res;
  res.weights = w0;
  if (cfg.iterations == 0) return res;

  ad::AdamConfig acfg;
  acfg.lr = cfg.lr;
  ad::AdamState astate;
  Eigen::VectorXd theta = w0.flatten();
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);
  LstmWeights work = w0;
  ad::Tape tape;
  Eigen::VectorXd g(theta.size());
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    g.setZero();
    double loss = 0.0;
    bool ok = true;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const Tracklet& tr = ds.tracklets[pick(rng)];
      tape.clear();
      const ad::Var th = tape.variable(ad::Matrix(theta));
      try {
        const ad::Var obj =
            cfg.mode == MkfTrainMode::kFilterNll
                ? mkf_filter_objective(tape, th, w0, tr, ds.sensor, cfg.Q_reg)
                : mkf_label_objective(tape, th, w0, tr, ds.sensor, cfg.loss);
        loss += obj.scalar();
        tape.backward(obj);
        g += tape.grad(th);
      } catch (const NumericalError&) {
        ok = false;
        break;
      }
    }
    const double n = static_cast<double>(cfg.batch_size);
    loss /= n;
    g /= n;
    if (!ok || !std::isfinite(loss) || !g.allFinite()) {
      res.aborted = true;
      break;
    }
    res.loss.push_back(loss);
    work.unflatten(theta);
    res.weights = work;
    if (cfg.clip_norm > 0.0) ad::clip_global_norm(g, cfg.clip_norm);
    ad::adam_step(theta, g, astate, acfg);
  }
  if (!res.aborted) res.weights.unflatten(theta);
  return res;
}

// --- checkpoint ----------------------------------------------------------------------

void save_mkf(const std::filesystem::path& path, const LstmWeights& w) {
  w.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  out << "MKF1\n";
  out << "vel_scale " << w.vel_scale << '\n';
  auto put = [&out](const char* name, const Eigen::MatrixXd& m) {
    out << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    const auto flat = m.reshaped();
    for (Eigen::Index i = 0; i < flat.size(); ++i) out << (i ? " " : "") << flat[i];
    out << '\n';
  };
  put("Wx", w.Wx);
  put("Wh", w.Wh);
  put("b", w.b);
  put("Wd", w.Wd);
  put("bd", w.bd);
  put("Wo", w.Wo);
  put("bo", w.bo);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

LstmWeights load_mkf(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line != "MKF1") {
    throw ParseError(path.string(), 1, "missing MKF1 header");
  }
  LstmWeights w;
  {
    ++lineno;
    std::getline(in, line);
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key >> w.vel_scale) || key != "vel_scale") {
      throw ParseError(path.string(), lineno, "expected vel_scale");
    }
  }
  auto get = [&](const char* name, auto& m) {
    ++lineno;
    if (!std::getline(in, line)) throw ParseError(path.string(), lineno, "truncated file");
    std::istringstream head(line);
    std::string key;
    Eigen::Index r = 0, c = 0;
    if (!(head >> key >> r >> c) || key != name || r < 0 || c < 0) {
      throw ParseError(path.string(), lineno, std::string("expected tensor '") + name + "'");
    }
    Eigen::MatrixXd tmp(r, c);
    ++lineno;
    if (!std::getline(in, line)) throw ParseError(path.string(), lineno, "truncated file");
    std::istringstream vals(line);
    auto flat = tmp.reshaped();
    for (Eigen::Index i = 0; i < flat.size(); ++i) {
      if (!(vals >> flat[i])) throw ParseError(path.string(), lineno, "short tensor data");
    }
    if constexpr (std::is_same_v<std::decay_t<decltype(m)>, Eigen::VectorXd>) {
      if (c != 1) throw ParseError(path.string(), lineno - 1, "vector tensor must have 1 column");
      m = tmp.col(0);
    } else {
      m = tmp;
    }
  };
  get("Wx", w.Wx);
  get("Wh", w.Wh);
  get("b", w.b);
  get("Wd", w.Wd);
  get("bd", w.bd);
  get("Wo", w.Wo);
  get("bo", w.bo);
  w.validate();
  return w;
}

}  // namespace dmt
