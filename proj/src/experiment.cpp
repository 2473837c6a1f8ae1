#include "dmtrack/experiment.hpp"

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include "json.hpp"
#include <sstream>

#include "dmtrack/errors.hpp"
#include "dmtrack/evalkit.hpp"

namespace dmt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// --- value codecs ------------------------------------------------------------------

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
T parse_integer(const std::string& field, const std::string& s) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(field + ": expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

double parse_double(const std::string& field, const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ConfigError(field + ": expected a number, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& field, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(field + ": expected true or false, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& field, const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(field, item));
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::string join(const std::vector<double>& v) {
  std::vector<std::string> s;
  for (double d : v) s.push_back(fmt_double(d));
  return join(s);
}

// --- field registry ----------------------------------------------------------------

struct Field {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&, const fs::path&)> set;
  std::function<std::string(const ExperimentConfig&)> get;

  std::string name() const { return section + "." + key; }
};

using Cfg = ExperimentConfig;

template <class Ref>
Field dbl(std::string sec, std::string key, Ref ref) {
  const std::string name = sec + "." + key;
  return {sec, key,
          [ref, name](Cfg& c, const std::string& v, const fs::path&) { ref(c) = parse_double(name, v); },
          [ref](const Cfg& c) { return fmt_double(ref(const_cast<Cfg&>(c))); }};
}

template <class T, class Ref>
Field integer(std::string sec, std::string key, Ref ref) {
  const std::string name = sec + "." + key;
  return {sec, key,
          [ref, name](Cfg& c, const std::string& v, const fs::path&) {
            ref(c) = parse_integer<T>(name, v);
          },
          [ref](const Cfg& c) { return std::to_string(ref(const_cast<Cfg&>(c))); }};
}

template <class Ref>
Field boolean(std::string sec, std::string key, Ref ref) {
  const std::string name = sec + "." + key;
  return {sec, key,
          [ref, name](Cfg& c, const std::string& v, const fs::path&) { ref(c) = parse_bool(name, v); },
          [ref](const Cfg& c) { return std::string(ref(const_cast<Cfg&>(c)) ? "true" : "false"); }};
}

template <class Ref>
Field seed(std::string sec, std::string key, Ref ref) {
  const std::string name = sec + "." + key;
  return {sec, key,
          [ref, name](Cfg& c, const std::string& v, const fs::path&) {
            ref(c) = parse_integer<std::uint64_t>(name, v);
          },
          [ref](const Cfg& c) {
            const auto& s = ref(const_cast<Cfg&>(c));
            return s ? std::to_string(*s) : std::string();
          }};
}

template <class Ref>
Field path(std::string sec, std::string key, Ref ref) {
  return {sec, key,
          [ref](Cfg& c, const std::string& v, const fs::path& base) {
            ref(c) = v.empty() ? fs::path() : (fs::path(v).is_absolute() ? fs::path(v) : base / v)
                                                  .lexically_normal();
          },
          [ref](const Cfg& c) { return ref(const_cast<Cfg&>(c)).string(); }};
}

template <class Ref>
Field dlist(std::string sec, std::string key, Ref ref) {
  const std::string name = sec + "." + key;
  return {sec, key,
          [ref, name](Cfg& c, const std::string& v, const fs::path&) {
            ref(c) = parse_double_list(name, v);
          },
          [ref](const Cfg& c) { return join(ref(const_cast<Cfg&>(c))); }};
}

template <class E, class Ref>
Field choice(std::string sec, std::string key, std::vector<std::pair<std::string, E>> names,
             Ref ref) {
  const std::string name = sec + "." + key;
  return {sec, key,
          [ref, names, name](Cfg& c, const std::string& v, const fs::path&) {
            for (const auto& [n, e] : names) {
              if (n == v) {
                ref(c) = e;
                return;
              }
            }
            std::string allowed;
            for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + n;
            throw ConfigError(name + ": expected one of " + allowed + ", got '" + v + "'");
          },
          [ref, names](const Cfg& c) {
            for (const auto& [n, e] : names) {
              if (ref(const_cast<Cfg&>(c)) == e) return n;
            }
            return std::string("?");
          }};
}

#define REF(expr) [](Cfg & c) -> auto& { return expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      choice<DatasetSource>("dataset", "source",
                            {{"gct", DatasetSource::kGct}, {"dir", DatasetSource::kDir},
                             {"csv", DatasetSource::kCsv}},
                            REF(c.dataset.source)),
      seed("dataset", "seed", REF(c.dataset.seed)),
      integer<std::size_t>("dataset", "n_train", REF(c.dataset.n_train)),
      integer<std::size_t>("dataset", "n_test", REF(c.dataset.n_test)),
      path("dataset", "dir", REF(c.dataset.dir)),
      path("dataset", "csv_train", REF(c.dataset.csv_train)),
      path("dataset", "csv_test", REF(c.dataset.csv_test)),
      integer<std::size_t>("dataset", "tracklet_len", REF(c.dataset.tracklet_len)),

      integer<std::size_t>("gct", "n_steps", REF(c.gct.n_steps)),
      dbl("gct", "dt", REF(c.gct.dt)),
      integer<std::size_t>("gct", "half_period", REF(c.gct.half_period)),
      dbl("gct", "turn_rate_lo", REF(c.gct.turn_rate_deg.first)),
      dbl("gct", "turn_rate_hi", REF(c.gct.turn_rate_deg.second)),
      dbl("gct", "start_lo_x", REF(c.gct.start_lo.x())),
      dbl("gct", "start_lo_y", REF(c.gct.start_lo.y())),
      dbl("gct", "start_hi_x", REF(c.gct.start_hi.x())),
      dbl("gct", "start_hi_y", REF(c.gct.start_hi.y())),
      dbl("gct", "speed", REF(c.gct.speed)),

      dbl("sensor", "origin_x", REF(c.sensor.origin.x())),
      dbl("sensor", "origin_y", REF(c.sensor.origin.y())),
      dbl("sensor", "sigma_r", REF(c.sensor.sigma_r)),
      dbl("sensor", "sigma_a", REF(c.sensor.sigma_a)),

      dbl("ekf", "q", REF(c.ekf.q)),
      dbl("ekf", "q_lo", REF(c.ekf.q_lo)),
      dbl("ekf", "q_hi", REF(c.ekf.q_hi)),
      integer<int>("ekf", "q_points", REF(c.ekf.q_points)),

      integer<std::size_t>("gp", "train_tracklets", REF(c.gp.train_tracklets)),
      choice<GpSearch>("gp", "hyper_search",
                       {{"lml", GpSearch::kMarginalLikelihood}, {"evidence", GpSearch::kEvidence}},
                       REF(c.gp.search)),
      dbl("gp", "sigma0_sq", REF(c.gp.fit.hyper0.sigma0_sq)),
      dbl("gp", "length_sq", REF(c.gp.fit.hyper0.length_sq)),
      dbl("gp", "noise_sq", REF(c.gp.fit.hyper0.noise_sq)),
      integer<std::size_t>("gp", "max_points", REF(c.gp.fit.max_points)),
      integer<std::size_t>("gp", "lml_points", REF(c.gp.fit.lml_points)),
      integer<std::size_t>("gp", "lml_steps", REF(c.gp.fit.lml_steps)),
      dbl("gp", "lr", REF(c.gp.fit.lr)),
      integer<std::size_t>("gp", "validation_tracklets", REF(c.gp.validation_tracklets)),
      dlist("gp", "grid_sigma0_sq", REF(c.gp.grid.sigma0_sq)),
      dlist("gp", "grid_length_sq", REF(c.gp.grid.length_sq)),
      dlist("gp", "grid_noise_sq", REF(c.gp.grid.noise_sq)),
      integer<std::size_t>("gp", "particles", REF(c.gp.pf.particles)),
      dbl("gp", "sigma_p", REF(c.gp.pf.sigma_p)),
      dbl("gp", "ess_threshold", REF(c.gp.pf.ess_threshold)),

      integer<std::size_t>("imm", "steps", REF(c.imm.train.steps)),
      integer<std::size_t>("imm", "batch_size", REF(c.imm.train.batch_size)),
      dbl("imm", "lr", REF(c.imm.train.lr)),
      boolean("imm", "train_R", REF(c.imm.train.train_R)),
      boolean("imm", "plain_gd", REF(c.imm.train.plain_gd)),
      boolean("imm", "moment_matched", REF(c.imm.train.options.moment_matched)),
      dbl("imm", "omega0", REF(c.imm.omega0)),
      dbl("imm", "p_stay", REF(c.imm.p_stay)),

      integer<std::size_t>("mkf", "iterations", REF(c.mkf.train.iterations)),
      integer<std::size_t>("mkf", "batch_size", REF(c.mkf.train.batch_size)),
      dbl("mkf", "lr", REF(c.mkf.train.lr)),
      dbl("mkf", "clip_norm", REF(c.mkf.train.clip_norm)),
      integer<int>("mkf", "hidden", REF(c.mkf.hidden)),
      integer<int>("mkf", "dense", REF(c.mkf.dense)),
      dbl("mkf", "vel_scale", REF(c.mkf.vel_scale)),
      dbl("mkf", "q_reg", REF(c.mkf.q_reg)),
      choice<MkfTrainMode>("mkf", "mode",
                           {{"filter_nll", MkfTrainMode::kFilterNll},
                            {"velocity_labels", MkfTrainMode::kVelocityLabels}},
                           REF(c.mkf.train.mode)),
      choice<MkfLossKind>("mkf", "loss",
                          {{"nll", MkfLossKind::kGaussianNll}, {"l1", MkfLossKind::kLiteralL1}},
                          REF(c.mkf.train.loss)),

      seed("training", "seed", REF(c.training_seed)),

      seed("evaluate", "seed", REF(c.evaluate_seed)),
      Field{"evaluate", "methods",
            [](Cfg& c, const std::string& v, const fs::path&) { c.methods = split_list(v); },
            [](const Cfg& c) { return join(c.methods); }},
      path("evaluate", "model_dir", REF(c.model_dir)),
  };
  return f;
}

#undef REF

const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) return &f;
  }
  return nullptr;
}

}  // namespace

// --- config ------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (!dataset.seed) throw ConfigError("dataset.seed: missing (seeds are mandatory)");
  if (!training_seed) throw ConfigError("training.seed: missing (seeds are mandatory)");
  if (!evaluate_seed) throw ConfigError("evaluate.seed: missing (seeds are mandatory)");
  try {
    gct.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("gct: ") + e.what());
  }
  if (!(sensor.sigma_r > 0.0)) throw ConfigError("sensor.sigma_r: must be > 0");
  if (!(sensor.sigma_a > 0.0)) throw ConfigError("sensor.sigma_a: must be > 0");
  switch (dataset.source) {
    case DatasetSource::kGct:
      if (dataset.n_train == 0) throw ConfigError("dataset.n_train: must be > 0");
      if (dataset.n_test == 0) throw ConfigError("dataset.n_test: must be > 0");
      break;
    case DatasetSource::kDir:
      if (dataset.dir.empty()) throw ConfigError("dataset.dir: required when source = dir");
      if (!fs::is_directory(dataset.dir)) {
        throw ConfigError("dataset.dir: no such directory " + dataset.dir.string());
      }
      break;
    case DatasetSource::kCsv:
      for (const auto& [name, p] : {std::pair{"dataset.csv_train", dataset.csv_train},
                                    std::pair{"dataset.csv_test", dataset.csv_test}}) {
        if (p.empty()) throw ConfigError(std::string(name) + ": required when source = csv");
        if (!fs::is_regular_file(p)) throw ConfigError(std::string(name) + ": no such file " + p.string());
      }
      if (dataset.tracklet_len < 3) throw ConfigError("dataset.tracklet_len: must be >= 3");
      break;
  }
  if (ekf.q < 0.0) throw ConfigError("ekf.q: must be >= 0 (0 selects q by training NLL)");
  if (!(ekf.q_lo > 0.0 && ekf.q_hi > ekf.q_lo)) throw ConfigError("ekf.q_lo/q_hi: need 0 < q_lo < q_hi");
  if (ekf.q_points < 2) throw ConfigError("ekf.q_points: must be >= 2");
  try {
    gp.fit.hyper0.validate();
  } catch (const ConfigError&) {
    throw ConfigError("gp.sigma0_sq/length_sq/noise_sq: must all be > 0");
  }
  if (gp.train_tracklets == 0) throw ConfigError("gp.train_tracklets: must be > 0");
  if (gp.pf.particles == 0) throw ConfigError("gp.particles: must be > 0");
  if (gp.pf.sigma_p < 0.0) throw ConfigError("gp.sigma_p: must be >= 0");
  if (gp.search == GpSearch::kEvidence && gp.validation_tracklets == 0) {
    throw ConfigError("gp.validation_tracklets: must be > 0 for hyper_search = evidence");
  }
  if (imm.train.batch_size == 0) throw ConfigError("imm.batch_size: must be > 0");
  if (!(imm.train.lr > 0.0)) throw ConfigError("imm.lr: must be > 0");
  if (!(imm.p_stay > 0.0 && imm.p_stay < 1.0)) throw ConfigError("imm.p_stay: must be in (0, 1)");
  if (mkf.train.batch_size == 0) throw ConfigError("mkf.batch_size: must be > 0");
  if (!(mkf.train.lr > 0.0)) throw ConfigError("mkf.lr: must be > 0");
  if (mkf.hidden <= 0 || mkf.dense <= 0) throw ConfigError("mkf.hidden/dense: must be > 0");
  if (!(mkf.vel_scale > 0.0)) throw ConfigError("mkf.vel_scale: must be > 0");
  if (!(mkf.q_reg >= 0.0)) throw ConfigError("mkf.q_reg: must be >= 0");
  if (methods.empty()) throw ConfigError("evaluate.methods: empty");
  for (const auto& m : methods) {
    if (m != "ekf" && m != "gp" && m != "imm" && m != "mkf") {
      throw ConfigError("evaluate.methods: unknown method '" + m + "'");
    }
  }
}

ExperimentConfig parse_config(const std::string& text, const fs::path& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError(section + ": key outside of a section");
    for (const auto& [key, value] : body) {
      const Field* f = find_field(section, key);
      if (!f) throw ConfigError(section + "." + key + ": unknown field");
      f->set(cfg, value.get_value<std::string>(), base_dir);
    }
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), fs::absolute(path).parent_path());
}

std::string config_to_ini(const ExperimentConfig& cfg) {
  std::ostringstream out;
  std::string current;
  for (const auto& f : fields()) {
    if (f.section != current) {
      out << (current.empty() ? "" : "\n") << '[' << f.section << "]\n";
      current = f.section;
    }
    out << f.key << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

std::uint64_t derive_seed(std::uint64_t base, const std::string& tag) {
  // FNV-1a over the tag, then a splitmix64 finalizer.
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : tag) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::uint64_t z = base ^ h;
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Datasets load_datasets(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::uint64_t s = *cfg.dataset.seed;
  Datasets d;
  switch (cfg.dataset.source) {
    case DatasetSource::kGct:
      d.train = make_dataset(cfg.dataset.n_train, cfg.gct, cfg.sensor, derive_seed(s, "train"));
      d.test = make_dataset(cfg.dataset.n_test, cfg.gct, cfg.sensor, derive_seed(s, "test"),
                            DatasetRole::kTest);
      break;
    case DatasetSource::kDir:
      d.train = read_dataset(cfg.dataset.dir / "train", cfg.sensor, DatasetRole::kTrain);
      d.test = read_dataset(cfg.dataset.dir / "test", cfg.sensor, DatasetRole::kTest);
      break;
    case DatasetSource::kCsv: {
      Rng r1(derive_seed(s, "train"));
      Rng r2(derive_seed(s, "test"));
      d.train = ingest_csv(cfg.dataset.csv_train, cfg.sensor, cfg.dataset.tracklet_len, r1);
      d.test = ingest_csv(cfg.dataset.csv_test, cfg.sensor, cfg.dataset.tracklet_len, r2);
      d.test.role = DatasetRole::kTest;
      break;
    }
  }
  if (d.train.empty() || d.test.empty()) throw DataError("dataset has no tracklets");
  return d;
}

// --- manifest ----------------------------------------------------------------------

std::string sha256_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest init failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return hex.str();
}

namespace {

constexpr const char* kManifestFormat = "dmtrack-manifest-1";

json config_json(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const auto& f : fields()) j[f.section][f.key] = f.get(cfg);
  return j;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  out.close();
  if (!out) throw std::runtime_error("write failed: " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Adds a command record and artifact hashes to dir/manifest.json. The config
/// snapshot is written to dir/config.ini; a directory can only hold one experiment.
void update_manifest(const fs::path& dir, const ExperimentConfig& cfg, json command,
                     const std::vector<fs::path>& artifacts) {
  const std::string ini = config_to_ini(cfg);
  const fs::path mpath = dir / "manifest.json";
  json m;
  if (fs::exists(mpath)) {
    m = json::parse(read_text(mpath));
    if (m.value("config", std::string()) != ini) {
      throw ConfigError("output directory " + dir.string() +
                        " already holds a different experiment; use a fresh --out");
    }
  } else {
    m["format"] = kManifestFormat;
    m["config"] = ini;
    m["config_fields"] = config_json(cfg);
    m["commands"] = json::array();
    m["artifacts"] = json::object();
  }
  write_text(dir / "config.ini", ini);
  m["commands"].push_back(std::move(command));
  m["artifacts"]["config.ini"] = sha256_file(dir / "config.ini");
  for (const auto& a : artifacts) {
    m["artifacts"][a.generic_string()] = sha256_file(dir / a);
  }
  write_text(mpath, m.dump(2) + "\n");
}

void write_loss_csv(const fs::path& p, const std::vector<double>& loss) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << std::setprecision(10) << "iter,loss\n";
  for (std::size_t i = 0; i < loss.size(); ++i) out << i << ',' << loss[i] << '\n';
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double tracklet_dt(const Dataset& ds) { return ds.tracklets.front().dt; }

double resolve_ekf_q(const ExperimentConfig& cfg, const Dataset& train) {
  if (cfg.ekf.q > 0.0) return cfg.ekf.q;
  return tune_cwna_q(train, tracklet_dt(train), cfg.ekf.q_lo, cfg.ekf.q_hi, cfg.ekf.q_points);
}

void save_ekf(const fs::path& p, double q, double dt) {
  std::ostringstream s;
  s << "EKF1\nq " << fmt_double(q) << "\ndt " << fmt_double(dt) << '\n';
  write_text(p, s.str());
}

double load_ekf_q(const fs::path& p) {
  std::ifstream in(p);
  std::string header, key;
  double q = 0.0;
  if (!in || !std::getline(in, header) || header != "EKF1") {
    throw ParseError(p.string(), 1, "missing EKF1 header");
  }
  if (!(in >> key >> q) || key != "q" || !(q >= 0.0)) throw ParseError(p.string(), 2, "expected 'q <value>'");
  return q;
}

Dataset slice(const Dataset& ds, std::size_t begin, std::size_t count, const std::string& what) {
  if (begin + count > ds.size()) {
    throw ConfigError(what + ": needs " + std::to_string(begin + count) +
                      " training tracklets, dataset has " + std::to_string(ds.size()));
  }
  Dataset out;
  out.sensor = ds.sensor;
  out.role = ds.role;
  out.tracklets.assign(ds.tracklets.begin() + static_cast<std::ptrdiff_t>(begin),
                       ds.tracklets.begin() + static_cast<std::ptrdiff_t>(begin + count));
  return out;
}

}  // namespace

std::vector<std::string> validate_manifest(const fs::path& dir) {
  std::vector<std::string> problems;
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) return {"manifest.json missing"};
  json m;
  try {
    m = json::parse(read_text(mpath));
  } catch (const json::exception& e) {
    return {std::string("manifest.json unreadable: ") + e.what()};
  }
  if (m.value("format", std::string()) != kManifestFormat) problems.push_back("unknown manifest format");
  if (!m.contains("artifacts") || !m["artifacts"].is_object()) {
    problems.push_back("manifest lists no artifacts");
    return problems;
  }
  for (const auto& [rel, hash] : m["artifacts"].items()) {
    const fs::path p = dir / rel;
    if (!fs::exists(p)) {
      problems.push_back(rel + ": missing");
    } else if (sha256_file(p) != hash.get<std::string>()) {
      problems.push_back(rel + ": hash mismatch");
    }
  }
  if (fs::exists(dir / "config.ini") && read_text(dir / "config.ini") != m.value("config", std::string())) {
    problems.push_back("config.ini differs from the manifest snapshot");
  }
  return problems;
}

// --- commands ----------------------------------------------------------------------

void cmd_simulate(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  if (cfg.dataset.source == DatasetSource::kDir) {
    throw ConfigError("dataset.source: simulate needs gct or csv");
  }
  const Datasets d = load_datasets(cfg);
  fs::create_directories(out);
  write_dataset(d.train, out / "train");
  write_dataset(d.test, out / "test");
  std::vector<fs::path> artifacts;
  for (const char* sub : {"train", "test"}) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(out / sub)) files.push_back(e.path().filename());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) artifacts.push_back(fs::path(sub) / f);
  }
  json c = {{"command", "simulate"},
            {"n_train", d.train.size()},
            {"n_test", d.test.size()},
            {"dataset_seed", *cfg.dataset.seed}};
  update_manifest(out, cfg, c, artifacts);
}

double cmd_train(const std::string& method, const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  const Datasets d = load_datasets(cfg);
  const Dataset& train = d.train;
  const std::uint64_t seed = derive_seed(*cfg.training_seed, method);
  fs::create_directories(out);
  const fs::path model = "model_" + method + ".txt";
  const fs::path loss = "loss_" + method + ".csv";
  json c = {{"command", "train"}, {"method", method}, {"seed", seed}};
  std::vector<fs::path> artifacts{model};
  bool aborted = false;
  const auto t0 = std::chrono::steady_clock::now();
  double wall = 0.0;

  if (method == "ekf") {
    const double q = resolve_ekf_q(cfg, train);
    wall = seconds_since(t0);
    save_ekf(out / model, q, tracklet_dt(train));
    c["q"] = q;
  } else if (method == "imm") {
    const double q0 = resolve_ekf_q(cfg, train);
    const ImmParams p0 = ImmParams::defaults(q0, cfg.sensor, cfg.imm.omega0, cfg.imm.p_stay);
    ImmTrainConfig tc = cfg.imm.train;
    tc.seed = seed;
    const ImmTrainResult r = train_imm(p0, train, tc);
    wall = seconds_since(t0);
    save_imm(out / model, r.params);
    write_loss_csv(out / loss, r.loss);
    artifacts.push_back(loss);
    aborted = r.aborted;
    c["q0"] = q0;
  } else if (method == "mkf") {
    Rng init_rng(derive_seed(seed, "init"));
    const LstmWeights w0 = LstmWeights::init(cfg.mkf.hidden, cfg.mkf.dense, init_rng, cfg.mkf.vel_scale);
    MkfTrainConfig tc = cfg.mkf.train;
    tc.seed = seed;
    tc.Q_reg = cfg.mkf.q_reg * Mat4::Identity();
    const MkfTrainResult r = train_mkf(w0, train, tc);
    wall = seconds_since(t0);
    save_mkf(out / model, r.weights);
    write_loss_csv(out / loss, r.loss);
    artifacts.push_back(loss);
    aborted = r.aborted;
  } else if (method == "gp") {
    const Dataset subset = slice(train, 0, cfg.gp.train_tracklets, "gp.train_tracklets");
    GpFitConfig fc = cfg.gp.fit;
    fc.seed = seed;
    GpFitHistory hist;
    if (cfg.gp.search == GpSearch::kEvidence) {
      const Dataset val = slice(train, cfg.gp.train_tracklets, cfg.gp.validation_tracklets,
                                "gp.validation_tracklets");
      const GpEvidenceResult ev =
          select_hyper_by_evidence(subset, val, cfg.gp.grid, fc, cfg.gp.pf, derive_seed(seed, "evidence"));
      fc.hyper0 = ev.best;
      fc.lml_steps = 0;
      const fs::path table = "gp_evidence.csv";
      std::ofstream t(out / table);
      t << std::setprecision(10) << "sigma0_sq,length_sq,noise_sq,neg_log_evidence\n";
      for (const auto& [h, nll] : ev.table) {
        t << h.sigma0_sq << ',' << h.length_sq << ',' << h.noise_sq << ',' << nll << '\n';
      }
      t.close();
      artifacts.push_back(table);
    }
    const GpPair m = gp_fit(subset, fc, &hist);
    wall = seconds_since(t0);
    save_gp(out / model, m);
    std::ofstream l(out / loss);
    l << std::setprecision(10) << "iter,loss_x,loss_y\n";
    for (std::size_t i = 0; i < std::max(hist.nlml_x.size(), hist.nlml_y.size()); ++i) {
      l << i << ',' << (i < hist.nlml_x.size() ? hist.nlml_x[i] : 0.0) << ','
        << (i < hist.nlml_y.size() ? hist.nlml_y[i] : 0.0) << '\n';
    }
    l.close();
    artifacts.push_back(loss);
    c["hyper_x"] = {m.x.hyper().sigma0_sq, m.x.hyper().length_sq, m.x.hyper().noise_sq};
    c["hyper_y"] = {m.y.hyper().sigma0_sq, m.y.hyper().length_sq, m.y.hyper().noise_sq};
  } else {
    throw ConfigError("--method: unknown method '" + method + "' (expected ekf|gp|imm|mkf)");
  }
  c["wall_clock_s"] = wall;
  c["aborted"] = aborted;
  update_manifest(out, cfg, c, artifacts);
  if (aborted) throw TrainingAborted(method, out / model);
  return wall;
}

void cmd_evaluate(const ExperimentConfig& cfg, const fs::path& out) {
  cfg.validate();
  const bool needs_models =
      std::any_of(cfg.methods.begin(), cfg.methods.end(),
                  [&](const std::string& m) { return m != "ekf" || cfg.ekf.q <= 0.0; });
  if (needs_models) {
    if (cfg.model_dir.empty()) throw ConfigError("evaluate.model_dir: required");
    const fs::path mpath = cfg.model_dir / "manifest.json";
    if (!fs::exists(mpath)) throw ConfigError("evaluate.model_dir: no manifest.json in " + cfg.model_dir.string());
    const json m = json::parse(read_text(mpath));
    const json mine = config_json(cfg)["sensor"];
    if (!m.contains("config_fields") || m["config_fields"]["sensor"] != mine) {
      throw ConfigError("sensor: parameters differ from those the models in " +
                        cfg.model_dir.string() + " were trained with");
    }
  }
  const Datasets d = load_datasets(cfg);
  const Dataset& test = d.test;
  const SensorConfig& sensor = cfg.sensor;
  MethodRecords runs;
  json c = {{"command", "evaluate"}, {"methods", cfg.methods}, {"seed", *cfg.evaluate_seed}};
  for (const auto& method : cfg.methods) {
    std::vector<RunRecord> recs;
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path model = cfg.model_dir / ("model_" + method + ".txt");
    if (method != "ekf" || cfg.ekf.q <= 0.0) {
      if (!fs::exists(model)) throw ConfigError("evaluate.model_dir: missing " + model.string());
      c["models"][method] = sha256_file(model);
    }
    if (method == "ekf") {
      const double q = cfg.ekf.q > 0.0 ? cfg.ekf.q : load_ekf_q(model);
      for (const auto& tr : test.tracklets) {
        recs.push_back(make_record(tr, run_ekf(tr, sensor, {tr.dt, q}), sensor));
      }
    } else if (method == "imm") {
      const ImmParams p = load_imm(model);
      for (const auto& tr : test.tracklets) {
        recs.push_back(make_record(tr, run_imm(tr, sensor, p, cfg.imm.train.options).trace, sensor));
      }
    } else if (method == "mkf") {
      const LstmWeights w = load_mkf(model);
      const Mat4 Q = cfg.mkf.q_reg * Mat4::Identity();
      for (const auto& tr : test.tracklets) {
        recs.push_back(make_record(tr, run_mkf(tr, sensor, w, Q), sensor));
      }
    } else if (method == "gp") {
      const GpPair m = load_gp(model);
      const std::uint64_t s = derive_seed(*cfg.evaluate_seed, "gp");
      std::size_t collapses = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        Rng rng = stream_rng(s, i);
        const PfTrace t = run_gp_pf(test.tracklets[i], sensor, m, cfg.gp.pf, rng);
        collapses += t.collapses;
        recs.push_back(make_record(test.tracklets[i], t.trace, sensor));
      }
      c["gp_weight_collapses"] = collapses;
    }
    c["wall_clock_s"][method] = seconds_since(t0);
    runs.emplace_back(method, std::move(recs));
  }
  make_report(out, runs);
  std::vector<fs::path> artifacts{"scores.csv", "noise_level.csv", "summary.txt"};
  for (const auto& [method, recs] : runs) {
    artifacts.push_back("series_" + method + "_pred.csv");
    artifacts.push_back("series_" + method + "_upd.csv");
  }
  update_manifest(out, cfg, c, artifacts);
}

std::string cmd_report(const fs::path& dir) {
  const auto problems = validate_manifest(dir);
  if (!problems.empty()) {
    std::string msg = "manifest check failed for " + dir.string() + ":";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataError(msg);
  }
  if (fs::exists(dir / "summary.txt")) return read_text(dir / "summary.txt");
  return "manifest ok: " + dir.string() + "\n";
}

}  // namespace dmt
