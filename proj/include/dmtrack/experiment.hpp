#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmtrack/ekf.hpp"
#include "dmtrack/gptrack.hpp"
#include "dmtrack/immopt.hpp"
#include "dmtrack/mkf.hpp"
#include "dmtrack/simkit.hpp"

namespace dmt {

enum class DatasetSource { kGct, kDir, kCsv };

struct DatasetSection {
  DatasetSource source = DatasetSource::kGct;
  std::optional<std::uint64_t> seed;
  std::size_t n_train = 512;
  std::size_t n_test = 50;
  std::filesystem::path dir;        // source = dir: output of `simulate`
  std::filesystem::path csv_train;  // source = csv
  std::filesystem::path csv_test;
  std::size_t tracklet_len = 100;
};

struct EkfSection {
  double q = 0.0;  // 0 selects q by training NLL
  double q_lo = 1e-4;
  double q_hi = 1e3;
  int q_points = 29;
};

enum class GpSearch { kMarginalLikelihood, kEvidence };

struct GpSection {
  std::size_t train_tracklets = 50;
  GpSearch search = GpSearch::kMarginalLikelihood;
  GpFitConfig fit;
  std::size_t validation_tracklets = 10;
  GpEvidenceGrid grid;
  PfConfig pf;
};

struct ImmSection {
  ImmTrainConfig train;
  double omega0 = 0.1;
  double p_stay = 0.95;
};

struct MkfSection {
  MkfTrainConfig train;
  int hidden = 32;
  int dense = 32;
  double vel_scale = 10.0;
  double q_reg = 1e-2;
};

/// A fully resolved experiment. Relative paths are resolved against the
/// directory of the config file.
struct ExperimentConfig {
  GctConfig gct;
  SensorConfig sensor;
  DatasetSection dataset;
  EkfSection ekf;
  GpSection gp;
  ImmSection imm;
  MkfSection mkf;
  std::optional<std::uint64_t> training_seed;
  std::optional<std::uint64_t> evaluate_seed;
  std::vector<std::string> methods{"ekf", "gp", "imm", "mkf"};
  std::filesystem::path model_dir;

  void validate() const;
};

/// Reads an INI document. Unknown sections or keys, malformed values and
/// missing seeds raise ConfigError naming the field ("section.key").
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir);
/// Every field, defaults included, as INI text.
std::string config_to_ini(const ExperimentConfig& cfg);

/// Deterministic sub-seed for a named stream.
std::uint64_t derive_seed(std::uint64_t base, const std::string& tag);

struct Datasets {
  Dataset train;
  Dataset test;
};
Datasets load_datasets(const ExperimentConfig& cfg);

/// Training stopped on a non-finite loss. The last good parameters were saved to `checkpoint`.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& method, std::filesystem::path checkpoint)
      : std::runtime_error(method + " training aborted on a non-finite loss; last good parameters in " +
                           checkpoint.string()),
        checkpoint_(std::move(checkpoint)) {}
  const std::filesystem::path& checkpoint() const noexcept { return checkpoint_; }

 private:
  std::filesystem::path checkpoint_;
};

/// Writes train/ and test/ dataset directories.
void cmd_simulate(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// method: ekf | gp | imm | mkf. Writes model_<method>.txt, loss_<method>.csv
/// (except ekf) and updates the manifest. Returns training wall-clock seconds.
double cmd_train(const std::string& method, const ExperimentConfig& cfg,
                 const std::filesystem::path& out);

/// Runs cfg.methods on the test set with models from cfg.model_dir and writes the report.
void cmd_evaluate(const ExperimentConfig& cfg, const std::filesystem::path& out);

/// Checks the manifest of `dir` and returns the summary text.
std::string cmd_report(const std::filesystem::path& dir);

std::string sha256_file(const std::filesystem::path& path);

/// Problems found when re-hashing the artifacts listed in dir/manifest.json;
/// empty when everything matches.
std::vector<std::string> validate_manifest(const std::filesystem::path& dir);

}  // namespace dmt
