#pragma once

// Experiment orchestration: configuration, the staged pipeline behind the CLI
// subcommands, ablations and report emission.
//
// A run directory holds:
//   roi/                 ROI-cropped dataset (preprocess)
//   roi_windows.csv      per study and view ROI placement
//   student.ckpt, teacher.ckpt, stage1_loss.csv                 (train-stage1)
//   decoder.ckpt, codebooks.ckpt, stage2_loss.csv, codebook_usage.csv  (train-stage2)
//   features.csv, cox_model.json                                 (fit-surv)
//   report.json, km_curve.csv, attribution.csv, feature_ranking.csv, risk_scores.csv  (eval)
//   .lock                exclusive ownership while a command runs

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "ctsl/codebook.hpp"
#include "ctsl/dataset_io.hpp"
#include "ctsl/distill.hpp"
#include "ctsl/encoder.hpp"
#include "ctsl/flowroi.hpp"
#include "ctsl/metrics.hpp"
#include "ctsl/survival.hpp"
#include "ctsl/synthcine.hpp"

namespace ctsl::runner {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

enum class Mode { full_ctsl, distilled_no_vq, random_encoder, ehr_only_cox };

std::string_view mode_name(Mode m);
Mode parse_mode(std::string_view name);

struct ExperimentConfig {
  std::uint64_t seed = 7;
  Mode mode = Mode::full_ctsl;
  std::string device = "cpu";

  std::optional<std::filesystem::path> data_dir;  // raw dataset; synthesised when absent
  std::size_t n_studies = 200;
  double train_fraction = 0.6;
  double val_fraction = 0.1;
  PhantomParams phantom;

  std::size_t roi_size = 32;
  flowroi::RoiConfig roi;

  encoder::EncoderConfig encoder;
  distill::StageIConfig stage1;
  codebook::StageIIConfig stage2;
  survival::CoxConfig survival;

  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  json to_json() const;
  void validate() const;
};

// Default raw dataset location: the config's data dir, else $CTSL_DATA_DIR,
// else <run_dir>/data.
std::filesystem::path resolve_data_dir(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

// Holds <dir>/.lock for the lifetime of the object; throws if already held.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct PreparedData {
  std::vector<StudyRecord> studies;  // ROI-cropped
  std::vector<Split> splits;
};

// Subset indices for a split, in dataset order.
std::vector<std::size_t> split_indices(const PreparedData& data, Split s);

Dataset synthesize(const ExperimentConfig& cfg);
// ROI localisation and cropping of every view, each with its own window.
PreparedData preprocess(const Dataset& raw, const ExperimentConfig& cfg,
                        std::vector<std::vector<flowroi::ROIWindow>>* windows = nullptr);

// Image feature vector of one ROI study for the given artifacts; empty for
// ehr_only_cox. Codebooks are used when both are present.
struct ImageModel {
  std::optional<encoder::EncoderWeights> student;
  std::optional<codebook::Codebook> book_tau;
  std::optional<codebook::Codebook> book_sigma;
};
std::vector<double> image_features(const StudyRecord& study, const ImageModel& model, bool* untrained_codebook = nullptr);

// Fused [EHR, image] rows for every study.
struct FeatureTable {
  std::vector<std::string> ids;
  std::vector<Split> splits;
  std::vector<double> time;
  std::vector<int> event;
  Eigen::MatrixXd x;
  std::size_t ehr_dim = 0;
  bool untrained_codebook = false;

  std::vector<std::size_t> rows(Split s) const;
};

FeatureTable build_features(const PreparedData& data, const ImageModel& model);
void save_features(const std::filesystem::path& path, const FeatureTable& table);
FeatureTable load_features(const std::filesystem::path& path);

// Cox head fitted on the train rows.
survival::CoxModel fit_head(const FeatureTable& table, const ExperimentConfig& cfg);
json cox_to_json(const survival::CoxModel& model);
survival::CoxModel cox_from_json(const json& j);

struct Evaluation {
  Mode mode = Mode::full_ctsl;
  survival::CoxModel cox;
  double c_index_train = 0.0;
  std::optional<double> c_index_val;
  double c_index_test = 0.0;
  std::vector<std::string> test_ids;
  std::vector<double> test_risk;
  std::optional<metrics::LogRankResult> log_rank;
  std::size_t n_high = 0, n_low = 0;
  metrics::KmCurve km_high, km_low;
  survival::Attribution attribution;
  std::size_t ehr_dim = 0;
  bool untrained_codebook = false;
};

Evaluation evaluate(const FeatureTable& table, const survival::CoxModel& cox, Mode mode);

struct StageLogs {
  std::vector<distill::LossParts> stage1;
  std::vector<codebook::EpochRecord> stage2;
};

// Trains whatever the mode needs on the train split and returns the image model.
ImageModel train_image_model(const PreparedData& data, Mode mode, const ExperimentConfig& cfg, StageLogs* logs);

json report_json(const Evaluation& eval, const ExperimentConfig& cfg, const FeatureTable& table, const StageLogs& logs);

// Writes report.json and the plot-data CSVs.
void write_evaluation(const std::filesystem::path& run_dir, const Evaluation& eval, const json& report);
void write_stage_logs(const std::filesystem::path& run_dir, const StageLogs& logs);

// CLI subcommands. Each takes the run directory lock.
void cmd_synth(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);
void cmd_preprocess(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);
void cmd_train_stage1(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);
void cmd_train_stage2(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);
void cmd_fit_surv(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);
json cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);
// Whole pipeline in one process: data, preprocessing, training, evaluation.
json cmd_report(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);
// random_encoder, distilled_no_vq and full_ctsl on the same data and seed.
json cmd_ablate(const ExperimentConfig& cfg, const std::filesystem::path& run_dir);

}  // namespace ctsl::runner
