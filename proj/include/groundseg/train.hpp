#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "groundseg/core_data.hpp"
#include "groundseg/metrics.hpp"
#include "groundseg/mllm.hpp"
#include "groundseg/model_dims.hpp"
#include "groundseg/objectives.hpp"
#include "groundseg/vision.hpp"

namespace groundseg {

struct OptimizerConfig {
  std::string name = "adamw";
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 1.0;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct RunConfig {
  std::string data_dir;
  ModelDims model;
  LossConfig loss;
  OptimizerConfig optimizer;
  int batch_size = 16;
  int steps = 2000;
  std::uint64_t seed = 0;
  /// Evaluate referring segmentation on the val split every N steps; 0 = never.
  int eval_every = 0;
  /// Use only the first N train patches; 0 = all.
  int max_train_patches = 0;
  /// Generation budget at evaluation time.
  int max_answer_tokens = 48;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

template <typename T>
struct Model {
  ModelDims dims;
  VisionParams<T> vision;
  LMParams<T> lm;

  explicit Model(const ModelDims& d) : dims(d), vision(d), lm(d) {}
  void init(std::uint64_t seed);
  /// Every parameter, vision first, in a fixed order.
  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
};

struct CheckpointBundle {
  RunConfig config;
  int step = 0;
  Vocabulary vocab;
  Model<float> model;

  explicit CheckpointBundle(const RunConfig& c) : config(c), model(c.model) {}
};

struct StepRecord {
  int step = 0;
  double mask = 0, txt = 0, con = 0, total = 0;
  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<std::pair<int, MetricsReport>> evals;
  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, std::vector<std::string> batch_ids)
      : std::runtime_error(what), batch_ids(std::move(batch_ids)) {}
  std::vector<std::string> batch_ids;
};

/// One teacher-forced (patch, question, answer) training item.
struct Example {
  const PatchRecord* patch = nullptr;
  const QARecord* qa = nullptr;
  std::vector<int> text_ids;  // bos question answer eos
  int answer_begin = 0;       // first answer position in text_ids
  std::string id;
};

Example make_example(const PatchRecord& patch, const QARecord& qa, const Vocabulary& vocab);
Vocabulary default_vocabulary();

struct BatchLosses {
  double mask = 0, txt = 0, con = 0, total = 0;
};

/// Builds the weighted training objective over `batch` on graph `g` and
/// returns the scalar node plus its components.
template <typename T>
std::pair<ag::Var<T>, BatchLosses> batch_objective(ag::Graph<T>& g, Model<T>& model, const std::vector<Example>& batch,
                                                   const LossConfig& cfg);

struct TrainOptions {
  /// Where the last good checkpoint goes if a non-finite loss aborts training.
  std::optional<std::filesystem::path> abort_dir;
  std::function<void(const StepRecord&)> on_step;
};

struct TrainResult {
  CheckpointBundle checkpoint;
  TrainLog log;
};

TrainResult train(const RunConfig& config, const DatasetSplits& data, const TrainOptions& options = {});
/// Loads config.data_dir and trains on it.
TrainResult train(const RunConfig& config, const TrainOptions& options = {});

// ---------------------------------------------------------------------------
// Evaluation

struct Prediction {
  std::vector<int> answer_ids;
  std::string answer_text;
  std::vector<Mask> masks;  // one per emitted seg token
};

Prediction predict(const CheckpointBundle& ckpt, const PatchRecord& patch, const QARecord& qa);

struct EvalItem {
  const PatchRecord* patch = nullptr;
  const QARecord* qa = nullptr;
  Prediction prediction;
};

/// Scores predictions: segmentation tasks pair masks with reference slots in
/// order (unmatched slots score IoU 0); conversation uses BLEU-4 and F1.
MetricsReport score_predictions(const std::vector<EvalItem>& items, TaskType task, const std::string& split);

MetricsReport evaluate(const CheckpointBundle& ckpt, const DatasetSplits& data, const std::string& split, TaskType task);
/// Loads ckpt.config.data_dir.
MetricsReport evaluate(const CheckpointBundle& ckpt, const std::string& split, TaskType task);

const std::vector<PatchRecord>& split_by_name(const DatasetSplits& data, const std::string& split);

// ---------------------------------------------------------------------------
// Persistence

void save_checkpoint(const CheckpointBundle& bundle, const std::filesystem::path& dir);
CheckpointBundle load_checkpoint(const std::filesystem::path& dir);
void save_train_log(const TrainLog& log, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Named gradient-check fixtures: bce, dice, consistency, text, pipeline.

std::vector<std::string> grad_check_fixture_names();
/// Tolerance the fixture must meet on max relative error.
double grad_check_tolerance(const std::string& name);
GradCheckReport run_grad_check_fixture(const std::string& name);

}  // namespace groundseg
