#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "questmf/checkpoint.hpp"
#include "questmf/metrics.hpp"
#include "questmf/model.hpp"

namespace questmf {

// Defaults sized so validation selection has settled well before the cut;
// on the bundled synthetic corpus the selected epochs sit near the midpoint
// of each budget.
struct EpochSpec {
  std::size_t text = 20;
  std::size_t audio = 25;
  std::size_t video = 30;
  std::size_t fusion = 20;
};

struct TrainConfig {
  Framework framework = Framework::questmf;
  LossKind loss = LossKind::imboll;
  double alpha = 1.0;
  double beta = 0.5;
  WeightPooling pooling = WeightPooling::per_question;
  std::vector<Modality> modalities = {Modality::text, Modality::audio, Modality::video};
  double lr = 5e-4;
  std::size_t batch_size = 10;
  EpochSpec epochs;
  std::size_t d_lstm = 50;
  std::size_t heads = 4;
  std::size_t max_turns = 120;
  std::size_t head_hidden = 256;
  std::uint64_t seed = 42;
};

void validate(const TrainConfig& cfg);

// Canonical JSON round trip; parsing rejects unknown keys so config typos
// fail loudly. The hash covers every field except the seed, which names a
// sibling directory under the hash.
std::string to_json_string(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string config_hash(const TrainConfig& cfg);

std::size_t stage1_epochs(const TrainConfig& cfg, Modality m);
const char* name(LossKind k);
std::optional<LossKind> loss_from(std::string_view s);

// One history row per epoch; row 0 is the freshly initialized model
// evaluated without dropout, later rows pair the running mean of minibatch
// training losses with a post-epoch eval pass on the validation split.
struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_ccc = 0.0;
};

enum class SelectBy { min_val_loss, max_val_ccc };

// Index of the argmin/argmax row; ties go to the earliest epoch.
std::size_t select_checkpoint(std::span<const EpochRecord> history, SelectBy criterion);

void write_history(const std::filesystem::path& path, std::span<const EpochRecord> history);

struct NetEval {
  double loss = 0.0;
  double ccc = 0.0;
  std::vector<double> scores;  // one decision-rule prediction per session
};

// Eval-mode loss (per-session average of the training loss kind) and CCC of
// the decision-rule predictions for one network. `question` picks the label
// column; -1 targets session totals.
NetEval evaluate_net(QuestionNet& net, std::span<const Session* const> sessions,
                     const TrainConfig& cfg, int question,
                     const std::array<double, kNumClasses>& weights,
                     const FrozenTextCache* text_cache = nullptr);

struct TrainNetResult {
  std::vector<EpochRecord> history;
  std::vector<Tensor> best_loss_params;
  std::size_t best_loss_epoch = 0;
  std::vector<Tensor> best_ccc_params;
  std::size_t best_ccc_epoch = 0;
};

// Trains one network in place and returns its history plus parameter
// snapshots at the lowest-validation-loss and best-validation-CCC epochs.
// Shuffle, dropout, and initialization streams all derive from the run seed
// and `rng_path`, so results do not depend on sibling runs.
TrainNetResult train_one_net(QuestionNet& net, const Dataset& ds, const TrainConfig& cfg,
                             int question, std::size_t epochs, const std::string& rng_path,
                             const std::vector<std::string>& frozen_prefixes = {},
                             const FrozenTextCache* text_cache = nullptr);

// Class-weight row for one question from train-split counts (uniform unless
// the loss is imboll).
std::array<double, kNumClasses> question_weights(const Dataset& ds, const TrainConfig& cfg,
                                                 int question);

MetricsReport report_from_question_scores(std::string_view split_name,
                                          std::span<const Session* const> sessions,
                                          const std::vector<std::array<double, kNumQuestions>>&
                                              question_scores);
MetricsReport report_from_totals(std::string_view split_name,
                                 std::span<const Session* const> sessions,
                                 std::span<const double> totals);

// Dropout-free metrics for a finished model on one split.
MetricsReport evaluate_split(QuestMfModel& model, std::span<const Session* const> sessions,
                             std::string_view split_name, std::size_t batch_size,
                             std::size_t max_turns);

struct RunResult {
  MetricsReport val;
  MetricsReport test;
  std::filesystem::path run_dir;
};

// Full staged pipeline for one seed: stage-1 encoders per modality (and per
// question under questmf), then fusion with the text branch frozen when two
// or more modalities are requested; artifacts land under
// run_root/<config-hash>/<seed>/.
RunResult run_single_seed(const Dataset& ds, const TrainConfig& cfg,
                          const std::filesystem::path& run_root);

// Repeats run_single_seed per seed and aggregates the test reports.
AggregateReport run_multi_seed(const Dataset& ds, const TrainConfig& cfg,
                               std::span<const std::uint64_t> seeds,
                               const std::filesystem::path& run_root);

// Reconstructs the final model a run directory describes (model.json plus
// the selected checkpoints).
struct LoadedModel {
  TrainConfig cfg;
  QuestMfModel model;
};
LoadedModel load_final_model(const std::filesystem::path& run_dir);

}  // namespace questmf
