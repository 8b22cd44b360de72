#pragma once

// Base-then-fine-tune experiment matrix over a two-domain corpus bundle:
// every (mode, seed) cell fine-tunes the base model on the target domain and
// is scored on the target test set with and without kNN decoding.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tknn/bleu.hpp"
#include "tknn/config.hpp"
#include "tknn/synthetic.hpp"
#include "tknn/trainer.hpp"

namespace tknn {

struct KnnGrid {
  std::vector<std::size_t> k{4, 8, 16};
  std::vector<double> lambda{0.3, 0.5, 0.7};
  std::vector<double> temperature{1.0, 10.0};
  std::size_t size() const { return k.size() * lambda.size() * temperature.size(); }
};

struct ExperimentConfig {
  std::string base_domain = "A";
  std::string target_domain = "B";
  std::size_t merges = 500;
  /// Whitespace-token length filter applied to training splits.
  std::size_t max_sentence_words = 250;
  ModelShape model{0, 0, 64, 4, 256, 2, 2, 128};
  std::uint64_t init_seed = 1;
  TrainConfig base_train;
  /// Mode is overridden per cell and seed per run.
  TrainConfig finetune;
  std::vector<TrainMode> modes{TrainMode::vanilla, TrainMode::gate, TrainMode::gtprob, TrainMode::rl};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  KnnGrid grid;
  std::size_t beam = 1;
  std::size_t decode_batch = 64;
  /// Also decode with the tuned k and T at lambda = 0.
  bool lambda_zero_column = false;
  bool save_checkpoints = true;

  static ExperimentConfig desk_default();
  void validate() const;
};

ExperimentConfig experiment_config_from_json(const Json& j, const std::string& where = "experiment");
Json to_json(const ExperimentConfig& c);

struct ExperimentRow {
  std::string domain;
  std::string model;  // "base" or a training mode
  std::string knn;    // "none", "tuned" or "lambda0"
  std::uint64_t seed = 0;
  std::optional<KnnParams> params;
  BleuReport report;
  std::vector<std::string> hypotheses;
  std::string error;  // empty on success
  double seconds = 0.0;
  bool ok() const { return error.empty(); }
};

struct SummaryRow {
  std::string domain, model, knn;
  std::size_t runs = 0, failures = 0;
  double mean = 0.0, stddev = 0.0, min = 0.0, max = 0.0;
};

struct ExperimentResult {
  std::vector<ExperimentRow> rows;
  std::vector<SummaryRow> summary;
  double seconds = 0.0;

  const SummaryRow* find(const std::string& domain, const std::string& model, const std::string& knn) const;
};

/// Sample standard deviation over successful runs; failed runs are counted.
std::vector<SummaryRow> summarize(const std::vector<ExperimentRow>& rows);

/// Trains, fine-tunes and evaluates every cell. A failing cell is recorded
/// and the matrix continues. When `out_dir` is non-empty, vocabularies,
/// checkpoints, training logs, hypotheses and both tables are written there.
ExperimentResult run_experiment_matrix(const ExperimentConfig& config, const CorpusBundle& bundle,
                                       const std::filesystem::path& out_dir = {}, std::ostream* log = nullptr);

void write_results_tsv(const std::vector<ExperimentRow>& rows, const std::filesystem::path& path);
void write_summary_tsv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path);

struct DirectionalCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// (a) every kNN-trained mode within `margin` BLEU of vanilla fine-tuning,
/// one strictly above; (b) tuned kNN decoding at least as good as plain
/// decoding for every fine-tuned mode; (c) the vanilla fine-tuned model with
/// its own datastore at least as good as the base model with the base datastore.
std::vector<DirectionalCheck> directional_checks(const ExperimentResult& result, const ExperimentConfig& config,
                                                 double margin = 0.5);

}  // namespace tknn
