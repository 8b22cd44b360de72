#pragma once

// Fine-tuning with vanilla cross-entropy or kNN-scaled token losses, Adam,
// and scheduled datastore refresh.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tknn/datastore.hpp"
#include "tknn/knn.hpp"
#include "tknn/model.hpp"

namespace tknn {

enum class TrainMode { vanilla, gate, gtprob, rl };
enum class LossForm { ratio_weight, literal };

std::string to_string(TrainMode m);
std::string to_string(LossForm f);
TrainMode parse_train_mode(std::string_view s);
LossForm parse_loss_form(std::string_view s);

enum class Provenance { vanilla, gate, gtprob_hit, gtprob_floor, rl_reward, rl_floor, rl_correct };
std::string to_string(Provenance p);

struct ScalingCoefficient {
  double g = 1.0;  // always > 0
  Provenance provenance = Provenance::vanilla;
  /// rl_correct: this token is trained with plain cross-entropy.
  bool use_vanilla() const { return provenance == Provenance::rl_correct || provenance == Provenance::vanilla; }
};

struct TrainConfig {
  TrainMode mode = TrainMode::vanilla;
  KnnParams knn{8, 10.0, 0.6, false};
  double tau = 0.6;
  /// Gate constant; defaults to knn.lambda.
  std::optional<double> gate_c;
  LossForm loss_form = LossForm::ratio_weight;
  double learning_rate = 5e-4;
  std::size_t warmup_steps = 0;
  /// Target tokens per batch (at least one sentence per batch).
  std::size_t batch_tokens = 512;
  std::size_t accumulation = 1;
  std::size_t epochs = 1;
  /// Refresh every `refresh_steps` optimizer steps when > 0, otherwise
  /// every `refresh_epochs` epochs.
  std::size_t refresh_steps = 0;
  std::size_t refresh_epochs = 1;
  bool refresh_at_start = false;
  std::uint64_t seed = 1;
  double ce_floor = 1e-6;
  /// RL: take argmax of P_NMT instead of sampling.
  bool rl_argmax = false;
  /// Drop the query's own entry when the datastore is built on the training corpus.
  bool exclude_self = false;
  std::size_t datastore_batch = 64;

  double c() const { return gate_c.value_or(knn.lambda); }
  void validate() const;
};

/// -log p[y] with p[y] clamped at 1e-12.
double vanilla_ce(std::span<const double> p_nmt, TokenId y);

ScalingCoefficient gate_coefficient(double max_knn, double tau, double c);
ScalingCoefficient gtprob_coefficient(std::span<const double> p_knn, TokenId y, std::size_t k);
ScalingCoefficient rl_reward(std::span<const double> p_knn, TokenId sampled, TokenId y, std::size_t k);

struct ScaledLoss {
  double value;
  /// Detached factor multiplying the cross-entropy gradient.
  double weight;
};

ScaledLoss scaled_loss(double ce, const ScalingCoefficient& g, TrainMode mode, LossForm form, double ce_floor);

template <typename T>
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  explicit Adam(std::vector<Array<T>> params);

  /// Applies one bias-corrected update from the accumulated gradients.
  /// Returns false (parameters and moments untouched) if any gradient is
  /// non-finite.
  bool step(double learning_rate);
  std::size_t steps() const { return t_; }
  void zero_grad();

 private:
  std::vector<Array<T>> params_;
  std::vector<Mat<T>> m_, v_;
  std::size_t t_ = 0;
};

/// Per-token detached statistics for one batch.
struct TokenStats {
  std::vector<double> ce;
  std::vector<ScalingCoefficient> coefficients;
  std::vector<ScaledLoss> losses;
  TokenIds sampled;  // rl only
};

/// `log_probs` is rows x vocab log P_NMT; `queries` the matching f_kNN rows.
/// `retriever` may be null only in vanilla mode.
TokenStats compute_token_stats(const TrainConfig& config, const Mat<double>& log_probs, std::span<const TokenId> labels,
                               const Mat<float>& queries, const Retriever* retriever,
                               std::span<const std::int64_t> exclude, std::mt19937_64& rng);

/// Sum over rows of weight_i * (-log p[label_i]), times `scale`.
template <typename T>
Array<T> weighted_ce(Tape<T>& tape, const Array<T>& logits, std::span<const TokenId> labels,
                     std::span<const double> weights, double scale);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps so far
  std::size_t tokens = 0;
  double mean_loss = 0.0;
  double mean_ce = 0.0;
  double mean_g = 0.0;
  double fraction_gated = 0.0;       // tokens with g < 1
  std::vector<std::size_t> g_histogram;  // 10 bins over (0, 1]
  std::vector<std::size_t> provenance;   // indexed by Provenance
  std::size_t skipped_steps = 0;
  std::size_t refreshes = 0;
  std::uint64_t generation = 0;
  std::optional<double> valid_bleu;
  double seconds = 0.0;  // not serialized, so logs stay reproducible
};

std::string to_json_line(const EpochMetrics& m, TrainMode mode);

template <typename T>
struct TrainHooks {
  std::ostream* log = nullptr;  // one JSON record per epoch
  std::function<double(const NmtModel<T>&)> validate;
  /// Called before every retrieval with (model generation, datastore generation).
  std::function<void(std::uint64_t, std::uint64_t)> on_query;
};

template <typename T>
struct FineTuneResult {
  std::vector<EpochMetrics> epochs;
  /// Datastore current at the end of training (null in vanilla mode).
  std::shared_ptr<const Datastore> datastore;
};

/// Trains `model` in place. In kNN modes `datastore` must be built over
/// `train` with the model's current weights (matching generation) unless
/// `refresh_at_start` is set or it is null.
template <typename T>
FineTuneResult<T> fine_tune(NmtModel<T>& model, const EncodedCorpus& train, std::shared_ptr<const Datastore> datastore,
                            const TrainConfig& config, const TrainHooks<T>& hooks = {});

}  // namespace tknn
