#include "tknn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace tknn {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::vanilla: return "vanilla";
    case TrainMode::gate: return "gate";
    case TrainMode::gtprob: return "gtprob";
    case TrainMode::rl: return "rl";
  }
  return "?";
}

std::string to_string(LossForm f) { return f == LossForm::ratio_weight ? "ratio-weight" : "literal"; }

TrainMode parse_train_mode(std::string_view s) {
  if (s == "vanilla") return TrainMode::vanilla;
  if (s == "gate") return TrainMode::gate;
  if (s == "gtprob") return TrainMode::gtprob;
  if (s == "rl") return TrainMode::rl;
  throw std::invalid_argument("unknown training mode '" + std::string(s) + "' (expected vanilla, gate, gtprob or rl)");
}

LossForm parse_loss_form(std::string_view s) {
  if (s == "ratio-weight") return LossForm::ratio_weight;
  if (s == "literal") return LossForm::literal;
  throw std::invalid_argument("unknown loss form '" + std::string(s) + "' (expected ratio-weight or literal)");
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::vanilla: return "vanilla";
    case Provenance::gate: return "gate";
    case Provenance::gtprob_hit: return "gtprob-hit";
    case Provenance::gtprob_floor: return "gtprob-floor";
    case Provenance::rl_reward: return "rl-reward";
    case Provenance::rl_floor: return "rl-floor";
    case Provenance::rl_correct: return "rl-correct";
  }
  return "?";
}

void TrainConfig::validate() const {
  knn.validate();
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must be in [0, 1]");
  if (!(c() > 0.0 && c() <= 1.0)) throw std::invalid_argument("gate constant c must be in (0, 1]");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
  if (batch_tokens < 1) throw std::invalid_argument("batch_tokens must be >= 1");
  if (accumulation < 1) throw std::invalid_argument("accumulation must be >= 1");
  if (refresh_epochs < 1) throw std::invalid_argument("refresh interval must be >= 1");
  if (!(ce_floor > 0.0)) throw std::invalid_argument("ce floor must be > 0");
  if (datastore_batch < 1) throw std::invalid_argument("datastore_batch must be >= 1");
}

double vanilla_ce(std::span<const double> p_nmt, TokenId y) {
  if (y >= p_nmt.size()) throw std::invalid_argument("vanilla_ce: token outside vocabulary");
  return -std::log(std::max(p_nmt[y], 1e-12));
}

ScalingCoefficient gate_coefficient(double max_knn, double tau, double c) {
  if (max_knn < tau) return {c, Provenance::gate};
  return {1.0, Provenance::gate};
}

ScalingCoefficient gtprob_coefficient(std::span<const double> p_knn, TokenId y, std::size_t k) {
  if (k < 1) throw std::invalid_argument("gtprob_coefficient: k must be >= 1");
  if (y < p_knn.size() && p_knn[y] > 0.0) return {p_knn[y], Provenance::gtprob_hit};
  return {1.0 / static_cast<double>(k), Provenance::gtprob_floor};
}

ScalingCoefficient rl_reward(std::span<const double> p_knn, TokenId sampled, TokenId y, std::size_t k) {
  if (k < 1) throw std::invalid_argument("rl_reward: k must be >= 1");
  auto at = [&](TokenId v) { return v < p_knn.size() ? p_knn[v] : 0.0; };
  const double r = std::abs(at(sampled) - at(y));
  if (r > 0.0) return {r, Provenance::rl_reward};
  if (sampled == y) return {1.0, Provenance::rl_correct};
  return {1.0 / static_cast<double>(k), Provenance::rl_floor};
}

ScaledLoss scaled_loss(double ce, const ScalingCoefficient& g, TrainMode mode, LossForm form, double ce_floor) {
  if (mode == TrainMode::vanilla || g.use_vanilla()) return {ce, 1.0};
  if (mode == TrainMode::rl) return {g.g * ce, g.g};
  if (g.g == 1.0) return {ce, 1.0};
  const double value = ce - std::log(g.g);
  if (form == LossForm::literal) return {value, 1.0};
  return {value, value / std::max(ce, ce_floor)};
}

// ---------------------------------------------------------------------------

template <typename T>
Adam<T>::Adam(std::vector<Array<T>> params) : params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.push_back(Mat<T>::Zero(p.rows(), p.cols()));
    v_.push_back(Mat<T>::Zero(p.rows(), p.cols()));
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
bool Adam<T>::step(double learning_rate) {
  for (const auto& p : params_) {
    if (p.has_grad() && !p.grad().allFinite()) return false;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const Mat<T>& g = params_[i].grad();
    m_[i] = static_cast<T>(kBeta1) * m_[i] + static_cast<T>(1.0 - kBeta1) * g;
    v_[i] = static_cast<T>(kBeta2) * v_[i] + static_cast<T>(1.0 - kBeta2) * g.cwiseProduct(g);
    auto m_hat = m_[i].array() / static_cast<T>(c1);
    auto v_hat = v_[i].array() / static_cast<T>(c2);
    params_[i].mutable_value().array() -= static_cast<T>(learning_rate) * m_hat / (v_hat.sqrt() + static_cast<T>(kEps));
  }
  return true;
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------------------

TokenStats compute_token_stats(const TrainConfig& config, const Mat<double>& log_probs, std::span<const TokenId> labels,
                               const Mat<float>& queries, const Retriever* retriever,
                               std::span<const std::int64_t> exclude, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(log_probs.rows());
  const auto vocab = static_cast<std::size_t>(log_probs.cols());
  if (labels.size() != n) throw std::invalid_argument("compute_token_stats: label count does not match rows");
  TokenStats s;
  s.ce.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double lp = log_probs(static_cast<Eigen::Index>(i), labels[i]);
    s.ce[i] = -std::max(lp, std::log(1e-12));
  }
  s.coefficients.assign(n, ScalingCoefficient{});
  if (config.mode != TrainMode::vanilla) {
    if (retriever == nullptr) throw std::invalid_argument("compute_token_stats: kNN mode without a datastore");
    if (static_cast<std::size_t>(queries.rows()) != n) throw std::invalid_argument("compute_token_stats: query count does not match rows");
    const auto retrieved = retriever->search_batch(queries, config.knn.k, exclude);
    if (config.mode == TrainMode::rl) s.sampled.resize(n);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      TokenDistribution p_knn(vocab, 0.0);
      if (!retrieved[i].empty()) {
        p_knn = knn_distribution(retrieved[i], config.knn.temperature, vocab, config.knn.squared_distance);
      }
      switch (config.mode) {
        case TrainMode::gate:
          s.coefficients[i] = gate_coefficient(retrieved[i].empty() ? 0.0 : max_knn_prob(p_knn), config.tau, config.c());
          break;
        case TrainMode::gtprob:
          s.coefficients[i] = gtprob_coefficient(p_knn, labels[i], config.knn.k);
          break;
        case TrainMode::rl: {
          const auto row = log_probs.row(static_cast<Eigen::Index>(i));
          TokenId pick = 0;
          if (config.rl_argmax) {
            Eigen::Index arg = 0;
            row.maxCoeff(&arg);
            pick = static_cast<TokenId>(arg);
          } else {
            const double u = unit(rng);
            double acc = 0.0;
            pick = static_cast<TokenId>(vocab - 1);
            for (std::size_t v = 0; v < vocab; ++v) {
              acc += std::exp(row(static_cast<Eigen::Index>(v)));
              if (u < acc) {
                pick = static_cast<TokenId>(v);
                break;
              }
            }
          }
          s.sampled[i] = pick;
          s.coefficients[i] = rl_reward(p_knn, pick, labels[i], config.knn.k);
          break;
        }
        case TrainMode::vanilla: break;
      }
    }
  }
  s.losses.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.losses.push_back(scaled_loss(s.ce[i], s.coefficients[i], config.mode, config.loss_form, config.ce_floor));
  }
  return s;
}

template <typename T>
Array<T> weighted_ce(Tape<T>& tape, const Array<T>& logits, std::span<const TokenId> labels,
                     std::span<const double> weights, double scale) {
  if (weights.size() != labels.size()) throw std::invalid_argument("weighted_ce: weight count does not match labels");
  Mat<T> w(static_cast<Eigen::Index>(weights.size()), 1);
  for (std::size_t i = 0; i < weights.size(); ++i) w(static_cast<Eigen::Index>(i), 0) = static_cast<T>(weights[i]);
  const TokenIds ids(labels.begin(), labels.end());
  auto picked = tape.pick(tape.log_softmax_rows(logits), ids);
  return tape.scale(tape.sum(tape.mul(picked, Array<T>::constant(std::move(w)))), -scale);
}

template Array<float> weighted_ce(Tape<float>&, const Array<float>&, std::span<const TokenId>, std::span<const double>, double);
template Array<double> weighted_ce(Tape<double>&, const Array<double>&, std::span<const TokenId>, std::span<const double>, double);

std::string to_json_line(const EpochMetrics& m, TrainMode mode) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["step"] = m.step;
  j["mode"] = to_string(mode);
  j["tokens"] = m.tokens;
  j["mean_loss"] = m.mean_loss;
  j["mean_ce"] = m.mean_ce;
  j["mean_g"] = m.mean_g;
  j["fraction_gated"] = m.fraction_gated;
  j["g_histogram"] = m.g_histogram;
  nlohmann::json prov = nlohmann::json::object();
  for (std::size_t p = 0; p < m.provenance.size(); ++p) {
    if (m.provenance[p] > 0) prov[to_string(static_cast<Provenance>(p))] = m.provenance[p];
  }
  j["provenance"] = prov;
  j["skipped_steps"] = m.skipped_steps;
  j["refreshes"] = m.refreshes;
  j["generation"] = m.generation;
  j["valid_bleu"] = m.valid_bleu ? nlohmann::json(*m.valid_bleu) : nlohmann::json(nullptr);
  return j.dump();
}

// ---------------------------------------------------------------------------

namespace {

Mat<double> log_softmax(const Mat<double>& logits) {
  Mat<double> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(const EncodedCorpus& c, std::span<const std::size_t> order,
                                                   std::size_t budget) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t tokens = 0;
  for (auto s : order) {
    const std::size_t t = c.target[s].size() - 1;
    if (!cur.empty() && tokens + t > budget) {
      batches.push_back(std::move(cur));
      cur.clear();
      tokens = 0;
    }
    cur.push_back(s);
    tokens += t;
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

}  // namespace

template <typename T>
FineTuneResult<T> fine_tune(NmtModel<T>& model, const EncodedCorpus& train, std::shared_ptr<const Datastore> datastore,
                            const TrainConfig& config, const TrainHooks<T>& hooks) {
  config.validate();
  if (train.size() == 0) throw std::invalid_argument("fine_tune: empty training corpus");
  const bool knn_mode = config.mode != TrainMode::vanilla;

  auto rebuild = [&] { datastore = std::make_shared<const Datastore>(build_datastore(model, train, config.datastore_batch)); };
  if (knn_mode) {
    if (!datastore || config.refresh_at_start) rebuild();
    if (datastore->dim() != model.shape().d_model) {
      throw std::invalid_argument("fine_tune: datastore dimension " + std::to_string(datastore->dim()) +
                                  " does not match model dimension " + std::to_string(model.shape().d_model));
    }
    if (datastore->generation() != model.generation()) {
      throw std::invalid_argument("fine_tune: datastore generation " + std::to_string(datastore->generation()) +
                                  " does not match model generation " + std::to_string(model.generation()));
    }
  }

  // Entry id of each (sentence, position) when the datastore mirrors `train`.
  std::vector<std::size_t> entry_offset(train.size() + 1, 0);
  for (std::size_t s = 0; s < train.size(); ++s) entry_offset[s + 1] = entry_offset[s] + train.target[s].size() - 1;
  if (knn_mode && config.exclude_self && datastore->size() != entry_offset.back()) {
    throw std::invalid_argument("fine_tune: exclude_self needs a datastore built over the training corpus");
  }

  std::mt19937_64 shuffle_rng(config.seed);
  std::mt19937_64 sample_rng(config.seed ^ 0x5851f42d4c957f2dULL);
  Adam<T> adam(model.param_arrays());
  adam.zero_grad();

  FineTuneResult<T> result;
  std::size_t since_refresh = 0;
  std::size_t pending = 0;  // batches accumulated since the last step
  std::size_t skipped = 0;
  std::size_t refreshes = 0;

  auto refresh = [&] {
    model.set_generation(model.generation() + 1);
    if (knn_mode) rebuild();
    since_refresh = 0;
    ++refreshes;
  };

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const auto batches = make_batches(train, order, config.batch_tokens);

    EpochMetrics em;
    em.epoch = epoch;
    em.g_histogram.assign(10, 0);
    em.provenance.assign(7, 0);
    double loss_sum = 0.0, ce_sum = 0.0, g_sum = 0.0;
    std::size_t gated = 0;
    const std::size_t skipped_before = skipped;
    const std::size_t refreshes_before = refreshes;

    for (const auto& batch : batches) {
      std::vector<TokenIds> src, tgt;
      std::vector<std::int64_t> exclude;
      for (auto s : batch) {
        src.push_back(train.source[s]);
        tgt.push_back(train.target[s]);
        if (knn_mode && config.exclude_self) {
          for (std::size_t p = 0; p + 1 < train.target[s].size(); ++p) exclude.push_back(static_cast<std::int64_t>(entry_offset[s] + p));
        }
      }
      Tape<T> tape;
      const auto out = model.forward_batch(tape, src, tgt);
      const Mat<double> log_probs = log_softmax(out.logits.value().template cast<double>());

      Mat<float> queries;
      std::unique_ptr<ExactRetriever> retriever;
      if (knn_mode) {
        if (hooks.on_query) hooks.on_query(model.generation(), datastore->generation());
        if (datastore->generation() != model.generation()) throw std::logic_error("fine_tune: stale datastore queried");
        queries = out.hidden.value().template cast<float>();
        retriever = std::make_unique<ExactRetriever>(datastore);
      }
      const TokenStats stats = compute_token_stats(config, log_probs, out.labels, queries, retriever.get(), exclude, sample_rng);

      std::vector<double> weights(stats.losses.size());
      for (std::size_t i = 0; i < weights.size(); ++i) {
        weights[i] = stats.losses[i].weight;
        loss_sum += stats.losses[i].value;
        ce_sum += stats.ce[i];
        const double g = stats.coefficients[i].g;
        g_sum += g;
        if (g < 1.0) ++gated;
        ++em.g_histogram[std::min<std::size_t>(9, static_cast<std::size_t>(std::ceil(g * 10.0)) - 1)];
        ++em.provenance[static_cast<std::size_t>(stats.coefficients[i].provenance)];
      }
      em.tokens += weights.size();

      const double scale = 1.0 / (static_cast<double>(weights.size()) * static_cast<double>(config.accumulation));
      tape.backward(weighted_ce(tape, out.logits, out.labels, weights, scale));
      if (++pending < config.accumulation) continue;
      pending = 0;

      const double warm = config.warmup_steps == 0
                              ? 1.0
                              : std::min(1.0, static_cast<double>(adam.steps() + 1) / static_cast<double>(config.warmup_steps));
      if (!adam.step(config.learning_rate * warm)) ++skipped;
      adam.zero_grad();
      ++since_refresh;
      if (config.refresh_steps > 0 && since_refresh >= config.refresh_steps) refresh();
    }
    if (pending > 0) {
      // A trailing partial cycle is applied as accumulated.
      pending = 0;
      if (!adam.step(config.learning_rate)) ++skipped;
      adam.zero_grad();
      ++since_refresh;
    }
    if (config.refresh_steps == 0 && epoch % config.refresh_epochs == 0 && epoch < config.epochs) refresh();

    em.step = adam.steps() + skipped;
    em.mean_loss = em.tokens ? loss_sum / static_cast<double>(em.tokens) : 0.0;
    em.mean_ce = em.tokens ? ce_sum / static_cast<double>(em.tokens) : 0.0;
    em.mean_g = em.tokens ? g_sum / static_cast<double>(em.tokens) : 0.0;
    em.fraction_gated = em.tokens ? static_cast<double>(gated) / static_cast<double>(em.tokens) : 0.0;
    em.skipped_steps = skipped - skipped_before;
    em.refreshes = refreshes - refreshes_before;
    em.generation = model.generation();
    if (hooks.validate) em.valid_bleu = hooks.validate(model);
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (hooks.log) *hooks.log << to_json_line(em, config.mode) << '\n' << std::flush;
    result.epochs.push_back(std::move(em));
  }
  if (since_refresh > 0) refresh();
  if (knn_mode) result.datastore = datastore;
  return result;
}

template FineTuneResult<float> fine_tune(NmtModel<float>&, const EncodedCorpus&, std::shared_ptr<const Datastore>,
                                         const TrainConfig&, const TrainHooks<float>&);
template FineTuneResult<double> fine_tune(NmtModel<double>&, const EncodedCorpus&, std::shared_ptr<const Datastore>,
                                          const TrainConfig&, const TrainHooks<double>&);

}  // namespace tknn
