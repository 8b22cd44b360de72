// Acceptance suite: one PASS/FAIL line per criterion. Run all, or pick one
// with --criterion N. The exit status is nonzero if any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "tknn/binary_io.hpp"
#include "tknn/datastore.hpp"
#include "tknn/experiment.hpp"
#include "tknn/knn.hpp"
#include "tknn/model.hpp"
#include "tknn/synthetic.hpp"
#include "tknn/trainer.hpp"

using namespace tknn;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

ModelShape toy_shape() {
  ModelShape s;
  s.src_vocab = 12;
  s.tgt_vocab = 10;
  s.d_model = 8;
  s.heads = 2;
  s.ff = 12;
  s.enc_layers = 2;
  s.dec_layers = 2;
  s.max_len = 12;
  return s;
}

EncodedCorpus toy_corpus() {
  EncodedCorpus c;
  c.source = {{4, 5, 6, 2}, {7, 8, 2}, {9, 10, 11, 4, 2}, {5, 5, 2}, {6, 2}, {11, 7, 2}};
  c.target = {{1, 4, 5, 2}, {1, 6, 7, 8, 2}, {1, 9, 4, 2}, {1, 5, 5, 5, 2}, {1, 3, 2}, {1, 8, 6, 2}};
  return c;
}

Mat<double> log_softmax(const Mat<double>& x) {
  Mat<double> out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mx = x.row(r).maxCoeff();
    out.row(r).array() -= mx + std::log((x.row(r).array() - mx).exp().sum());
  }
  return out;
}

// ------------------------------------------------------------ gradients

Outcome gradient_fidelity() {
  Outcome o;
  const auto start = Clock::now();
  const auto corpus = toy_corpus();
  double worst = 0.0;
  for (auto mode : {TrainMode::vanilla, TrainMode::gate, TrainMode::gtprob, TrainMode::rl}) {
    for (auto form : {LossForm::ratio_weight, LossForm::literal}) {
      auto m = NmtModel<double>::init(toy_shape(), 11);
      const auto ds = std::make_shared<const Datastore>(build_datastore(m, corpus));
      ExactRetriever r(ds);
      TrainConfig cfg;
      cfg.mode = mode;
      cfg.loss_form = form;
      cfg.knn = {4, 2.0, 0.6, false};
      cfg.tau = 0.9;
      // Token weights are detached: computed once at the evaluation point.
      Tape<double> fwd(false);
      const auto out = m.forward_batch(fwd, corpus.source, corpus.target);
      std::mt19937_64 rng(3);
      const auto stats = compute_token_stats(cfg, log_softmax(out.logits.value()), out.labels,
                                             out.hidden.value().cast<float>(), mode == TrainMode::vanilla ? nullptr : &r,
                                             {}, rng);
      std::vector<double> w;
      for (const auto& l : stats.losses) w.push_back(l.weight);
      auto params = m.param_arrays();
      auto loss = [&](Tape<double>& t) {
        const auto o2 = m.forward_batch(t, corpus.source, corpus.target);
        return weighted_ce(t, o2.logits, o2.labels, w, 1.0);
      };
      const double err = finite_diff_check(loss, params, 1e-5);
      worst = std::max(worst, err);
      o.detail << ' ' << to_string(mode) << '/' << to_string(form) << '=' << err;
      o.require(err < 1e-4, to_string(mode) + "/" + to_string(form) + " error >= 1e-4");
    }
  }
  const double secs = since(start);
  o.require(secs < 120.0, "runtime >= 2 min");
  std::ostringstream head;
  head << "max relative error " << worst << ", " << secs << " s;";
  std::string rest = o.detail.str();
  o.detail.str(head.str() + rest);
  return o;
}

// ------------------------------------------------------------ retrieval

std::vector<std::pair<double, std::uint32_t>> brute_force(const Mat<float>& keys, const float* q, std::size_t k) {
  std::vector<std::pair<double, std::uint32_t>> all;
  for (Eigen::Index i = 0; i < keys.rows(); ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < keys.cols(); ++j) {
      const double d = static_cast<double>(q[j]) - static_cast<double>(keys(i, j));
      s += d * d;
    }
    all.emplace_back(std::sqrt(s), static_cast<std::uint32_t>(i));
  }
  std::sort(all.begin(), all.end());
  all.resize(std::min(k, all.size()));
  return all;
}

Outcome retrieval_equivalence() {
  Outcome o;
  const auto start = Clock::now();
  std::mt19937_64 rng(2024);
  std::size_t exact_mismatch = 0, clustered_mismatch = 0, queries = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 5000)(rng);
    const std::size_t k = std::uniform_int_distribution<std::size_t>(1, 16)(rng);
    std::normal_distribution<float> g(0.0f, 1.0f);
    Mat<float> keys(static_cast<Eigen::Index>(n), 64);
    for (Eigen::Index i = 0; i < keys.size(); ++i) keys.data()[i] = g(rng);
    std::vector<TokenId> values(n);
    for (auto& v : values) v = static_cast<TokenId>(rng() % 50);
    const auto store = std::make_shared<const Datastore>(keys, values, 0);
    IndexOptions io;
    io.n_clusters = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(32, n))(rng);
    io.kmeans_iters = 4;
    io.seed = inst;
    const auto index = ClusteredIndex::build(store, io);
    for (int qi = 0; qi < 3; ++qi, ++queries) {
      std::vector<float> q(64);
      // One query in three sits on a stored key, which exercises zero distances.
      if (qi == 0) {
        const auto row = keys.row(static_cast<Eigen::Index>(rng() % n));
        std::copy(row.data(), row.data() + 64, q.begin());
      } else {
        for (auto& x : q) x = g(rng);
      }
      const auto oracle = brute_force(keys, q.data(), k);
      const auto exact = store->search_exact(q, k);
      bool same = exact.size() == oracle.size();
      for (std::size_t i = 0; same && i < exact.size(); ++i) {
        same = exact[i].entry == oracle[i].second && exact[i].distance == oracle[i].first;
      }
      if (!same) ++exact_mismatch;
      // Full probe must agree with exact search up to equal-distance swaps.
      const auto full = index.search(q, k, io.n_clusters);
      bool agree = full.size() == exact.size();
      for (std::size_t i = 0; agree && i < full.size(); ++i) {
        agree = full[i].entry == exact[i].entry || full[i].distance == exact[i].distance;
      }
      if (!agree) ++clustered_mismatch;
    }
  }
  const double secs = since(start);
  o.detail << queries << " queries over 200 instances; exact mismatches " << exact_mismatch
           << ", full-probe mismatches " << clustered_mismatch << ", " << secs << " s";
  o.require(exact_mismatch == 0, "exact search differs from brute force");
  o.require(clustered_mismatch == 0, "full-probe clustered search differs from exact");
  o.require(secs < 60.0, "runtime >= 1 min");
  return o;
}

double recall_at(const Datastore& store, const ClusteredIndex& index, const Mat<float>& queries, std::size_t k,
                 std::size_t nprobe) {
  std::size_t hit = 0;
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    const std::span<const float> q(queries.data() + i * queries.cols(), static_cast<std::size_t>(queries.cols()));
    const auto truth = store.search_exact(q, k);
    const auto got = index.search(q, k, nprobe);
    for (const auto& t : truth) {
      for (const auto& g : got) {
        if (g.entry == t.entry) {
          ++hit;
          break;
        }
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(k * static_cast<std::size_t>(queries.rows()));
}

Outcome quantized_recall() {
  Outcome o;
  std::mt19937_64 rng(7);
  std::normal_distribution<float> g(0.0f, 1.0f);
  Mat<float> keys(10000, 64), queries(200, 64);
  for (Eigen::Index i = 0; i < keys.size(); ++i) keys.data()[i] = g(rng);
  for (Eigen::Index i = 0; i < queries.size(); ++i) queries.data()[i] = g(rng);
  const auto store = std::make_shared<const Datastore>(keys, std::vector<TokenId>(10000, 0), 0);
  IndexOptions io;
  io.n_clusters = 64;
  io.quantize = true;
  const auto index = ClusteredIndex::build(store, io);
  const double recall = recall_at(*store, index, queries, 8, 8);
  o.detail << "isotropic Gaussian keys: recall@8 " << recall << " (threshold 0.90), code bytes " << index.code_bytes();
  o.require(index.code_bytes() == 64, "codes are not 64 bytes");
  o.require(recall >= 0.90, "recall below 0.90");

  // Informational: the same index settings on clustered keys.
  Mat<float> centers(64, 64), ckeys(10000, 64), cq(200, 64);
  for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = 4.0f * g(rng);
  for (Eigen::Index i = 0; i < ckeys.rows(); ++i) {
    ckeys.row(i) = centers.row(static_cast<Eigen::Index>(rng() % 64));
    for (Eigen::Index j = 0; j < 64; ++j) ckeys(i, j) += g(rng);
  }
  for (Eigen::Index i = 0; i < cq.rows(); ++i) {
    cq.row(i) = centers.row(static_cast<Eigen::Index>(rng() % 64));
    for (Eigen::Index j = 0; j < 64; ++j) cq(i, j) += g(rng);
  }
  const auto cstore = std::make_shared<const Datastore>(ckeys, std::vector<TokenId>(10000, 0), 0);
  const auto cindex = ClusteredIndex::build(cstore, io);
  o.detail << "; mixture of 64 Gaussians (not gated): recall@8 " << recall_at(*cstore, cindex, cq, 8, 8);
  return o;
}

// ------------------------------------------------------------ distributions

Outcome distribution_laws() {
  Outcome o;
  std::mt19937_64 rng(99);
  double norm_err = 0.0, shift_err = 0.0, limit_err = 0.0, mix_err = 0.0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t k = 1 + rng() % 16;
    const std::size_t vocab = 2 + rng() % 30;
    RetrievedSet r;
    std::uniform_real_distribution<double> dist(0.0, 30.0);
    for (std::uint32_t i = 0; i < k; ++i) r.push_back({dist(rng), static_cast<TokenId>(rng() % vocab), i});
    const double temp = std::uniform_real_distribution<double>(0.1, 50.0)(rng);
    const auto p = knn_distribution(r, temp, vocab);
    norm_err = std::max(norm_err, std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0));
    RetrievedSet shifted = r;
    const double c = std::uniform_real_distribution<double>(0.0, 100.0)(rng);
    for (auto& n : shifted) n.distance += c;
    const auto ps = knn_distribution(shifted, temp, vocab);
    for (std::size_t v = 0; v < vocab; ++v) shift_err = std::max(shift_err, std::abs(ps[v] - p[v]));
    const auto pinf = knn_distribution(r, 1e12, vocab);
    std::vector<double> freq(vocab, 0.0);
    for (const auto& n : r) freq[n.value] += 1.0 / static_cast<double>(k);
    for (std::size_t v = 0; v < vocab; ++v) limit_err = std::max(limit_err, std::abs(pinf[v] - freq[v]));
    std::vector<double> nmt(vocab);
    for (auto& x : nmt) x = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double s = std::accumulate(nmt.begin(), nmt.end(), 0.0);
    for (auto& x : nmt) x /= s;
    const auto mix = interpolate(nmt, p, std::uniform_real_distribution<double>(0.0, 1.0)(rng));
    mix_err = std::max(mix_err, std::abs(std::accumulate(mix.begin(), mix.end(), 0.0) - 1.0));
  }
  // The worked "If checked," retrieval: neighbour probabilities 0.344 (T@@),
  // 0.236 (tab), 0.201 (you), 0.096, 0.054, 0.028 (you), 0.022, 0.019.
  const std::vector<std::pair<double, TokenId>> rows = {{0.344, 0}, {0.236, 1}, {0.201, 2}, {0.096, 3},
                                                        {0.054, 4}, {0.028, 2}, {0.022, 5}, {0.019, 6}};
  const double temp = 10.0;
  RetrievedSet table;
  for (std::uint32_t i = 0; i < rows.size(); ++i) table.push_back({-temp * std::log(rows[i].first), rows[i].second, i});
  const auto pt = knn_distribution(table, temp, 7);
  const double you = pt[2];
  o.detail << "normalization " << norm_err << ", shift " << shift_err << ", T->inf " << limit_err
           << ", interpolation " << mix_err << ", P(you) " << you << ", M " << max_knn_prob(pt);
  o.require(norm_err <= 1e-9, "normalization");
  o.require(shift_err <= 1e-9, "shift invariance");
  o.require(limit_err <= 1e-6, "frequency limit");
  o.require(mix_err <= 1e-9, "interpolation normalization");
  o.require(std::abs(you - 0.229) < 1e-12, "P(you) != 0.229");
  return o;
}

// ------------------------------------------------------------ collapse identities

Outcome collapse_identities() {
  Outcome o;
  const auto corpus = toy_corpus();
  const auto base = NmtModel<float>::init(toy_shape(), 6);
  auto vanilla = base;
  auto gate = base;
  TrainConfig cv;
  cv.mode = TrainMode::vanilla;
  cv.knn = {4, 2.0, 0.6, false};
  cv.learning_rate = 1e-2;
  cv.batch_tokens = 8;
  cv.epochs = 3;
  cv.seed = 3;
  TrainConfig cg = cv;
  cg.mode = TrainMode::gate;
  cg.tau = 0.0;
  const auto rv = fine_tune(vanilla, corpus, nullptr, cv);
  const auto rg = fine_tune(gate, corpus, nullptr, cg);
  bool losses_equal = rv.epochs.size() == rg.epochs.size();
  for (std::size_t e = 0; losses_equal && e < rv.epochs.size(); ++e) {
    losses_equal = rv.epochs[e].mean_loss == rg.epochs[e].mean_loss;
  }
  const bool weights_equal = vanilla.serialize() == gate.serialize();
  o.require(weights_equal && losses_equal, "gate tau=0 trajectory differs from vanilla");

  const auto store = std::make_shared<const Datastore>(build_datastore(vanilla, corpus));
  ExactRetriever r(store);
  std::size_t compared = 0, differing = 0;
  for (std::size_t beam : {1, 4}) {
    TranslateOptions plain;
    plain.beam = beam;
    plain.max_len = 10;
    TranslateOptions zero = plain;
    zero.knn = KnnParams{4, 10.0, 0.0, false};
    zero.retriever = &r;
    const auto a = translate_batch_ids(vanilla, corpus.source, plain);
    const auto b = translate_batch_ids(vanilla, corpus.source, zero);
    for (std::size_t i = 0; i < a.size(); ++i, ++compared) {
      if (a[i].tokens != b[i].tokens || a[i].score != b[i].score) ++differing;
    }
  }
  o.require(differing == 0, "lambda=0 decoding differs from plain decoding");
  o.detail << "gate(tau=0) vs vanilla: weights " << (weights_equal ? "identical" : "differ") << ", epoch losses "
           << (losses_equal ? "identical" : "differ") << "; lambda=0 vs no kNN: " << differing << " of " << compared
           << " decodes differ";
  return o;
}

// ------------------------------------------------------------ desk experiment

Outcome desk_experiment(const fs::path& work) {
  Outcome o;
  const auto config = ExperimentConfig::desk_default();
  const auto bundle = make_synthetic_bundle(SyntheticOptions{});
  const auto result = run_experiment_matrix(config, bundle, work, &std::cerr);
  for (const auto& c : directional_checks(result, config)) {
    o.detail << (c.pass ? "(ok) " : "(fail) ") << c.name << ": " << c.detail << "; ";
    o.require(c.pass, c.name);
  }
  const double minutes = result.seconds / 60.0;
  o.detail << "runtime " << minutes << " min on " << std::thread::hardware_concurrency() << " core(s)";
  o.require(minutes < 45.0, "runtime >= 45 min");
  return o;
}

// ------------------------------------------------------------ edge cases

Outcome edge_cases() {
  Outcome o;
  const std::size_t k = 4, vocab = 6;
  // Neighbours carry tokens 1 and 2 only.
  const RetrievedSet r = {{1.0, 1, 0}, {1.5, 1, 1}, {2.0, 2, 2}, {4.0, 2, 3}};
  const auto p = knn_distribution(r, 1.0, vocab);

  const auto floor = gtprob_coefficient(p, 5, k);
  o.require(floor.g == 0.25 && floor.provenance == Provenance::gtprob_floor, "gtprob floor is not 1/k");
  const auto hit = gtprob_coefficient(p, 1, k);
  o.require(hit.g == p[1] && hit.provenance == Provenance::gtprob_hit, "gtprob hit");

  const auto correct = rl_reward(p, 3, 3, k);
  const double ce = 1.7;
  const auto lc = scaled_loss(ce, correct, TrainMode::rl, LossForm::ratio_weight, 1e-6);
  o.require(correct.use_vanilla() && correct.provenance == Provenance::rl_correct && lc.value == ce && lc.weight == 1.0,
            "RL correct token does not fall back to plain cross-entropy");

  const auto miss = rl_reward(p, 4, 5, k);
  const auto lm = scaled_loss(ce, miss, TrainMode::rl, LossForm::ratio_weight, 1e-6);
  o.require(miss.g == 0.25 && miss.provenance == Provenance::rl_floor && lm.weight == 0.25,
            "RL double miss is not floored at 1/k");

  const auto reward = rl_reward(p, 2, 1, k);
  o.require(std::abs(reward.g - std::abs(p[2] - p[1])) < 1e-15 && reward.provenance == Provenance::rl_reward,
            "RL reward is not |p(sampled) - p(truth)|");
  o.detail << "gtprob floor g=" << floor.g << ", RL correct -> plain CE (weight " << lc.weight << "), RL double miss R="
           << miss.g << ", RL reward R=" << reward.g;
  return o;
}

// ------------------------------------------------------------ serialization

template <typename F>
std::string rejection(F&& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

bool contains(const std::string& s, const std::string& part) { return s.find(part) != std::string::npos; }

Outcome serialization(const fs::path& work) {
  Outcome o;
  fs::create_directories(work);
  const auto corpus = toy_corpus();
  const auto model = NmtModel<float>::init(toy_shape(), 4);
  const auto store = std::make_shared<const Datastore>(build_datastore(model, corpus));
  IndexOptions io;
  io.n_clusters = 3;
  io.quantize = true;
  const auto index = ClusteredIndex::build(store, io);

  const auto ckpt = work / "model.ckpt", ds = work / "store.tkds", ix = work / "store.tkix";
  model.save(ckpt);
  store->save(ds);
  index.save(ix);
  const auto model2 = NmtModel<float>::load(ckpt);
  const auto store2 = std::make_shared<const Datastore>(Datastore::load(ds));
  const auto index2 = ClusteredIndex::load(ix, store2);
  o.require(model2.serialize() == read_file(ckpt) && model2.serialize() == model.serialize(), "checkpoint round-trip");
  o.require(store2->serialize() == read_file(ds) && *store2 == *store, "datastore round-trip");
  o.require(index2.serialize() == read_file(ix), "index round-trip");

  std::vector<std::string> reasons;
  auto corrupt = [&](const std::string& bytes, std::size_t at, char c) {
    std::string b = bytes;
    b[at] = c;
    return b;
  };
  const std::string mb = model.serialize(), db = store->serialize(), ib = index.serialize();
  const std::vector<std::pair<std::string, std::function<void()>>> cases = {
      {"magic", [&] { NmtModel<float>::deserialize(corrupt(mb, 0, 'X')); }},
      {"version", [&] { NmtModel<float>::deserialize(corrupt(mb, 4, 9)); }},
      {"truncated", [&] { NmtModel<float>::deserialize(mb.substr(0, mb.size() / 2)); }},
      {"magic", [&] { Datastore::deserialize(corrupt(db, 1, 'X')); }},
      {"version", [&] { Datastore::deserialize(corrupt(db, 4, 9)); }},
      {"truncated", [&] { Datastore::deserialize(db.substr(0, db.size() - 3)); }},
      {"trailing", [&] { Datastore::deserialize(db + "x"); }},
      {"magic", [&] { ClusteredIndex::deserialize(corrupt(ib, 2, 'X'), store); }},
      {"version", [&] { ClusteredIndex::deserialize(corrupt(ib, 4, 9), store); }},
      {"truncated", [&] { ClusteredIndex::deserialize(ib.substr(0, ib.size() - 5), store); }},
  };
  std::size_t named = 0;
  for (const auto& [reason, f] : cases) {
    const std::string msg = rejection(f);
    if (contains(msg, reason)) {
      ++named;
    } else {
      o.require(false, "expected a '" + reason + "' rejection, got '" + msg + "'");
    }
  }
  o.detail << "checkpoint/datastore/index round-trips byte-identical; " << named << " of " << cases.size()
           << " corruptions rejected with the expected reason";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tknn acceptance suite"};
  int only = 0;
  std::string work = "acceptance_work";
  app.add_option("--criterion", only, "Run a single criterion (1-8)")->check(CLI::Range(1, 8));
  app.add_option("--work-dir", work, "Scratch directory for experiment outputs");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"retrieval oracle equivalence", retrieval_equivalence},
      {"quantized recall", quantized_recall},
      {"distribution laws", distribution_laws},
      {"collapse identities", collapse_identities},
      {"desk-scale directional claim", [&] { return desk_experiment(fs::path(work) / "experiment"); }},
      {"edge-case conformance", edge_cases},
      {"serialization", [&] { return serialization(fs::path(work) / "serialization"); }},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " (" << criteria[i].first
              << "): " << o.detail.str() << std::endl;
  }
  return all ? 0 : 1;
}
