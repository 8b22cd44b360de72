#include "tknn/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "tknn/datastore.hpp"
#include "tknn/knn.hpp"

namespace tknn {

namespace {

using Clock = std::chrono::steady_clock;

/// Non-negative integer; nlohmann would wrap a negative value silently.
std::size_t count_value(const Json& v, const std::string& at) {
  if (v.is_number_integer() && v.get<std::int64_t>() < 0) throw ConfigError(at + ": must be non-negative");
  return v.get<std::size_t>();
}

double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::vector<std::string> concat(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::string> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

std::string fmt(double v, int digits = 2) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

struct Context {
  const ExperimentConfig& config;
  const BpeVocab& source_vocab;
  const BpeVocab& target_vocab;
  std::ostream* log;
};

ExperimentRow score(const Context& ctx, const NmtModel<float>& model, const ParallelCorpus& test,
                    const TranslateOptions& options) {
  ExperimentRow row;
  const auto start = Clock::now();
  row.hypotheses = translate_all(model, ctx.source_vocab, ctx.target_vocab, test.source, options, ctx.config.decode_batch);
  row.report = corpus_bleu(row.hypotheses, test.target);
  row.seconds = since(start);
  return row;
}

/// Best BLEU on `valid` over the grid; the earliest grid point wins ties.
KnnParams tune(const Context& ctx, const NmtModel<float>& model, const Retriever& retriever, const ParallelCorpus& valid) {
  KnnParams best;
  double best_bleu = -1.0;
  for (const auto k : ctx.config.grid.k) {
    for (const double lambda : ctx.config.grid.lambda) {
      for (const double t : ctx.config.grid.temperature) {
        TranslateOptions o;
        o.beam = ctx.config.beam;
        o.knn = KnnParams{k, t, lambda, false};
        o.retriever = &retriever;
        const auto hyps = translate_all(model, ctx.source_vocab, ctx.target_vocab, valid.source, o, ctx.config.decode_batch);
        const double b = corpus_bleu(hyps, valid.target).bleu;
        if (b > best_bleu) {
          best_bleu = b;
          best = *o.knn;
        }
      }
    }
  }
  if (ctx.log) {
    *ctx.log << "  tuned k=" << best.k << " lambda=" << best.lambda << " T=" << best.temperature
             << " valid BLEU " << fmt(best_bleu) << '\n';
  }
  return best;
}

/// Plain, tuned-kNN and optionally lambda-0 rows for one trained model.
void evaluate_model(const Context& ctx, const NmtModel<float>& model, std::shared_ptr<const Datastore> store,
                    const CorpusSplits& target, const std::string& name, std::uint64_t seed,
                    std::vector<ExperimentRow>& rows) {
  auto tag = [&](ExperimentRow r, const std::string& knn) {
    r.domain = ctx.config.target_domain;
    r.model = name;
    r.knn = knn;
    r.seed = seed;
    return r;
  };
  TranslateOptions plain;
  plain.beam = ctx.config.beam;
  try {
    rows.push_back(tag(score(ctx, model, target.test, plain), "none"));
  } catch (const std::exception& e) {
    ExperimentRow r = tag({}, "none");
    r.error = e.what();
    rows.push_back(std::move(r));
  }
  try {
    const ExactRetriever retriever(store);
    const KnnParams best = tune(ctx, model, retriever, target.valid);
    TranslateOptions o = plain;
    o.knn = best;
    o.retriever = &retriever;
    ExperimentRow r = tag(score(ctx, model, target.test, o), "tuned");
    r.params = best;
    rows.push_back(std::move(r));
    if (ctx.config.lambda_zero_column) {
      o.knn->lambda = 0.0;
      ExperimentRow z = tag(score(ctx, model, target.test, o), "lambda0");
      z.params = o.knn;
      rows.push_back(std::move(z));
    }
  } catch (const std::exception& e) {
    ExperimentRow r = tag({}, "tuned");
    r.error = e.what();
    rows.push_back(std::move(r));
  }
}

void log_row(std::ostream* log, const ExperimentRow& r) {
  if (!log) return;
  *log << "  " << r.domain << ' ' << r.model << " seed " << r.seed << " knn " << r.knn << ": "
       << (r.ok() ? format_bleu(r.report) : "FAILED " + r.error) << '\n'
       << std::flush;
}

std::string cell_name(const ExperimentRow& r) {
  return r.domain + "." + r.model + "." + r.knn + ".s" + std::to_string(r.seed);
}

}  // namespace

ExperimentConfig ExperimentConfig::desk_default() {
  ExperimentConfig c;
  c.base_train.mode = TrainMode::vanilla;
  c.base_train.learning_rate = 1e-3;
  c.base_train.warmup_steps = 200;
  c.base_train.batch_tokens = 512;
  c.base_train.epochs = 10;
  c.finetune.learning_rate = 5e-4;
  c.finetune.batch_tokens = 512;
  c.finetune.epochs = 8;
  return c;
}

void ExperimentConfig::validate() const {
  if (base_domain == target_domain) throw std::invalid_argument("base and target domain must differ");
  if (merges < 1) throw std::invalid_argument("merges must be >= 1");
  if (max_sentence_words < 1) throw std::invalid_argument("max_sentence_words must be >= 1");
  if (modes.empty()) throw std::invalid_argument("no training modes");
  if (seeds.empty()) throw std::invalid_argument("no seeds");
  if (grid.size() == 0) throw std::invalid_argument("empty kNN grid");
  for (const double l : grid.lambda) {
    if (!(l > 0.0 && l <= 1.0)) throw std::invalid_argument("grid lambda must be in (0, 1]");
  }
  for (const auto k : grid.k) {
    if (k < 1) throw std::invalid_argument("grid k must be >= 1");
  }
  for (const double t : grid.temperature) {
    if (!(t > 0.0)) throw std::invalid_argument("grid temperature must be > 0");
  }
  if (beam < 1 || decode_batch < 1) throw std::invalid_argument("beam and decode_batch must be >= 1");
  ModelShape s = model;
  s.src_vocab = s.tgt_vocab = 8;
  s.validate();
  base_train.validate();
  finetune.validate();
}

ExperimentConfig experiment_config_from_json(const Json& j, const std::string& where) {
  ExperimentConfig c = ExperimentConfig::desk_default();
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    const Json& v = it.value();
    const std::string at = where + "." + key;
    try {
      if (key == "base_domain") {
        c.base_domain = v.get<std::string>();
      } else if (key == "target_domain") {
        c.target_domain = v.get<std::string>();
      } else if (key == "merges") {
        c.merges = count_value(v, at);
      } else if (key == "max_sentence_words") {
        c.max_sentence_words = count_value(v, at);
      } else if (key == "model") {
        c.model = model_shape_from_json(v, at);
      } else if (key == "init_seed") {
        c.init_seed = v.get<std::uint64_t>();
      } else if (key == "base_train") {
        c.base_train = train_config_from_json(v, c.base_train, at);
      } else if (key == "finetune") {
        c.finetune = train_config_from_json(v, c.finetune, at);
      } else if (key == "modes") {
        c.modes.clear();
        for (const auto& m : v) c.modes.push_back(parse_train_mode(m.get<std::string>()));
      } else if (key == "seeds") {
        c.seeds = v.get<std::vector<std::uint64_t>>();
      } else if (key == "grid") {
        if (!v.is_object()) throw ConfigError(at + ": expected an object");
        for (auto g = v.begin(); g != v.end(); ++g) {
          if (g.key() == "k") {
            c.grid.k = g.value().get<std::vector<std::size_t>>();
          } else if (g.key() == "lambda") {
            c.grid.lambda = g.value().get<std::vector<double>>();
          } else if (g.key() == "temperature") {
            c.grid.temperature = g.value().get<std::vector<double>>();
          } else {
            throw ConfigError(at + ": unknown key '" + g.key() + "'");
          }
        }
      } else if (key == "beam") {
        c.beam = count_value(v, at);
      } else if (key == "decode_batch") {
        c.decode_batch = count_value(v, at);
      } else if (key == "lambda_zero_column") {
        c.lambda_zero_column = v.get<bool>();
      } else if (key == "save_checkpoints") {
        c.save_checkpoints = v.get<bool>();
      } else {
        throw ConfigError(where + ": unknown key '" + key + "'");
      }
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(at + ": wrong type (" + std::string(v.type_name()) + ")");
    } catch (const std::invalid_argument& e) {
      throw ConfigError(at + ": " + e.what());
    }
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return c;
}

Json to_json(const ExperimentConfig& c) {
  Json j;
  j["base_domain"] = c.base_domain;
  j["target_domain"] = c.target_domain;
  j["merges"] = c.merges;
  j["max_sentence_words"] = c.max_sentence_words;
  j["model"] = to_json(c.model);
  j["init_seed"] = c.init_seed;
  j["base_train"] = to_json(c.base_train);
  j["finetune"] = to_json(c.finetune);
  j["modes"] = Json::array();
  for (auto m : c.modes) j["modes"].push_back(to_string(m));
  j["seeds"] = c.seeds;
  j["grid"] = {{"k", c.grid.k}, {"lambda", c.grid.lambda}, {"temperature", c.grid.temperature}};
  j["beam"] = c.beam;
  j["decode_batch"] = c.decode_batch;
  j["lambda_zero_column"] = c.lambda_zero_column;
  j["save_checkpoints"] = c.save_checkpoints;
  return j;
}

const SummaryRow* ExperimentResult::find(const std::string& domain, const std::string& model,
                                         const std::string& knn) const {
  for (const auto& s : summary) {
    if (s.domain == domain && s.model == model && s.knn == knn) return &s;
  }
  return nullptr;
}

std::vector<SummaryRow> summarize(const std::vector<ExperimentRow>& rows) {
  std::vector<SummaryRow> out;
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<const ExperimentRow*>> groups;
  std::vector<std::tuple<std::string, std::string, std::string>> order;
  for (const auto& r : rows) {
    auto key = std::make_tuple(r.domain, r.model, r.knn);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  for (const auto& key : order) {
    SummaryRow s{std::get<0>(key), std::get<1>(key), std::get<2>(key)};
    std::vector<double> v;
    for (const auto* r : groups[key]) {
      if (r->ok()) {
        v.push_back(r->report.bleu);
      } else {
        ++s.failures;
      }
    }
    s.runs = v.size();
    if (!v.empty()) {
      double sum = 0.0;
      for (double x : v) sum += x;
      s.mean = sum / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
      s.min = *std::min_element(v.begin(), v.end());
      s.max = *std::max_element(v.begin(), v.end());
    }
    out.push_back(s);
  }
  return out;
}

ExperimentResult run_experiment_matrix(const ExperimentConfig& config, const CorpusBundle& bundle,
                                       const std::filesystem::path& out_dir, std::ostream* log) {
  config.validate();
  const auto start = Clock::now();
  for (const auto& d : {config.base_domain, config.target_domain}) {
    if (!bundle.count(d)) throw std::invalid_argument("corpus bundle has no domain '" + d + "'");
  }
  const bool write = !out_dir.empty();
  if (write) {
    std::filesystem::create_directories(out_dir / "hyp");
    std::ofstream(out_dir / "config.json") << to_json(config).dump(2) << '\n';
  }

  CorpusSplits base = bundle.at(config.base_domain);
  CorpusSplits target = bundle.at(config.target_domain);
  base.train = filter_by_length(base.train, config.max_sentence_words);
  target.train = filter_by_length(target.train, config.max_sentence_words);

  // Shared subword vocabularies over both training splits.
  const BpeVocab sv = BpeVocab::train(concat(base.train.source, target.train.source), config.merges);
  const BpeVocab tv = BpeVocab::train(concat(base.train.target, target.train.target), config.merges);
  if (write) {
    sv.save(out_dir / "source.vocab");
    tv.save(out_dir / "target.vocab");
  }
  const Context ctx{config, sv, tv, log};
  ModelShape shape = config.model;
  shape.src_vocab = static_cast<std::uint32_t>(sv.size());
  shape.tgt_vocab = static_cast<std::uint32_t>(tv.size());

  const EncodedCorpus base_train = encode_corpus(base.train, sv, tv);
  const EncodedCorpus target_train = encode_corpus(target.train, sv, tv);

  ExperimentResult result;
  auto& rows = result.rows;
  auto open_log = [&](const std::string& name) -> std::unique_ptr<std::ofstream> {
    if (!write) return nullptr;
    return std::make_unique<std::ofstream>(out_dir / ("train." + name + ".jsonl"));
  };

  if (log) *log << "base model on " << config.base_domain << " (" << base.train.size() << " pairs)\n" << std::flush;
  auto base_model = NmtModel<float>::init(shape, config.init_seed);
  {
    auto f = open_log("base");
    TrainHooks<float> hooks;
    hooks.log = f.get();
    TrainConfig bc = config.base_train;
    bc.mode = TrainMode::vanilla;
    fine_tune(base_model, base_train, nullptr, bc, hooks);
  }
  if (write && config.save_checkpoints) base_model.save(out_dir / "base.ckpt");
  {
    TranslateOptions plain;
    plain.beam = config.beam;
    ExperimentRow r = score(ctx, base_model, base.test, plain);
    r.domain = config.base_domain;
    r.model = "base";
    r.knn = "none";
    r.seed = config.init_seed;
    rows.push_back(std::move(r));
    log_row(log, rows.back());
  }
  const auto base_store = std::make_shared<const Datastore>(build_datastore(base_model, target_train));
  {
    const std::size_t before = rows.size();
    evaluate_model(ctx, base_model, base_store, target, "base", config.init_seed, rows);
    for (std::size_t i = before; i < rows.size(); ++i) log_row(log, rows[i]);
  }

  for (const auto mode : config.modes) {
    for (const auto seed : config.seeds) {
      const std::string name = to_string(mode) + ".s" + std::to_string(seed);
      if (log) *log << "fine-tune " << name << " on " << config.target_domain << '\n' << std::flush;
      const std::size_t before = rows.size();
      try {
        auto model = base_model;
        TrainConfig fc = config.finetune;
        fc.mode = mode;
        fc.seed = seed;
        auto f = open_log(name);
        TrainHooks<float> hooks;
        hooks.log = f.get();
        const auto t0 = Clock::now();
        auto res = fine_tune(model, target_train, mode == TrainMode::vanilla ? nullptr : base_store, fc, hooks);
        if (log) *log << "  trained in " << fmt(since(t0), 1) << " s\n";
        if (write && config.save_checkpoints) model.save(out_dir / ("ft." + name + ".ckpt"));
        // Decoding uses a datastore built with the final weights.
        auto store = res.datastore ? res.datastore
                                   : std::make_shared<const Datastore>(build_datastore(model, target_train));
        evaluate_model(ctx, model, store, target, to_string(mode), seed, rows);
      } catch (const std::exception& e) {
        for (const char* knn : {"none", "tuned"}) {
          ExperimentRow r;
          r.domain = config.target_domain;
          r.model = to_string(mode);
          r.knn = knn;
          r.seed = seed;
          r.error = e.what();
          rows.push_back(std::move(r));
        }
      }
      for (std::size_t i = before; i < rows.size(); ++i) log_row(log, rows[i]);
    }
  }

  result.summary = summarize(rows);
  result.seconds = since(start);
  if (write) {
    for (const auto& r : rows) {
      if (r.ok()) write_lines(out_dir / "hyp" / (cell_name(r) + ".txt"), r.hypotheses);
    }
    write_results_tsv(rows, out_dir / "results.tsv");
    write_summary_tsv(result.summary, out_dir / "summary.tsv");
  }
  return result;
}

void write_results_tsv(const std::vector<ExperimentRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "domain\tmode\tknn\tseed\tbleu\tp1\tp2\tp3\tp4\tbp\thyp_len\tref_len\tk\tlambda\ttemperature\tseconds\tstatus\n";
  for (const auto& r : rows) {
    f << r.domain << '\t' << r.model << '\t' << r.knn << '\t' << r.seed << '\t';
    if (r.ok()) {
      f << fmt(r.report.bleu, 4);
      for (double p : r.report.precisions) f << '\t' << fmt(100.0 * p, 4);
      f << '\t' << fmt(r.report.brevity_penalty, 4) << '\t' << r.report.hyp_length << '\t' << r.report.ref_length;
    } else {
      f << "nan\tnan\tnan\tnan\tnan\tnan\t0\t0";
    }
    if (r.params) {
      f << '\t' << r.params->k << '\t' << r.params->lambda << '\t' << r.params->temperature;
    } else {
      f << "\t-\t-\t-";
    }
    std::string status = r.ok() ? "ok" : "failed: " + r.error;
    std::replace(status.begin(), status.end(), '\t', ' ');
    std::replace(status.begin(), status.end(), '\n', ' ');
    f << '\t' << fmt(r.seconds, 2) << '\t' << status << '\n';
  }
}

void write_summary_tsv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "domain\tmode\tknn\truns\tfailures\tmean_bleu\tstddev\tmin\tmax\n";
  for (const auto& s : rows) {
    f << s.domain << '\t' << s.model << '\t' << s.knn << '\t' << s.runs << '\t' << s.failures << '\t' << fmt(s.mean, 4)
      << '\t' << fmt(s.stddev, 4) << '\t' << fmt(s.min, 4) << '\t' << fmt(s.max, 4) << '\n';
  }
}

std::vector<DirectionalCheck> directional_checks(const ExperimentResult& result, const ExperimentConfig& config,
                                                 double margin) {
  const std::string& d = config.target_domain;
  auto mean = [&](const std::string& model, const std::string& knn) -> std::optional<double> {
    const SummaryRow* s = result.find(d, model, knn);
    if (!s || s->runs == 0 || s->failures > 0) return std::nullopt;
    return s->mean;
  };
  std::vector<DirectionalCheck> out;

  DirectionalCheck a{"trainable modes vs vanilla fine-tuning", true, {}};
  const auto vanilla = mean("vanilla", "none");
  bool any_above = false;
  if (!vanilla) {
    a.pass = false;
    a.detail = "vanilla cell missing";
  } else {
    a.detail = "vanilla " + fmt(*vanilla);
    for (auto m : config.modes) {
      if (m == TrainMode::vanilla) continue;
      const auto v = mean(to_string(m), "none");
      if (!v) {
        a.pass = false;
        a.detail += ", " + to_string(m) + " missing";
        continue;
      }
      a.detail += ", " + to_string(m) + " " + fmt(*v);
      if (*v < *vanilla - margin) a.pass = false;
      if (*v > *vanilla) any_above = true;
    }
    if (!any_above) a.pass = false;
  }
  out.push_back(a);

  DirectionalCheck b{"tuned kNN decoding vs plain decoding", true, {}};
  for (auto m : config.modes) {
    const auto plain = mean(to_string(m), "none");
    const auto knn = mean(to_string(m), "tuned");
    if (!b.detail.empty()) b.detail += ", ";
    if (!plain || !knn) {
      b.pass = false;
      b.detail += to_string(m) + " missing";
      continue;
    }
    b.detail += to_string(m) + " " + fmt(*knn) + " vs " + fmt(*plain);
    if (*knn < *plain) b.pass = false;
  }
  out.push_back(b);

  DirectionalCheck c{"fine-tuned datastore vs base datastore", false, {}};
  const auto ft = mean("vanilla", "tuned");
  const auto bs = mean("base", "tuned");
  if (!ft || !bs) {
    c.detail = "cell missing";
  } else {
    c.pass = *ft >= *bs;
    c.detail = "fine-tuned " + fmt(*ft) + " vs base " + fmt(*bs);
  }
  out.push_back(c);
  return out;
}

}  // namespace tknn
