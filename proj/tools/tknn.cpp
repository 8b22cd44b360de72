// tknn: command-line front end for vocabulary building, training, datastore
// construction, translation, scoring and the experiment matrix.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tknn/binary_io.hpp"
#include "tknn/bleu.hpp"
#include "tknn/config.hpp"
#include "tknn/datastore.hpp"
#include "tknn/experiment.hpp"
#include "tknn/knn.hpp"
#include "tknn/synthetic.hpp"
#include "tknn/trainer.hpp"

namespace fs = std::filesystem;
using namespace tknn;

namespace {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kMissingFile = 3,
  kSchema = 4,
  kDimension = 5,
  kCorrupt = 6,
};

class MissingFile : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + ": no path given");
  if (!fs::is_regular_file(p)) throw MissingFile(what + " '" + p.string() + "' does not exist");
}

void require_corpus(const fs::path& prefix, const std::string& what) {
  require_file(prefix.string() + ".src", what + " source");
  require_file(prefix.string() + ".tgt", what + " target");
}

void log_resolved(const std::string& command, const Json& j) {
  std::cerr << "[" << command << "] resolved config " << j.dump() << '\n';
}

// Loaded checkpoint together with vocabularies that must agree with it.
struct ModelBundle {
  NmtModel<float> model;
  BpeVocab source_vocab, target_vocab;
};

ModelBundle load_model(const fs::path& checkpoint, const fs::path& sv, const fs::path& tv) {
  require_file(checkpoint, "checkpoint");
  require_file(sv, "source vocabulary");
  require_file(tv, "target vocabulary");
  ModelBundle b{NmtModel<float>::load(checkpoint), BpeVocab::load(sv), BpeVocab::load(tv)};
  const auto& s = b.model.shape();
  if (b.source_vocab.size() != s.src_vocab || b.target_vocab.size() != s.tgt_vocab) {
    throw DimensionMismatch("vocabulary sizes " + std::to_string(b.source_vocab.size()) + "/" +
                            std::to_string(b.target_vocab.size()) + " do not match checkpoint vocabularies " +
                            std::to_string(s.src_vocab) + "/" + std::to_string(s.tgt_vocab));
  }
  return b;
}

std::shared_ptr<const Datastore> load_datastore(const fs::path& path, std::uint32_t d_model) {
  require_file(path, "datastore");
  auto ds = std::make_shared<const Datastore>(Datastore::load(path));
  if (ds->size() > 0 && ds->dim() != d_model) {
    throw DimensionMismatch("datastore dimension " + std::to_string(ds->dim()) + " does not match model dimension " +
                            std::to_string(d_model));
  }
  return ds;
}

fs::path index_path(const fs::path& datastore) { return datastore.string() + ".index"; }

// ---------------------------------------------------------------- commands

struct VocabArgs {
  std::vector<std::string> inputs;
  std::size_t merges = 500;
  std::string out;
};

int cmd_build_vocab(const VocabArgs& a) {
  std::vector<std::string> lines;
  for (const auto& in : a.inputs) {
    require_file(in, "input");
    const auto l = read_lines(in);
    lines.insert(lines.end(), l.begin(), l.end());
  }
  log_resolved("build-vocab", {{"inputs", a.inputs}, {"merges", a.merges}, {"out", a.out}});
  const auto v = BpeVocab::train(lines, a.merges);
  v.save(a.out);
  std::cerr << "[build-vocab] " << v.merges().size() << " merges, " << v.size() << " tokens\n";
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::optional<std::string> mode, loss_form;
  std::optional<std::string> source_vocab, target_vocab, corpus, out, init, datastore, datastore_out, log;
  std::optional<std::size_t> epochs, batch_tokens, accumulation, k, warmup, refresh_steps, max_words;
  std::optional<double> lr, lambda, temp, tau;
  std::optional<std::uint32_t> d_model, heads, ff, enc_layers, dec_layers, max_len;
  bool exclude_self = false;
};

// Continued fine-tuning from an already fine-tuned checkpoint uses a smaller step.
constexpr double kContinueLearningRate = 7e-5;

int cmd_train(const TrainArgs& a, std::optional<std::uint64_t> seed) {
  Json cfg = Json::object();
  if (!a.config.empty()) {
    require_file(a.config, "config");
    cfg = read_json_file(a.config);
    if (!cfg.is_object()) throw ConfigError("config: expected an object");
  }
  for (auto it = cfg.begin(); it != cfg.end(); ++it) {
    if (it.key() != "model" && it.key() != "train" && it.key() != "paths" && it.key() != "max_sentence_words") {
      throw ConfigError("config: unknown key '" + it.key() + "'");
    }
  }
  ModelShape shape = cfg.contains("model") ? model_shape_from_json(cfg["model"]) : ModelShape{};
  const Json train_json = cfg.value("train", Json::object());
  TrainConfig tc = train_config_from_json(train_json);

  // Paths from the config, then flags.
  std::map<std::string, std::string> paths;
  if (cfg.contains("paths")) {
    const Json& p = cfg["paths"];
    if (!p.is_object()) throw ConfigError("config.paths: expected an object");
    for (auto it = p.begin(); it != p.end(); ++it) {
      static const std::set<std::string> known = {"source_vocab", "target_vocab", "corpus",        "init_checkpoint",
                                                  "datastore",    "checkpoint",   "datastore_out", "log"};
      if (!known.count(it.key())) throw ConfigError("config.paths: unknown key '" + it.key() + "'");
      if (!it.value().is_string()) throw ConfigError("config.paths." + it.key() + ": expected a string");
      paths[it.key()] = it.value().get<std::string>();
    }
  }
  auto set_path = [&](const char* key, const std::optional<std::string>& v) {
    if (v) paths[key] = *v;
  };
  set_path("source_vocab", a.source_vocab);
  set_path("target_vocab", a.target_vocab);
  set_path("corpus", a.corpus);
  set_path("init_checkpoint", a.init);
  set_path("datastore", a.datastore);
  set_path("checkpoint", a.out);
  set_path("datastore_out", a.datastore_out);
  set_path("log", a.log);
  std::size_t max_words = 250;
  if (cfg.contains("max_sentence_words")) {
    if (!cfg["max_sentence_words"].is_number_unsigned()) throw ConfigError("config.max_sentence_words: expected a non-negative integer");
    max_words = cfg["max_sentence_words"].get<std::size_t>();
  }
  if (a.max_words) max_words = *a.max_words;

  try {
    if (a.mode) tc.mode = parse_train_mode(*a.mode);
    if (a.loss_form) tc.loss_form = parse_loss_form(*a.loss_form);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch_tokens) tc.batch_tokens = *a.batch_tokens;
  if (a.accumulation) tc.accumulation = *a.accumulation;
  if (a.warmup) tc.warmup_steps = *a.warmup;
  if (a.refresh_steps) tc.refresh_steps = *a.refresh_steps;
  if (a.k) tc.knn.k = *a.k;
  if (a.lambda) tc.knn.lambda = *a.lambda;
  if (a.temp) tc.knn.temperature = *a.temp;
  if (a.tau) tc.tau = *a.tau;
  if (a.exclude_self) tc.exclude_self = true;
  if (seed) tc.seed = *seed;
  const bool continuing = paths.count("init_checkpoint") > 0;
  if (a.lr) {
    tc.learning_rate = *a.lr;
  } else if (continuing && !train_json.contains("learning_rate")) {
    tc.learning_rate = kContinueLearningRate;
  }
  if (a.d_model) shape.d_model = *a.d_model;
  if (a.heads) shape.heads = *a.heads;
  if (a.ff) shape.ff = *a.ff;
  if (a.enc_layers) shape.enc_layers = *a.enc_layers;
  if (a.dec_layers) shape.dec_layers = *a.dec_layers;
  if (a.max_len) shape.max_len = *a.max_len;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  for (const char* key : {"source_vocab", "target_vocab", "corpus", "checkpoint"}) {
    if (!paths.count(key)) throw ConfigError(std::string("train: missing path '") + key + "'");
  }

  require_corpus(paths["corpus"], "training corpus");
  require_file(paths["source_vocab"], "source vocabulary");
  require_file(paths["target_vocab"], "target vocabulary");
  const auto sv = BpeVocab::load(paths["source_vocab"]);
  const auto tv = BpeVocab::load(paths["target_vocab"]);

  NmtModel<float> model;
  if (continuing) {
    require_file(paths["init_checkpoint"], "initial checkpoint");
    model = NmtModel<float>::load(paths["init_checkpoint"]);
    if (model.shape().src_vocab != sv.size() || model.shape().tgt_vocab != tv.size()) {
      throw DimensionMismatch("vocabulary sizes do not match the initial checkpoint");
    }
    shape = model.shape();
  } else {
    shape.src_vocab = static_cast<std::uint32_t>(sv.size());
    shape.tgt_vocab = static_cast<std::uint32_t>(tv.size());
    try {
      shape.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
    model = NmtModel<float>::init(shape, tc.seed);
  }

  Json resolved;
  resolved["model"] = to_json(shape);
  resolved["train"] = to_json(tc);
  resolved["paths"] = paths;
  resolved["max_sentence_words"] = max_words;
  log_resolved("train", resolved);
  std::ofstream(paths["checkpoint"] + ".config.json") << resolved.dump(2) << '\n';

  const auto corpus = filter_by_length(read_corpus(paths["corpus"]), max_words);
  const auto encoded = encode_corpus(corpus, sv, tv);
  std::shared_ptr<const Datastore> ds;
  if (tc.mode != TrainMode::vanilla && paths.count("datastore")) ds = load_datastore(paths["datastore"], shape.d_model);

  std::unique_ptr<std::ofstream> log_file;
  TrainHooks<float> hooks;
  if (paths.count("log")) {
    log_file = std::make_unique<std::ofstream>(paths["log"]);
    hooks.log = log_file.get();
  }
  const auto result = fine_tune(model, encoded, ds, tc, hooks);
  for (const auto& e : result.epochs) {
    std::cerr << "[train] epoch " << e.epoch << " loss " << e.mean_loss << " ce " << e.mean_ce << " gated "
              << e.fraction_gated << " (" << e.seconds << " s)\n";
  }
  model.save(paths["checkpoint"]);
  if (paths.count("datastore_out")) {
    const auto store = result.datastore ? result.datastore : std::make_shared<const Datastore>(build_datastore(model, encoded));
    store->save(paths["datastore_out"]);
  }
  return kOk;
}

struct DatastoreArgs {
  std::string checkpoint, source_vocab, target_vocab, corpus, out;
  std::optional<std::size_t> cluster;
  bool quantize = false;
  std::size_t kmeans_iters = 10;
};

int cmd_build_datastore(const DatastoreArgs& a, std::optional<std::uint64_t> seed) {
  if (a.quantize && !a.cluster) throw ConfigError("build-datastore: --quantize needs --cluster");
  const auto mb = load_model(a.checkpoint, a.source_vocab, a.target_vocab);
  require_corpus(a.corpus, "corpus");
  Json resolved = {{"checkpoint", a.checkpoint}, {"corpus", a.corpus}, {"out", a.out}, {"quantize", a.quantize}};
  resolved["cluster"] = a.cluster ? Json(*a.cluster) : Json(nullptr);
  log_resolved("build-datastore", resolved);
  const auto encoded = encode_corpus(read_corpus(a.corpus), mb.source_vocab, mb.target_vocab);
  auto ds = std::make_shared<const Datastore>(build_datastore(mb.model, encoded));
  ds->save(a.out);
  std::cerr << "[build-datastore] " << ds->size() << " entries of dimension " << ds->dim() << '\n';
  if (a.cluster) {
    IndexOptions o;
    o.n_clusters = *a.cluster;
    o.quantize = a.quantize;
    o.kmeans_iters = a.kmeans_iters;
    if (seed) o.seed = *seed;
    try {
      ClusteredIndex::build(ds, o).save(index_path(a.out));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("build-datastore: ") + e.what());
    }
    std::cerr << "[build-datastore] index written to " << index_path(a.out).string() << '\n';
  }
  return kOk;
}

struct TranslateArgs {
  std::string checkpoint, source_vocab, target_vocab, input, output;
  std::optional<std::string> datastore;
  KnnParams knn;
  std::optional<std::size_t> nprobe;
  std::size_t beam = 1, max_len = 128, batch = 64;
};

int cmd_translate(const TranslateArgs& a) {
  const auto mb = load_model(a.checkpoint, a.source_vocab, a.target_vocab);
  require_file(a.input, "input");
  if (a.nprobe && !a.datastore) throw ConfigError("translate: --nprobe needs --datastore");
  TranslateOptions o;
  o.beam = a.beam;
  o.max_len = a.max_len;
  std::shared_ptr<const Datastore> ds;
  std::shared_ptr<const ClusteredIndex> index;
  std::unique_ptr<Retriever> retriever;
  if (a.datastore) {
    try {
      a.knn.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("translate: ") + e.what());
    }
    ds = load_datastore(*a.datastore, mb.model.shape().d_model);
    if (a.nprobe) {
      require_file(index_path(*a.datastore), "index");
      index = std::make_shared<const ClusteredIndex>(ClusteredIndex::load(index_path(*a.datastore), ds));
      if (*a.nprobe < 1 || *a.nprobe > index->n_clusters()) {
        throw ConfigError("translate: nprobe must be in [1, " + std::to_string(index->n_clusters()) + "]");
      }
      retriever = std::make_unique<ClusteredRetriever>(index, *a.nprobe);
    } else {
      retriever = std::make_unique<ExactRetriever>(ds);
    }
    o.knn = a.knn;
    o.retriever = retriever.get();
  }
  Json resolved = {{"checkpoint", a.checkpoint}, {"input", a.input}, {"output", a.output}, {"beam", a.beam},
                   {"max_len", a.max_len}};
  resolved["datastore"] = a.datastore ? Json(*a.datastore) : Json(nullptr);
  resolved["knn"] = o.knn ? to_json(*o.knn) : Json(nullptr);
  resolved["nprobe"] = a.nprobe ? Json(*a.nprobe) : Json(nullptr);
  log_resolved("translate", resolved);
  const auto lines = read_lines(a.input);
  const auto out = translate_all(mb.model, mb.source_vocab, mb.target_vocab, lines, o, a.batch);
  if (a.output.empty() || a.output == "-") {
    for (const auto& l : out) std::cout << l << '\n';
  } else {
    write_lines(a.output, out);
  }
  return kOk;
}

int cmd_evaluate(const std::string& hyp, const std::string& ref) {
  require_file(hyp, "hypotheses");
  require_file(ref, "references");
  const auto h = read_lines(hyp);
  const auto r = read_lines(ref);
  if (h.size() != r.size()) {
    throw DimensionMismatch(std::to_string(h.size()) + " hypotheses but " + std::to_string(r.size()) + " references");
  }
  std::cout << format_bleu(corpus_bleu(h, r)) << '\n';
  return kOk;
}

int cmd_make_corpus(const std::string& out, const std::string& config, std::optional<std::uint64_t> seed) {
  SyntheticOptions o;
  if (!config.empty()) {
    require_file(config, "config");
    o = synthetic_options_from_json(read_json_file(config));
  }
  if (seed) o.seed = *seed;
  log_resolved("make-corpus", to_json(o));
  write_bundle(make_synthetic_bundle(o), out);
  return kOk;
}

int cmd_experiment(const std::string& config, const std::string& out, const std::string& bundle_dir,
                   std::optional<std::uint64_t> seed) {
  ExperimentConfig c = ExperimentConfig::desk_default();
  if (!config.empty()) {
    require_file(config, "config");
    c = experiment_config_from_json(read_json_file(config));
  }
  if (seed) {
    c.init_seed = *seed;
    c.base_train.seed = *seed;
  }
  log_resolved("experiment", to_json(c));
  CorpusBundle bundle;
  if (bundle_dir.empty()) {
    SyntheticOptions so;
    if (seed) so.seed = *seed;
    bundle = make_synthetic_bundle(so);
    write_bundle(bundle, fs::path(out) / "corpus");
  } else {
    if (!fs::is_directory(bundle_dir)) throw MissingFile("corpus bundle '" + bundle_dir + "' does not exist");
    bundle = read_bundle(bundle_dir);
  }
  const auto result = run_experiment_matrix(c, bundle, out, &std::cerr);
  std::ifstream summary(fs::path(out) / "summary.tsv");
  std::cout << summary.rdbuf();
  const bool has_vanilla = std::find(c.modes.begin(), c.modes.end(), TrainMode::vanilla) != c.modes.end();
  if (has_vanilla) {
    for (const auto& chk : directional_checks(result, c)) {
      std::cout << (chk.pass ? "PASS " : "FAIL ") << chk.name << ": " << chk.detail << '\n';
    }
  }
  std::cout << "total " << result.seconds << " s\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tknn: trainable kNN machine translation toolkit"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Seed for every random choice of the command");

  VocabArgs va;
  auto* vocab = app.add_subcommand("build-vocab", "Learn BPE merges from text files");
  vocab->add_option("--input", va.inputs, "One sentence per line")->required();
  vocab->add_option("--merges", va.merges, "Number of merges");
  vocab->add_option("--out", va.out, "Vocabulary file")->required();

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train or fine-tune a model");
  train->add_option("--config", ta.config, "JSON run config");
  train->add_option("--mode", ta.mode, "vanilla, gate, gtprob or rl");
  train->add_option("--loss-form", ta.loss_form, "ratio-weight or literal");
  train->add_option("--source-vocab", ta.source_vocab);
  train->add_option("--target-vocab", ta.target_vocab);
  train->add_option("--corpus", ta.corpus, "Corpus prefix (<prefix>.src, <prefix>.tgt)");
  train->add_option("--continue", ta.init, "Start from this checkpoint");
  train->add_option("--datastore", ta.datastore, "Datastore built over the corpus with the initial weights");
  train->add_option("--out", ta.out, "Output checkpoint");
  train->add_option("--datastore-out", ta.datastore_out, "Write the final datastore here");
  train->add_option("--log", ta.log, "Per-epoch JSON metrics");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--lr", ta.lr);
  train->add_option("--warmup", ta.warmup);
  train->add_option("--batch-tokens", ta.batch_tokens);
  train->add_option("--accumulation", ta.accumulation);
  train->add_option("--refresh-steps", ta.refresh_steps);
  train->add_option("--k", ta.k);
  train->add_option("--lambda", ta.lambda);
  train->add_option("--temp", ta.temp);
  train->add_option("--tau", ta.tau);
  train->add_flag("--exclude-self", ta.exclude_self);
  train->add_option("--max-words", ta.max_words, "Length filter in whitespace tokens");
  train->add_option("--d-model", ta.d_model);
  train->add_option("--heads", ta.heads);
  train->add_option("--ff", ta.ff);
  train->add_option("--enc-layers", ta.enc_layers);
  train->add_option("--dec-layers", ta.dec_layers);
  train->add_option("--max-len", ta.max_len);

  DatastoreArgs da;
  auto* datastore = app.add_subcommand("build-datastore", "Build a datastore (and optionally an index) over a corpus");
  datastore->add_option("--checkpoint", da.checkpoint)->required();
  datastore->add_option("--source-vocab", da.source_vocab)->required();
  datastore->add_option("--target-vocab", da.target_vocab)->required();
  datastore->add_option("--corpus", da.corpus, "Corpus prefix")->required();
  datastore->add_option("--out", da.out)->required();
  datastore->add_option("--cluster", da.cluster, "Also write <out>.index with this many clusters");
  datastore->add_flag("--quantize", da.quantize, "8-bit codes in the index");
  datastore->add_option("--kmeans-iters", da.kmeans_iters);

  TranslateArgs tra;
  auto* translate = app.add_subcommand("translate", "Translate one sentence per line");
  translate->add_option("--checkpoint", tra.checkpoint)->required();
  translate->add_option("--source-vocab", tra.source_vocab)->required();
  translate->add_option("--target-vocab", tra.target_vocab)->required();
  translate->add_option("--input", tra.input)->required();
  translate->add_option("--output", tra.output, "Defaults to stdout");
  translate->add_option("--datastore", tra.datastore, "Enable kNN decoding");
  translate->add_option("--k", tra.knn.k);
  translate->add_option("--lambda", tra.knn.lambda);
  translate->add_option("--temp", tra.knn.temperature);
  translate->add_option("--nprobe", tra.nprobe, "Search <datastore>.index instead of exact search");
  translate->add_option("--beam", tra.beam);
  translate->add_option("--max-len", tra.max_len);
  translate->add_option("--batch", tra.batch, "Sentences decoded together");

  std::string hyp, ref;
  auto* evaluate = app.add_subcommand("evaluate", "Corpus BLEU of hypotheses against references");
  evaluate->add_option("--hyp", hyp)->required();
  evaluate->add_option("--ref", ref)->required();

  std::string corpus_out, corpus_config;
  auto* make_corpus = app.add_subcommand("make-corpus", "Write the synthetic two-domain corpus bundle");
  make_corpus->add_option("--out", corpus_out)->required();
  make_corpus->add_option("--config", corpus_config, "JSON generator options");

  std::string exp_config, exp_out, exp_bundle;
  auto* experiment = app.add_subcommand("experiment", "Run the base / fine-tune experiment matrix");
  experiment->add_option("--config", exp_config, "JSON experiment config");
  experiment->add_option("--out", exp_out)->required();
  experiment->add_option("--bundle", exp_bundle, "Corpus bundle directory (generated when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*vocab) return cmd_build_vocab(va);
    if (*train) return cmd_train(ta, seed);
    if (*datastore) return cmd_build_datastore(da, seed);
    if (*translate) return cmd_translate(tra);
    if (*evaluate) return cmd_evaluate(hyp, ref);
    if (*make_corpus) return cmd_make_corpus(corpus_out, corpus_config, seed);
    if (*experiment) return cmd_experiment(exp_config, exp_out, exp_bundle, seed);
  } catch (const MissingFile& e) {
    std::cerr << "error: missing file: " << e.what() << '\n';
    return kMissingFile;
  } catch (const ConfigError& e) {
    std::cerr << "error: schema violation: " << e.what() << '\n';
    return kSchema;
  } catch (const DimensionMismatch& e) {
    std::cerr << "error: dimension mismatch: " << e.what() << '\n';
    return kDimension;
  } catch (const FormatError& e) {
    std::cerr << "error: corrupt file: " << e.what() << '\n';
    return kCorrupt;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
