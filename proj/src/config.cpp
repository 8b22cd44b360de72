#include "tknn/config.hpp"

#include <set>
#include <type_traits>

#include "tknn/binary_io.hpp"

namespace tknn {

namespace {

// Reads typed fields from one JSON object and rejects whatever is left.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if constexpr (std::is_integral_v<V> && !std::is_same_v<V, bool>) {
      if (!it->is_number_integer()) throw ConfigError(where_ + "." + key + ": expected an integer");
      if (std::is_unsigned_v<V> && !it->is_number_unsigned()) {
        throw ConfigError(where_ + "." + key + ": must be non-negative");
      }
    }
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  /// Key present: passes the value to `parse`, turning invalid_argument into ConfigError.
  template <typename F>
  void with(const char* key, F&& parse) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      parse(*it);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type (" + std::string(it->type_name()) + ")");
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

  const std::string& where() const { return where_; }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename F>
void validated(const std::string& where, F&& check) {
  try {
    check();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

}  // namespace

Json read_json_file(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

KnnParams knn_params_from_json(const Json& j, const std::string& where) {
  KnnParams p;
  Fields f(j, where);
  f.get("k", p.k);
  f.get("temperature", p.temperature);
  f.get("lambda", p.lambda);
  f.get("squared_distance", p.squared_distance);
  f.finish();
  validated(where, [&] { p.validate(); });
  return p;
}

Json to_json(const KnnParams& p) {
  return {{"k", p.k}, {"temperature", p.temperature}, {"lambda", p.lambda}, {"squared_distance", p.squared_distance}};
}

ModelShape model_shape_from_json(const Json& j, const std::string& where) {
  ModelShape s;
  Fields f(j, where);
  f.get("d_model", s.d_model);
  f.get("heads", s.heads);
  f.get("ff", s.ff);
  f.get("enc_layers", s.enc_layers);
  f.get("dec_layers", s.dec_layers);
  f.get("max_len", s.max_len);
  f.finish();
  return s;
}

Json to_json(const ModelShape& s) {
  return {{"d_model", s.d_model}, {"heads", s.heads},           {"ff", s.ff},
          {"enc_layers", s.enc_layers}, {"dec_layers", s.dec_layers}, {"max_len", s.max_len}};
}

TrainConfig train_config_from_json(const Json& j, const std::string& where) {
  return train_config_from_json(j, TrainConfig{}, where);
}

TrainConfig train_config_from_json(const Json& j, TrainConfig c, const std::string& where) {
  Fields f(j, where);
  f.with("mode", [&](const Json& v) { c.mode = parse_train_mode(v.get<std::string>()); });
  f.with("knn", [&](const Json& v) {
    // Partial knn objects override field by field.
    Json merged = to_json(c.knn);
    if (!v.is_object()) throw std::invalid_argument("expected an object");
    for (auto it = v.begin(); it != v.end(); ++it) merged[it.key()] = it.value();
    c.knn = knn_params_from_json(merged, where + ".knn");
  });
  f.get("tau", c.tau);
  f.with("gate_c", [&](const Json& v) {
    if (v.is_null()) {
      c.gate_c.reset();
    } else {
      c.gate_c = v.get<double>();
    }
  });
  f.with("loss_form", [&](const Json& v) { c.loss_form = parse_loss_form(v.get<std::string>()); });
  f.get("learning_rate", c.learning_rate);
  f.get("warmup_steps", c.warmup_steps);
  f.get("batch_tokens", c.batch_tokens);
  f.get("accumulation", c.accumulation);
  f.get("epochs", c.epochs);
  f.get("refresh_steps", c.refresh_steps);
  f.get("refresh_epochs", c.refresh_epochs);
  f.get("refresh_at_start", c.refresh_at_start);
  f.get("seed", c.seed);
  f.get("ce_floor", c.ce_floor);
  f.get("rl_argmax", c.rl_argmax);
  f.get("exclude_self", c.exclude_self);
  f.get("datastore_batch", c.datastore_batch);
  f.finish();
  validated(where, [&] { c.validate(); });
  return c;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["mode"] = to_string(c.mode);
  j["knn"] = to_json(c.knn);
  j["tau"] = c.tau;
  j["gate_c"] = c.gate_c ? Json(*c.gate_c) : Json(nullptr);
  j["loss_form"] = to_string(c.loss_form);
  j["learning_rate"] = c.learning_rate;
  j["warmup_steps"] = c.warmup_steps;
  j["batch_tokens"] = c.batch_tokens;
  j["accumulation"] = c.accumulation;
  j["epochs"] = c.epochs;
  j["refresh_steps"] = c.refresh_steps;
  j["refresh_epochs"] = c.refresh_epochs;
  j["refresh_at_start"] = c.refresh_at_start;
  j["seed"] = c.seed;
  j["ce_floor"] = c.ce_floor;
  j["rl_argmax"] = c.rl_argmax;
  j["exclude_self"] = c.exclude_self;
  j["datastore_batch"] = c.datastore_batch;
  return j;
}

SyntheticOptions synthetic_options_from_json(const Json& j, const std::string& where) {
  SyntheticOptions o;
  Fields f(j, where);
  f.get("seed", o.seed);
  f.get("train_a", o.train_a);
  f.get("valid_a", o.valid_a);
  f.get("test_a", o.test_a);
  f.get("train_b", o.train_b);
  f.get("valid_b", o.valid_b);
  f.get("test_b", o.test_b);
  f.get("nouns", o.nouns);
  f.get("verbs", o.verbs);
  f.get("adjectives", o.adjectives);
  f.get("shifted_nouns", o.shifted_nouns);
  f.get("shifted_verbs", o.shifted_verbs);
  f.get("zipf", o.zipf);
  f.finish();
  return o;
}

Json to_json(const SyntheticOptions& o) {
  return {{"seed", o.seed},       {"train_a", o.train_a}, {"valid_a", o.valid_a},
          {"test_a", o.test_a},   {"train_b", o.train_b}, {"valid_b", o.valid_b},
          {"test_b", o.test_b},   {"nouns", o.nouns},     {"verbs", o.verbs},
          {"adjectives", o.adjectives}, {"shifted_nouns", o.shifted_nouns}, {"shifted_verbs", o.shifted_verbs},
          {"zipf", o.zipf}};
}

}  // namespace tknn
