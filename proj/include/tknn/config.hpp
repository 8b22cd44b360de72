#pragma once

// JSON configuration for models, training and experiments. Every object
// rejects keys it does not know; missing keys keep their defaults.

#include <stdexcept>
#include <string>

#include "json.hpp"
#include "tknn/knn.hpp"
#include "tknn/model.hpp"
#include "tknn/synthetic.hpp"
#include "tknn/trainer.hpp"

namespace tknn {

/// Schema violation; `what()` names the offending key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Json = nlohmann::ordered_json;

/// Parses a JSON file or throws ConfigError (syntax) / runtime_error (I/O).
Json read_json_file(const std::string& path);

KnnParams knn_params_from_json(const Json& j, const std::string& where = "knn");
Json to_json(const KnnParams& p);

/// Vocabulary sizes are not part of the schema; they come from the vocab files.
ModelShape model_shape_from_json(const Json& j, const std::string& where = "model");
Json to_json(const ModelShape& s);

TrainConfig train_config_from_json(const Json& j, const std::string& where = "train");
/// Applies the keys present in `j` on top of `base`.
TrainConfig train_config_from_json(const Json& j, TrainConfig base, const std::string& where = "train");
Json to_json(const TrainConfig& c);

SyntheticOptions synthetic_options_from_json(const Json& j, const std::string& where = "synthetic");
Json to_json(const SyntheticOptions& o);

}  // namespace tknn
