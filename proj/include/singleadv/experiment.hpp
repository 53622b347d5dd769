#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "singleadv/attack.hpp"
#include "singleadv/datasets.hpp"
#include "singleadv/defenses.hpp"
#include "singleadv/interpreters.hpp"
#include "singleadv/models.hpp"

#include "json.hpp"

namespace singleadv {

/// Invalid configuration; `field` is the dotted path of the offending entry.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : std::invalid_argument(field.empty() ? message : field + ": " + message), field(field) {}
  std::string field;
};

struct DatasetSpec {
  std::string kind = "synthetic";
  SyntheticShapesConfig synthetic;
  std::filesystem::path path;
  int num_categories = 10;
};

struct ModelSpec {
  std::string architecture = "cnn-small";
  TrainConfig train;
};

struct AttackSpec {
  AttackConfig config;
  /// Category names or indices; resolved against the dataset's names.
  std::string source = "square";
  std::string target = "disc";
  /// Non-empty: choose lambda from these candidates on the validation split.
  std::vector<double> lambda_grid;
};

struct MetricSpec {
  std::vector<double> thresholds;
  double confidence_gate = 0.6;
  int grid_rows = 4;
};

struct DefenseSpec {
  std::vector<std::string> chains;
  AdvTrainConfig adv_train;
};

struct BlackboxSpec {
  std::string teacher_architecture = "cnn-wide";
  std::string student_architecture = "cnn-deep";
  bool allow_same_architecture = false;
  TrainConfig teacher_train;
  TrainConfig student_train;
  int pool_per_category = 300;
  std::uint64_t pool_seed = 11;
  /// Attack budget used against the student; the main attack spec otherwise.
  std::optional<double> eta;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DatasetSpec dataset;
  ModelSpec model;
  AttackSpec attack;
  MetricSpec metrics;
  DefenseSpec defense;
  BlackboxSpec blackbox;
  /// The effective document the typed fields were read from.
  nlohmann::ordered_json document;

  std::string hash() const;
};

/// Defaults as a JSON document; every accepted key appears here.
nlohmann::ordered_json default_config_document();
/// Names accepted by --preset.
std::vector<std::string> preset_names();
/// Partial document layered over the defaults.
nlohmann::ordered_json preset_document(const std::string& name);

/// Recursively overlays `patch` onto `base`; unknown keys are rejected.
void merge_config(nlohmann::ordered_json& base, const nlohmann::ordered_json& patch, const std::string& prefix = "");
/// "a.b.c=value"; the value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::ordered_json& doc, const std::string& assignment);

/// Reads and validates every field. Throws ConfigError.
ExperimentConfig parse_config(const nlohmann::ordered_json& doc);
/// Parses a config file; JSON syntax errors report line and column.
nlohmann::ordered_json read_config_file(const std::filesystem::path& path);

/// Category index from a name or a decimal index.
int resolve_category(const std::string& ref, const std::vector<std::string>& names, int num_categories,
                     const std::string& field);

}  // namespace singleadv
