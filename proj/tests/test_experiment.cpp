#include <filesystem>
#include <fstream>
#include <functional>

#include "doctest.h"
#include "singleadv/experiment.hpp"

using namespace singleadv;
using Json = nlohmann::ordered_json;

namespace {

std::string field_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.field;
  }
  return "<no error>";
}

ExperimentConfig with(const std::string& assignment) {
  Json doc = default_config_document();
  apply_override(doc, assignment);
  return parse_config(doc);
}

}  // namespace

TEST_CASE("defaults parse and match the documented settings") {
  const auto c = parse_config(default_config_document());
  CHECK(c.model.architecture == "cnn-small");
  CHECK(c.attack.config.gamma == 0.6);
  CHECK(c.attack.config.eta == 0.05);
  CHECK(c.attack.config.interpreter == InterpreterKind::kCam);
  CHECK(c.metrics.confidence_gate == 0.6);
  CHECK(c.metrics.thresholds.size() == 9);
  CHECK(c.defense.adv_train.threshold == 0.3);
  CHECK(c.defense.chains.size() == 3);
  CHECK(c.blackbox.teacher_architecture != c.blackbox.student_architecture);
  CHECK(c.hash() == parse_config(default_config_document()).hash());
  CHECK(c.hash() != with("seed=2").hash());
}

TEST_CASE("every preset parses") {
  for (const auto& name : preset_names()) {
    Json doc = default_config_document();
    merge_config(doc, preset_document(name));
    if (doc["dataset"]["kind"] == "directory") {
      CHECK(field_of([&] { parse_config(doc); }) == "dataset.path");
      continue;
    }
    CHECK_NOTHROW(parse_config(doc));
  }
  const auto full = [] {
    Json doc = default_config_document();
    merge_config(doc, preset_document("cifar10-advtrain"));
    return parse_config(doc);
  }();
  CHECK(full.defense.adv_train.epsilon == 0.031);
  CHECK(full.defense.adv_train.batch_size == 128);
  CHECK(full.defense.adv_train.epochs == 500);
  CHECK(field_of([] { preset_document("nope"); }) == "preset");
}

TEST_CASE("overrides and merging") {
  Json doc = default_config_document();
  apply_override(doc, "attack.eta=0.1");
  apply_override(doc, "attack.source=triangle");
  apply_override(doc, "attack.lambda_grid=[0.1, 1]");
  const auto c = parse_config(doc);
  CHECK(c.attack.config.eta == 0.1);
  CHECK(c.attack.source == "triangle");
  CHECK(c.attack.lambda_grid == std::vector<double>{0.1, 1.0});
  CHECK(field_of([&] { apply_override(doc, "attack.nope=1"); }) == "attack.nope");
  CHECK(field_of([&] { apply_override(doc, "attack.eta"); }) == "override");
  CHECK(field_of([&] { merge_config(doc, Json{{"model", {{"layers", 3}}}}); }) == "model.layers");
  CHECK(field_of([&] { merge_config(doc, Json{{"attack", {{"eta", {{"x", 1}}}}}}); }) == "attack.eta");
}

TEST_CASE("invalid values name their field") {
  CHECK(field_of([] { with("attack.eta=\"big\""); }) == "attack.eta");
  CHECK(field_of([] { with("attack.max_iterations=1.5"); }) == "attack.max_iterations");
  CHECK(field_of([] { with("attack.gamma=2"); }) == "attack");
  CHECK(field_of([] { with("attack.interpreter=\"lime\""); }) == "attack.interpreter");
  CHECK(field_of([] { with("attack.grad_tau=0"); }) == "attack.grad_tau");
  CHECK(field_of([] { with("model.architecture=\"resnet\""); }) == "model.architecture");
  CHECK(field_of([] { with("model.train.decay=\"step\""); }) == "model.train.decay");
  CHECK(field_of([] { with("model.train.epochs=0"); }) == "model.train");
  CHECK(field_of([] { with("dataset.num_categories=11"); }) == "dataset.num_categories");
  CHECK(field_of([] { with("dataset.kind=\"web\""); }) == "dataset.kind");
  CHECK(field_of([] { with("metrics.thresholds=[0.5, 1.0]"); }) == "metrics.thresholds");
  CHECK(field_of([] { with("metrics.confidence_gate=-0.1"); }) == "metrics.confidence_gate");
  CHECK(field_of([] { with("blackbox.student_architecture=\"cnn-wide\""); }) == "blackbox.student_architecture");
  CHECK(field_of([] { with("blackbox.eta=0"); }) == "blackbox.eta");
}

TEST_CASE("config files report syntax errors with a position") {
  const auto dir = std::filesystem::temp_directory_path() / "singleadv_cfg";
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "bad.json");
    os << "{\n  \"seed\": 3,\n  \"attack\": {\"eta\": }\n}\n";
  }
  try {
    read_config_file(dir / "bad.json");
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK(field_of([&] { read_config_file(dir / "missing.json"); }) == "config");
  {
    std::ofstream os(dir / "good.json");
    os << "{\"seed\": 3}";
  }
  Json doc = default_config_document();
  merge_config(doc, read_config_file(dir / "good.json"));
  CHECK(parse_config(doc).seed == 3);
}

TEST_CASE("category resolution") {
  const std::vector<std::string> names{"disc", "square", "triangle"};
  CHECK(resolve_category("square", names, 3, "attack.source") == 1);
  CHECK(resolve_category("2", names, 3, "attack.source") == 2);
  CHECK(field_of([&] { resolve_category("3", names, 3, "attack.target"); }) == "attack.target");
  CHECK(field_of([&] { resolve_category("ring", names, 3, "attack.target"); }) == "attack.target");
}

TEST_CASE("shipped config files parse") {
  int files = 0;
  for (const auto& e : std::filesystem::directory_iterator(SINGLEADV_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    Json doc = default_config_document();
    merge_config(doc, read_config_file(e.path()));
    CHECK_NOTHROW(parse_config(doc));
    ++files;
  }
  CHECK(files >= 2);
}
