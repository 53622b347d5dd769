#include "singleadv/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "singleadv/metrics.hpp"

namespace singleadv {

using Json = nlohmann::ordered_json;

namespace {

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

const Json& at(const Json& doc, const std::string& path) {
  const Json* cur = &doc;
  std::stringstream ss(path);
  std::string key;
  while (std::getline(ss, key, '.')) {
    if (!cur->is_object() || !cur->contains(key)) throw ConfigError(path, "missing field");
    cur = &(*cur)[key];
  }
  return *cur;
}

double get_double(const Json& doc, const std::string& path) {
  const Json& v = at(doc, path);
  if (!v.is_number()) throw ConfigError(path, "expected a number");
  return v.get<double>();
}

std::optional<double> get_optional_double(const Json& doc, const std::string& path) {
  const Json& v = at(doc, path);
  if (v.is_null()) return std::nullopt;
  if (!v.is_number()) throw ConfigError(path, "expected a number or null");
  return v.get<double>();
}

long long get_int(const Json& doc, const std::string& path) {
  const Json& v = at(doc, path);
  if (v.is_number_integer() || v.is_number_unsigned()) return v.get<long long>();
  if (v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long long>(v.get<double>())))
    return static_cast<long long>(v.get<double>());
  throw ConfigError(path, "expected an integer");
}

std::uint64_t get_u64(const Json& doc, const std::string& path) {
  const Json& v = at(doc, path);
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  const long long i = get_int(doc, path);
  if (i < 0) throw ConfigError(path, "expected a nonnegative integer");
  return static_cast<std::uint64_t>(i);
}

bool get_bool(const Json& doc, const std::string& path) {
  const Json& v = at(doc, path);
  if (!v.is_boolean()) throw ConfigError(path, "expected true or false");
  return v.get<bool>();
}

std::string get_string(const Json& doc, const std::string& path) {
  const Json& v = at(doc, path);
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer() || v.is_number_unsigned()) return std::to_string(v.get<long long>());
  throw ConfigError(path, "expected a string");
}

std::vector<double> get_doubles(const Json& doc, const std::string& path) {
  const Json& v = at(doc, path);
  if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
  std::vector<double> out;
  for (const auto& e : v) {
    if (!e.is_number()) throw ConfigError(path, "expected an array of numbers");
    out.push_back(e.get<double>());
  }
  return out;
}

std::vector<std::string> get_strings(const Json& doc, const std::string& path) {
  const Json& v = at(doc, path);
  if (!v.is_array()) throw ConfigError(path, "expected an array of strings");
  std::vector<std::string> out;
  for (const auto& e : v) {
    if (!e.is_string()) throw ConfigError(path, "expected an array of strings");
    out.push_back(e.get<std::string>());
  }
  return out;
}

LrDecay parse_decay(const std::string& s, const std::string& path) {
  if (s == "constant") return LrDecay::kConstant;
  if (s == "linear") return LrDecay::kLinear;
  if (s == "cosine") return LrDecay::kCosine;
  if (s == "exponential") return LrDecay::kExponential;
  throw ConfigError(path, "unknown decay '" + s + "' (constant, linear, cosine, exponential)");
}

Json train_doc(int epochs, int batch, double lr0, double lr1) {
  return Json{{"epochs", epochs}, {"batch_size", batch}, {"lr_initial", lr0}, {"lr_final", lr1},
              {"decay", "cosine"}, {"momentum", 0.9}};
}

TrainConfig parse_train(const Json& doc, const std::string& p, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = static_cast<int>(get_int(doc, p + ".epochs"));
  t.batch_size = static_cast<int>(get_int(doc, p + ".batch_size"));
  t.lr_initial = get_double(doc, p + ".lr_initial");
  t.lr_final = get_double(doc, p + ".lr_final");
  t.decay = parse_decay(get_string(doc, p + ".decay"), p + ".decay");
  t.momentum = get_double(doc, p + ".momentum");
  t.seed = seed;
  try {
    t.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(p, e.what());
  }
  return t;
}

template <typename F>
void checked(const std::string& field, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(field, e.what());
  }
}

}  // namespace

Json default_config_document() {
  Json thresholds = Json::array();
  for (double t : default_iou_thresholds()) thresholds.push_back(t);
  const AdvTrainConfig adv = AdvTrainConfig::reduced();
  return Json{
      {"seed", 1},
      {"dataset",
       {{"kind", "synthetic"},
        {"path", ""},
        {"num_categories", 10},
        {"synthetic",
         {{"train_per_category", 300},
          {"test_per_category", 50},
          {"channels", 3},
          {"height", 16},
          {"width", 16},
          {"min_radius", 0.22},
          {"max_radius", 0.34},
          {"position_jitter", 0.25},
          {"texture_amplitude", 0.08},
          {"noise_stddev", 0.03},
          {"min_contrast", 0.3},
          {"polarity", 1},
          {"color_coded", false},
          {"seed", 7}}}}},
      {"model", {{"architecture", "cnn-small"}, {"train", train_doc(6, 32, 0.05, 0.005)}}},
      {"attack",
       {{"interpreter", "cam"},
        {"source", "square"},
        {"target", "disc"},
        {"eta", 0.05},
        {"lambda", 0.1},
        {"lambda_grid", Json::array()},
        {"batch_size", 16},
        {"gamma", 0.6},
        {"beta1", 0.9},
        {"beta2", 0.999},
        {"step_scale", 1.0 / 255.0},
        {"max_iterations", 5000},
        {"check_interval", 50},
        {"validation_fraction", 0.2},
        {"grad_tau", 1e-4},
        {"swap_relu_branches", false},
        {"mask",
         {{"sparsity_weight", 0.05}, {"inner_steps", 20}, {"step_size", 0.5}, {"blur_sigma", 2.0},
          {"noise_stddev", 0.0}}}}},
      {"metrics", {{"thresholds", thresholds}, {"confidence_gate", 0.6}, {"grid_rows", 4}}},
      {"defense",
       {{"chains", Json::array({"bit_depth:4+median:3", "bit_depth:4+resize_pad:0.8:1", "median:3+resize_pad:0.8:1"})},
        {"adv_train",
         {{"epsilon", adv.epsilon},
          {"radius", nullptr},
          {"lr_initial", adv.lr_initial},
          {"lr_final", adv.lr_final},
          {"decay", "cosine"},
          {"momentum", adv.momentum},
          {"threshold", adv.threshold},
          {"epochs", adv.epochs},
          {"batch_size", adv.batch_size}}}}},
      {"blackbox",
       {{"teacher_architecture", "cnn-wide"},
        {"student_architecture", "cnn-deep"},
        {"allow_same_architecture", false},
        {"teacher_train", train_doc(8, 16, 0.05, 0.005)},
        {"student_train", train_doc(8, 16, 0.05, 0.005)},
        {"pool_per_category", 300},
        {"pool_seed", 11},
        {"eta", nullptr}}},
  };
}

std::vector<std::string> preset_names() {
  return {"desk", "smoke", "panda-cat", "dog-goose", "cup-wolf", "cifar10-advtrain"};
}

Json preset_document(const std::string& name) {
  if (name == "desk") return Json::object();
  if (name == "smoke") {
    return Json{
        {"dataset",
         {{"num_categories", 4},
          {"synthetic",
           {{"train_per_category", 60},
            {"test_per_category", 12},
            {"color_coded", true},
            {"position_jitter", 0.25}}}}},
        {"model", {{"train", {{"epochs", 10}}}}},
        {"attack", {{"max_iterations", 60}, {"check_interval", 20}, {"batch_size", 8}}},
        {"metrics", {{"grid_rows", 2}}},
        {"defense", {{"adv_train", {{"epochs", 1}}}}},
        {"blackbox",
         {{"pool_per_category", 40}, {"teacher_train", {{"epochs", 6}}}, {"student_train", {{"epochs", 6}}}}},
    };
  }
  // ImageNet target pairs; they need a directory dataset whose categories.txt names them.
  auto pair = [](const char* s, const char* t) {
    return Json{{"dataset", {{"kind", "directory"}}}, {"attack", {{"source", s}, {"target", t}}}};
  };
  if (name == "panda-cat") return pair("panda", "cat");
  if (name == "dog-goose") return pair("dog", "goose");
  if (name == "cup-wolf") return pair("cup", "wolf");
  if (name == "cifar10-advtrain") {
    const AdvTrainConfig p = AdvTrainConfig::full();
    return Json{{"defense",
                 {{"adv_train",
                   {{"epsilon", p.epsilon},
                    {"lr_initial", p.lr_initial},
                    {"lr_final", p.lr_final},
                    {"epochs", p.epochs},
                    {"batch_size", p.batch_size}}}}}};
  }
  std::string names;
  for (const auto& n : preset_names()) names += (names.empty() ? "" : ", ") + n;
  throw ConfigError("preset", "unknown preset '" + name + "' (" + names + ")");
}

void merge_config(Json& base, const Json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError(prefix, "expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = join_path(prefix, key);
    if (!base.contains(key)) throw ConfigError(path, "unknown field");
    Json& slot = base[key];
    if (slot.is_object()) {
      merge_config(slot, value, path);
    } else {
      if (value.is_object()) throw ConfigError(path, "expected a scalar or array, got an object");
      slot = value;
    }
  }
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override", "expected key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  Json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError(key, "empty path component");
    parts.push_back(part);
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = Json{{*it, patch}};
  merge_config(doc, patch);
}

Json read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config", "cannot read " + path.string());
  try {
    return Json::parse(is);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config", path.string() + ": " + e.what());
  }
}

int resolve_category(const std::string& ref, const std::vector<std::string>& names, int num_categories,
                     const std::string& field) {
  if (!ref.empty() && std::all_of(ref.begin(), ref.end(), [](unsigned char c) { return std::isdigit(c); })) {
    const int v = std::stoi(ref);
    if (v >= num_categories) throw ConfigError(field, "category index " + ref + " out of range");
    return v;
  }
  for (std::size_t i = 0; i < names.size() && static_cast<int>(i) < num_categories; ++i)
    if (names[i] == ref) return static_cast<int>(i);
  std::string avail;
  for (std::size_t i = 0; i < names.size() && static_cast<int>(i) < num_categories; ++i)
    avail += (avail.empty() ? "" : ", ") + names[i];
  throw ConfigError(field, "unknown category '" + ref + "'" + (avail.empty() ? "" : " (available: " + avail + ")"));
}

ExperimentConfig parse_config(const Json& doc) {
  ExperimentConfig c;
  c.document = doc;
  c.seed = get_u64(doc, "seed");

  auto& ds = c.dataset;
  ds.kind = get_string(doc, "dataset.kind");
  if (ds.kind != "synthetic" && ds.kind != "directory")
    throw ConfigError("dataset.kind", "expected 'synthetic' or 'directory'");
  ds.path = get_string(doc, "dataset.path");
  ds.num_categories = static_cast<int>(get_int(doc, "dataset.num_categories"));
  if (ds.num_categories < 2) throw ConfigError("dataset.num_categories", "need at least 2 categories");
  auto& sc = ds.synthetic;
  sc.num_categories = ds.num_categories;
  sc.train_per_category = static_cast<int>(get_int(doc, "dataset.synthetic.train_per_category"));
  sc.test_per_category = static_cast<int>(get_int(doc, "dataset.synthetic.test_per_category"));
  sc.shape = {static_cast<int>(get_int(doc, "dataset.synthetic.channels")),
              static_cast<int>(get_int(doc, "dataset.synthetic.height")),
              static_cast<int>(get_int(doc, "dataset.synthetic.width"))};
  sc.min_radius = get_double(doc, "dataset.synthetic.min_radius");
  sc.max_radius = get_double(doc, "dataset.synthetic.max_radius");
  sc.position_jitter = get_double(doc, "dataset.synthetic.position_jitter");
  sc.texture_amplitude = get_double(doc, "dataset.synthetic.texture_amplitude");
  sc.noise_stddev = get_double(doc, "dataset.synthetic.noise_stddev");
  sc.min_contrast = get_double(doc, "dataset.synthetic.min_contrast");
  sc.polarity = static_cast<int>(get_int(doc, "dataset.synthetic.polarity"));
  if (sc.polarity < -1 || sc.polarity > 1) throw ConfigError("dataset.synthetic.polarity", "must be -1, 0 or 1");
  sc.color_coded = get_bool(doc, "dataset.synthetic.color_coded");
  sc.seed = get_u64(doc, "dataset.synthetic.seed");
  if (ds.kind == "synthetic") {
    if (ds.num_categories > 10) throw ConfigError("dataset.num_categories", "synthetic shapes support at most 10");
    if (sc.train_per_category < 1) throw ConfigError("dataset.synthetic.train_per_category", "must be positive");
    if (sc.test_per_category < 1) throw ConfigError("dataset.synthetic.test_per_category", "must be positive");
    if (!(sc.position_jitter >= 0.0 && sc.position_jitter <= 1.0))
      throw ConfigError("dataset.synthetic.position_jitter", "must lie in [0, 1]");
    if (!(sc.min_radius > 0.0 && sc.min_radius <= sc.max_radius && sc.max_radius < 0.5))
      throw ConfigError("dataset.synthetic.min_radius", "need 0 < min_radius <= max_radius < 0.5");
  } else {
    if (ds.path.empty()) throw ConfigError("dataset.path", "required for directory datasets");
    if (!std::filesystem::is_directory(ds.path)) throw ConfigError("dataset.path", "no such directory: " + ds.path.string());
  }

  c.model.architecture = get_string(doc, "model.architecture");
  checked("model.architecture", [&] { architecture(c.model.architecture); });
  c.model.train = parse_train(doc, "model.train", c.seed);

  auto& a = c.attack;
  auto& ac = a.config;
  checked("attack.interpreter", [&] { ac.interpreter = parse_interpreter(get_string(doc, "attack.interpreter")); });
  a.source = get_string(doc, "attack.source");
  a.target = get_string(doc, "attack.target");
  ac.eta = get_double(doc, "attack.eta");
  ac.lambda = get_double(doc, "attack.lambda");
  a.lambda_grid = get_doubles(doc, "attack.lambda_grid");
  for (double l : a.lambda_grid)
    if (!(l >= 0.0)) throw ConfigError("attack.lambda_grid", "entries must be nonnegative");
  ac.batch_size = static_cast<int>(get_int(doc, "attack.batch_size"));
  ac.gamma = get_double(doc, "attack.gamma");
  ac.beta1 = get_double(doc, "attack.beta1");
  ac.beta2 = get_double(doc, "attack.beta2");
  ac.step_scale = get_double(doc, "attack.step_scale");
  ac.max_iterations = static_cast<int>(get_int(doc, "attack.max_iterations"));
  ac.check_interval = static_cast<int>(get_int(doc, "attack.check_interval"));
  ac.validation_fraction = get_double(doc, "attack.validation_fraction");
  const double tau = get_double(doc, "attack.grad_tau");
  if (!(tau > 0.0)) throw ConfigError("attack.grad_tau", "must be positive");
  ac.interpreter_options.grad_surrogate = ReluMode::smoothed(tau, get_bool(doc, "attack.swap_relu_branches"));
  auto& mk = ac.interpreter_options.mask;
  mk.sparsity_weight = get_double(doc, "attack.mask.sparsity_weight");
  mk.inner_steps = static_cast<int>(get_int(doc, "attack.mask.inner_steps"));
  mk.step_size = get_double(doc, "attack.mask.step_size");
  mk.blur_sigma = get_double(doc, "attack.mask.blur_sigma");
  mk.noise_stddev = get_double(doc, "attack.mask.noise_stddev");
  mk.seed = c.seed;
  ac.seed = c.seed;
  // Categories are resolved later against the dataset; use distinct placeholders for validation.
  ac.source_category = 0;
  ac.target_category = 1;
  checked("attack", [&] { ac.validate(); });

  c.metrics.thresholds = get_doubles(doc, "metrics.thresholds");
  if (c.metrics.thresholds.empty()) throw ConfigError("metrics.thresholds", "need at least one threshold");
  for (double t : c.metrics.thresholds)
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("metrics.thresholds", "thresholds must lie in (0, 1)");
  c.metrics.confidence_gate = get_double(doc, "metrics.confidence_gate");
  if (!(c.metrics.confidence_gate >= 0.0 && c.metrics.confidence_gate <= 1.0))
    throw ConfigError("metrics.confidence_gate", "must lie in [0, 1]");
  c.metrics.grid_rows = static_cast<int>(get_int(doc, "metrics.grid_rows"));
  if (c.metrics.grid_rows < 1) throw ConfigError("metrics.grid_rows", "must be at least 1");

  c.defense.chains = get_strings(doc, "defense.chains");
  for (std::size_t i = 0; i < c.defense.chains.size(); ++i)
    checked("defense.chains[" + std::to_string(i) + "]", [&] { DefenseChain::parse(c.defense.chains[i]); });
  auto& adv = c.defense.adv_train;
  adv.epsilon = get_double(doc, "defense.adv_train.epsilon");
  adv.radius = get_optional_double(doc, "defense.adv_train.radius");
  adv.lr_initial = get_double(doc, "defense.adv_train.lr_initial");
  adv.lr_final = get_double(doc, "defense.adv_train.lr_final");
  adv.decay = parse_decay(get_string(doc, "defense.adv_train.decay"), "defense.adv_train.decay");
  adv.momentum = get_double(doc, "defense.adv_train.momentum");
  adv.threshold = get_double(doc, "defense.adv_train.threshold");
  adv.epochs = static_cast<int>(get_int(doc, "defense.adv_train.epochs"));
  adv.batch_size = static_cast<int>(get_int(doc, "defense.adv_train.batch_size"));
  adv.seed = c.seed;
  checked("defense.adv_train", [&] { adv.validate(); });

  auto& bb = c.blackbox;
  bb.teacher_architecture = get_string(doc, "blackbox.teacher_architecture");
  bb.student_architecture = get_string(doc, "blackbox.student_architecture");
  checked("blackbox.teacher_architecture", [&] { architecture(bb.teacher_architecture); });
  checked("blackbox.student_architecture", [&] { architecture(bb.student_architecture); });
  bb.allow_same_architecture = get_bool(doc, "blackbox.allow_same_architecture");
  if (!bb.allow_same_architecture && bb.teacher_architecture == bb.student_architecture)
    throw ConfigError("blackbox.student_architecture", "must differ from the teacher's unless allow_same_architecture");
  bb.teacher_train = parse_train(doc, "blackbox.teacher_train", c.seed);
  bb.student_train = parse_train(doc, "blackbox.student_train", c.seed);
  bb.pool_per_category = static_cast<int>(get_int(doc, "blackbox.pool_per_category"));
  if (bb.pool_per_category < 1) throw ConfigError("blackbox.pool_per_category", "must be positive");
  bb.pool_seed = get_u64(doc, "blackbox.pool_seed");
  bb.eta = get_optional_double(doc, "blackbox.eta");
  if (bb.eta && !(*bb.eta > 0.0)) throw ConfigError("blackbox.eta", "must be positive");
  return c;
}

std::string ExperimentConfig::hash() const {
  const std::string s = document.dump();
  return fnv1a_hex(s.data(), s.size());
}

}  // namespace singleadv
