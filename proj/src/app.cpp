#include "singleadv/app.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "singleadv/attack.hpp"
#include "singleadv/blackbox.hpp"
#include "singleadv/datasets.hpp"
#include "singleadv/defenses.hpp"
#include "singleadv/experiment.hpp"
#include "singleadv/interpreters.hpp"
#include "singleadv/metrics.hpp"
#include "singleadv/raster.hpp"

namespace singleadv {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/default";
  std::string preset;
  std::vector<std::string> overrides;
  std::vector<std::string> inputs;
};

struct Context {
  ExperimentConfig cfg;
  fs::path root;
  DatasetSplits data;
  std::vector<std::string> names;
  std::string dataset_hash;
  std::string config_hash;
  int source = 0;
  int target = 1;
};

ExperimentConfig load_config(const CommonOptions& o) {
  Json doc = default_config_document();
  if (!o.preset.empty()) merge_config(doc, preset_document(o.preset));
  if (!o.config.empty()) merge_config(doc, read_config_file(o.config));
  for (const auto& ov : o.overrides) apply_override(doc, ov);
  if (o.seed) doc["seed"] = *o.seed;
  return parse_config(doc);
}

Context make_context(const CommonOptions& o) {
  Context c;
  c.cfg = load_config(o);
  c.root = o.out;
  const auto& ds = c.cfg.dataset;
  if (ds.kind == "synthetic") {
    c.data = generate_synthetic_shapes(ds.synthetic);
    const auto& all = synthetic_category_names();
    c.names.assign(all.begin(), all.begin() + ds.num_categories);
  } else {
    c.data = load_dataset_directory(ds.path, ds.num_categories);
    c.names = load_category_names(ds.path);
  }
  const std::string fp = dataset_fingerprint(c.data.train) + dataset_fingerprint(c.data.test);
  c.dataset_hash = fnv1a_hex(fp.data(), fp.size());
  c.config_hash = c.cfg.hash();
  c.source = resolve_category(c.cfg.attack.source, c.names, ds.num_categories, "attack.source");
  c.target = resolve_category(c.cfg.attack.target, c.names, ds.num_categories, "attack.target");
  if (c.source == c.target) throw ConfigError("attack.target", "must differ from attack.source");
  c.cfg.attack.config.source_category = c.source;
  c.cfg.attack.config.target_category = c.target;
  return c;
}

Json provenance(const Context& c) {
  return Json{{"config_hash", c.config_hash}, {"seed", c.cfg.seed}, {"dataset_hash", c.dataset_hash}};
}

std::vector<std::string> provenance_lines(const Context& c) {
  return {"config_hash=" + c.config_hash, "seed=" + std::to_string(c.cfg.seed), "dataset_hash=" + c.dataset_hash};
}

std::map<std::string, std::string> provenance_fields(const Context& c) {
  return {{"config_hash", c.config_hash}, {"seed", std::to_string(c.cfg.seed)}, {"dataset_hash", c.dataset_hash}};
}

fs::path claim_output(const Context& c, const std::string& sub) {
  const fs::path dir = c.root / sub;
  if (fs::exists(dir)) throw OutputExistsError(dir.string() + " already exists; outputs are write-once");
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void write_json(const fs::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

Json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return Json::parse(is);
}

void require_artifact(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) throw DependencyError(producer, path);
}

void check_dataset(const Context& c, const std::string& recorded, const fs::path& artifact) {
  if (recorded != c.dataset_hash)
    throw ProvenanceError(artifact.string() + " was produced from a different dataset (" + recorded + " vs " +
                          c.dataset_hash + ")");
}

Classifier load_trained(const Context& c) {
  const fs::path model = c.root / "train" / "model.bin";
  require_artifact(model, "train");
  ModelManifest m;
  Classifier h = load_checkpoint(model, &m);
  check_dataset(c, m.extra.count("dataset_hash") ? m.extra.at("dataset_hash") : "", model);
  return h;
}

Perturbation load_attack(const Context& c, PerturbationMetadata* meta) {
  const fs::path p = c.root / "attack" / "perturbation.sadv";
  require_artifact(p, "attack");
  Perturbation pert = load_perturbation(p, meta);
  check_dataset(c, meta->dataset_hash, p);
  return pert;
}

struct Pools {
  LabeledDataset source;
  LabeledDataset nonsource;
};

Pools pools_of(const Classifier& h, const LabeledDataset& data, int source, double gate) {
  const LabeledDataset kept = filter_confident(h, data, gate);
  Pools p{kept.filter_label(source), kept.exclude_label(source)};
  return p;
}

void require_pools(const Pools& p, const std::string& where) {
  if (p.source.empty())
    throw std::runtime_error(where + ": no source-category samples pass the confidence gate");
  if (p.nonsource.empty())
    throw std::runtime_error(where + ": no non-source samples pass the confidence gate");
}

Json trace_summary(const AttackTrace& t) {
  return Json{{"converged", t.converged},
              {"iterations", t.iterations},
              {"best_fooling_ratio", t.best_fooling_ratio},
              {"best_iteration", t.best_iteration},
              {"warnings", t.warnings}};
}

struct AttackOutcome {
  AttackResult result;
  std::optional<LambdaSearchResult> search;
};

AttackOutcome run_attack(const Context& c, const Classifier& h, const Pools& pools, std::optional<double> eta = {}) {
  AttackConfig ac = c.cfg.attack.config;
  if (eta) ac.eta = *eta;
  AttackOutcome o;
  if (!c.cfg.attack.lambda_grid.empty()) {
    o.search = select_lambda(h, pools.source, pools.nonsource, ac, c.cfg.attack.lambda_grid);
    ac.lambda = o.search->lambda;
  }
  o.result = generate_universal_perturbation(h, pools.source, pools.nonsource, ac);
  return o;
}

Json lambda_json(const AttackOutcome& o, double lambda) {
  Json j{{"lambda", lambda}};
  if (o.search) {
    j["candidates"] = o.search->candidates;
    j["candidate_iou"] = o.search->candidate_iou;
    j["candidate_converged"] = o.search->candidate_converged;
    j["reached_gamma"] = o.search->reached_gamma;
  }
  return j;
}

void save_attack(const Context& c, const fs::path& dir, const Classifier& h, const AttackOutcome& o,
                 const std::string& stem) {
  const auto& r = o.result;
  PerturbationMetadata meta;
  meta.eta = r.perturbation.eta;
  meta.source_category = r.perturbation.source_category;
  meta.target_category = r.perturbation.target_category;
  meta.seed = r.perturbation.seed;
  meta.model_fingerprint = h.fingerprint();
  meta.iterations = r.trace.iterations;
  meta.converged = r.trace.converged;
  meta.config_hash = c.config_hash;
  meta.dataset_hash = c.dataset_hash;
  save_perturbation(dir / (stem + ".sadv"), r.perturbation, meta);
  write_trace_csv(dir / (stem + "_trace.csv"), r.trace, provenance_lines(c));
}

// ---- train --------------------------------------------------------------

int cmd_train(const CommonOptions& o, std::ostream& out) {
  Context c = make_context(o);
  const fs::path dir = claim_output(c, "train");
  write_json(dir / "config.json", c.cfg.document);
  const Classifier h = train_classifier(c.data.train, architecture(c.cfg.model.architecture), c.cfg.model.train,
                                        &c.data.test);
  auto extra = provenance_fields(c);
  save_checkpoint(dir / "model.bin", h, extra);
  Json rep = provenance(c);
  rep["architecture"] = c.cfg.model.architecture;
  rep["parameters"] = parameter_count(h.arch(), h.input_shape(), h.num_categories());
  rep["held_out_accuracy"] = *h.held_out_accuracy;
  rep["fingerprint"] = h.fingerprint();
  write_json(dir / "train_report.json", rep);
  out << "trained " << c.cfg.model.architecture << ": held-out accuracy " << *h.held_out_accuracy << "\n";
  return kExitOk;
}

// ---- attack -------------------------------------------------------------

int cmd_attack(const CommonOptions& o, std::ostream& out) {
  Context c = make_context(o);
  const Classifier h = load_trained(c);
  if (fs::exists(c.root / "attack")) throw OutputExistsError((c.root / "attack").string() + " already exists; outputs are write-once");
  const Pools pools = pools_of(h, c.data.train, c.source, c.cfg.metrics.confidence_gate);
  require_pools(pools, "attack");
  const AttackOutcome ao = run_attack(c, h, pools);
  const fs::path dir = claim_output(c, "attack");
  write_json(dir / "config.json", c.cfg.document);
  save_attack(c, dir, h, ao, "perturbation");
  fs::rename(dir / "perturbation_trace.csv", dir / "trace.csv");
  Json s = provenance(c);
  s["source_category"] = c.source;
  s["target_category"] = c.target;
  s["interpreter"] = interpreter_name(c.cfg.attack.config.interpreter);
  s["eta"] = c.cfg.attack.config.eta;
  s["selection"] = lambda_json(ao, ao.search ? ao.search->lambda : c.cfg.attack.config.lambda);
  s["trace"] = trace_summary(ao.result.trace);
  s["source_pool"] = pools.source.size();
  s["nonsource_pool"] = pools.nonsource.size();
  write_json(dir / "attack_summary.json", s);
  out << "attack " << (ao.result.trace.converged ? "converged" : "did not converge") << " after "
      << ao.result.trace.iterations << " iterations (best validation fooling ratio "
      << ao.result.trace.best_fooling_ratio << ")\n";
  return kExitOk;
}

// ---- evaluate -----------------------------------------------------------

int cmd_evaluate(const CommonOptions& o, std::ostream& out) {
  Context c = make_context(o);
  const Classifier h = load_trained(c);
  PerturbationMetadata meta;
  const Perturbation p = load_attack(c, &meta);
  if (fs::exists(c.root / "evaluate")) throw OutputExistsError((c.root / "evaluate").string() + " already exists; outputs are write-once");
  const Pools pools = pools_of(h, c.data.test, p.source_category, c.cfg.metrics.confidence_gate);
  require_pools(pools, "evaluate");
  EvaluationOptions eo;
  eo.interpreter_options = c.cfg.attack.config.interpreter_options;
  eo.thresholds = c.cfg.metrics.thresholds;
  const auto kind = c.cfg.attack.config.interpreter;
  const EvaluationReport rep = evaluate(h, kind, p, pools.source, pools.nonsource, eo);

  const fs::path dir = claim_output(c, "evaluate");
  write_json(dir / "config.json", c.cfg.document);
  Json j = provenance(c);
  j.update(rep.to_json());
  write_json(dir / "report.json", j);
  std::string csv;
  for (const auto& line : provenance_lines(c)) csv += "# " + line + "\n";
  csv += EvaluationReport::csv_header() + "\n" + rep.csv_row() + "\n";
  write_text(dir / "report.csv", csv);

  std::vector<GridRow> rows;
  for (const auto& s : pools.source.samples) {
    if (static_cast<int>(rows.size()) >= c.cfg.metrics.grid_rows) break;
    GridRow r;
    r.benign_image = s.image;
    r.benign_label = s.label;
    r.benign_map = interpret(kind, h, s.image, s.label, eo.interpreter_options).values;
    r.adversarial_image = apply_perturbation(s.image, p);
    r.adversarial_label = predict(h, r.adversarial_image).label;
    r.adversarial_map = interpret(kind, h, r.adversarial_image, r.adversarial_label, eo.interpreter_options).values;
    rows.push_back(std::move(r));
  }
  emit_qualitative_grid(rows, dir / "grid.ppm", provenance_lines(c));
  out << "fooling ratio " << rep.fooling_ratio << ", leakage " << rep.leakage_rate << ", IoU "
      << (rep.iou_mean ? std::to_string(*rep.iou_mean) : std::string("n/a")) << "\n";
  return kExitOk;
}

// ---- defend -------------------------------------------------------------

int cmd_defend(const CommonOptions& o, std::ostream& out) {
  Context c = make_context(o);
  const Classifier h = load_trained(c);
  PerturbationMetadata meta;
  const Perturbation p = load_attack(c, &meta);
  if (fs::exists(c.root / "defend")) throw OutputExistsError((c.root / "defend").string() + " already exists; outputs are write-once");
  const double gate = c.cfg.metrics.confidence_gate;
  const Pools test = pools_of(h, c.data.test, p.source_category, gate);
  require_pools(test, "defend");

  Json rep = provenance(c);
  const double before = fooling_ratio(h, p.values, test.source, p.target_category);
  rep["fooling_ratio_undefended"] = before;
  Json chains = Json::array();
  std::string csv;
  for (const auto& line : provenance_lines(c)) csv += "# " + line + "\n";
  csv += "defense,fooling_before,fooling_after,relative_reduction,clean_accuracy\n";
  auto reduction = [](double b, double a) { return b > 0.0 ? (b - a) / b : 0.0; };
  std::ostringstream row;
  row.precision(17);
  for (const auto& text : c.cfg.defense.chains) {
    const DefenseChain chain = DefenseChain::parse(text, c.cfg.seed);
    const double after = defended_fooling_ratio(h, chain, p.values, test.source, p.target_category);
    const double acc = defended_accuracy(h, chain, c.data.test);
    chains.push_back({{"chain", chain.str()},
                      {"fooling_ratio", after},
                      {"relative_reduction", reduction(before, after)},
                      {"clean_accuracy", acc}});
    row << chain.str() << ',' << before << ',' << after << ',' << reduction(before, after) << ',' << acc << '\n';
  }
  rep["chains"] = chains;

  // Interpretation-masked adversarial training, then a fresh attack on the hardened model.
  const auto& adv = c.cfg.defense.adv_train;
  std::vector<Tensor> maps;
  maps.reserve(c.data.train.size());
  for (const auto& s : c.data.train.samples) maps.push_back(cam(h, s.image, s.label).values);
  Tensor init = p.values;
  for (double& v : init.data) v = -v;
  const AdvTrainResult hard = adversarial_train(h, c.data.train, maps, adv, &init);
  const double acc_before = accuracy(h, c.data.test), acc_after = accuracy(hard.model, c.data.test);
  const Pools hard_train = pools_of(hard.model, c.data.train, c.source, gate);
  const Pools hard_test = pools_of(hard.model, c.data.test, c.source, gate);
  require_pools(hard_train, "defend (hardened model)");
  require_pools(hard_test, "defend (hardened model)");
  const AttackOutcome re = run_attack(c, hard.model, hard_train);
  const double after = fooling_ratio(hard.model, re.result.perturbation.values, hard_test.source, c.target);
  rep["adversarial_training"] = {{"epsilon", adv.epsilon},
                                 {"radius", adv.projection_radius()},
                                 {"threshold", adv.threshold},
                                 {"epochs", adv.epochs},
                                 {"batch_size", adv.batch_size},
                                 {"clean_accuracy_before", acc_before},
                                 {"clean_accuracy_after", acc_after},
                                 {"fooling_ratio_before", before},
                                 {"fooling_ratio_after", after},
                                 {"relative_reduction", reduction(before, after)},
                                 {"final_delta_inf_norm", hard.delta.max_abs()},
                                 {"reattack", trace_summary(re.result.trace)}};
  row << "adversarial_training," << before << ',' << after << ',' << reduction(before, after) << ',' << acc_after
      << '\n';

  const fs::path dir = claim_output(c, "defend");
  write_json(dir / "config.json", c.cfg.document);
  auto extra = provenance_fields(c);
  std::ostringstream by;
  by << "adversarial_train(epsilon=" << adv.epsilon << ",threshold=" << adv.threshold << ",epochs=" << adv.epochs
     << ")";
  extra["hardened_by"] = by.str();
  save_checkpoint(dir / "hardened.bin", hard.model, extra);
  save_attack(c, dir, hard.model, re, "reattack");
  write_json(dir / "defense_report.json", rep);
  write_text(dir / "defense_report.csv", csv + row.str());
  out << "undefended fooling ratio " << before << "; hardened-model fooling ratio " << after << "\n";
  return kExitOk;
}

// ---- distill ------------------------------------------------------------

int cmd_distill(const CommonOptions& o, std::ostream& out) {
  Context c = make_context(o);
  if (fs::exists(c.root / "distill")) throw OutputExistsError((c.root / "distill").string() + " already exists; outputs are write-once");
  const auto& bb = c.cfg.blackbox;
  const double gate = c.cfg.metrics.confidence_gate;
  Classifier teacher_model = train_classifier(c.data.train, architecture(bb.teacher_architecture), bb.teacher_train);
  TeacherOracle teacher(std::move(teacher_model), bb.teacher_architecture);

  std::vector<Image> pool;
  if (c.cfg.dataset.kind == "synthetic") {
    SyntheticShapesConfig pc = c.cfg.dataset.synthetic;
    pc.seed = bb.pool_seed;
    pc.train_per_category = bb.pool_per_category;
    pc.test_per_category = 1;
    pool = images_of(generate_synthetic_shapes(pc).train);
  } else {
    pool = images_of(c.data.train);
  }
  const LabeledDataset labeled = label_with_teacher(teacher, pool);
  const std::uint64_t labeling_queries = teacher.query_count();
  const Classifier student =
      train_student(bb.student_architecture, labeled, bb.student_train, teacher, bb.allow_same_architecture);
  const double agreement = teacher_agreement(student, teacher, images_of(c.data.test));

  const Pools spools = pools_of(student, labeled, c.source, gate);
  require_pools(spools, "distill (student pool)");
  const AttackOutcome ao = run_attack(c, student, spools, bb.eta);
  const Perturbation& p = ao.result.perturbation;

  // Source test samples both models get right with confidence.
  const LabeledDataset src_test = c.data.test.filter_label(c.source);
  LabeledDataset common = filter_confident(student, src_test, gate);
  common = filter_confident(teacher, common, gate);
  if (common.empty()) throw std::runtime_error("distill: no source test samples pass both confidence gates");
  const double white = fooling_ratio(student, p.values, common, c.target);
  const double transfer = transfer_evaluate(teacher, p.values, common, c.target);

  const fs::path dir = claim_output(c, "distill");
  write_json(dir / "config.json", c.cfg.document);
  auto extra = provenance_fields(c);
  extra["teacher_architecture"] = bb.teacher_architecture;
  extra["teacher_agreement"] = std::to_string(agreement);
  save_checkpoint(dir / "student.bin", student, extra);
  save_attack(c, dir, student, ao, "student_perturbation");
  teacher.write_query_log(dir / "query_log.csv");
  Json rep = provenance(c);
  rep["teacher_architecture"] = bb.teacher_architecture;
  rep["student_architecture"] = bb.student_architecture;
  rep["pool_size"] = pool.size();
  rep["labeling_queries"] = labeling_queries;
  rep["total_queries"] = teacher.query_count();
  rep["teacher_agreement"] = agreement;
  rep["eta"] = p.eta;
  rep["source_category"] = c.source;
  rep["target_category"] = c.target;
  rep["evaluation_samples"] = common.size();
  rep["student_fooling_ratio"] = white;
  rep["transfer_fooling_ratio"] = transfer;
  rep["attack"] = trace_summary(ao.result.trace);
  write_json(dir / "transfer_report.json", rep);
  out << "student agreement " << agreement << "; white-box fooling " << white << "; transfer fooling " << transfer
      << "\n";
  return kExitOk;
}

// ---- report -------------------------------------------------------------

// White background, black polyline of `values` (each in [0, 1]) over a plot of h x w pixels.
Tensor line_plot(const std::vector<double>& values, int h, int w) {
  Tensor img({h, w}, 1.0);
  if (values.empty()) return img;
  auto px = [&](std::size_t i) {
    const double x = values.size() == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(values.size() - 1);
    return std::pair<double, double>{x * (w - 1), (1.0 - std::clamp(values[i], 0.0, 1.0)) * (h - 1)};
  };
  for (int y = 0; y < h; ++y) img[static_cast<std::size_t>(y) * w] = 0.5;
  for (int x = 0; x < w; ++x) img[static_cast<std::size_t>(h - 1) * w + x] = 0.5;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto [x0, y0] = px(i);
    const auto [x1, y1] = i + 1 < values.size() ? px(i + 1) : px(i);
    const int steps = std::max(1, static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))));
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
      const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
      img[static_cast<std::size_t>(y) * w + x] = 0.0;
    }
  }
  return img;
}

std::vector<double> trace_fooling(const fs::path& csv) {
  std::vector<double> v;
  std::ifstream is(csv);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("iteration", 0) == 0) continue;
    std::stringstream ss(line);
    std::string it, fr;
    std::getline(ss, it, ',');
    std::getline(ss, fr, ',');
    if (!fr.empty()) v.push_back(std::stod(fr));
  }
  return v;
}

int cmd_report(const CommonOptions& o, std::ostream& out) {
  std::vector<fs::path> runs;
  for (const auto& in : o.inputs) runs.emplace_back(in);
  if (runs.empty()) runs.emplace_back(o.out);
  const fs::path dest = fs::path(o.out) / "report";

  struct Found {
    fs::path path;
    Json doc;
  };
  std::vector<Found> evals, defends, distills;
  for (const auto& r : runs) {
    if (fs::exists(r / "evaluate" / "report.json")) evals.push_back({r, read_json(r / "evaluate" / "report.json")});
    if (fs::exists(r / "defend" / "defense_report.json"))
      defends.push_back({r, read_json(r / "defend" / "defense_report.json")});
    if (fs::exists(r / "distill" / "transfer_report.json"))
      distills.push_back({r, read_json(r / "distill" / "transfer_report.json")});
  }
  if (evals.empty()) throw DependencyError("evaluate", runs.front() / "evaluate" / "report.json");
  std::set<std::string> hashes;
  for (const auto* group : {&evals, &defends, &distills})
    for (const auto& f : *group) hashes.insert(f.doc.value("dataset_hash", std::string()));
  if (hashes.size() != 1)
    throw ProvenanceError("refusing to aggregate artifacts with mismatched dataset hashes");
  if (fs::exists(dest)) throw OutputExistsError(dest.string() + " already exists; outputs are write-once");
  fs::create_directories(dest);

  const std::string dataset_hash = *hashes.begin();
  Json summary{{"dataset_hash", dataset_hash}, {"runs", Json::array()}};
  std::ostringstream csv;
  csv.precision(17);
  csv << "# dataset_hash=" << dataset_hash << "\n";
  csv << "run,config_hash,seed,interpreter,source,target,fooling_ratio,leakage_rate,iou_mean,"
         "misclassification_confidence\n";
  std::vector<double> iou_curve;
  for (const auto& e : evals) {
    const auto& d = e.doc;
    Json entry{{"run", e.path.filename().string()},
               {"config_hash", d.at("config_hash")},
               {"seed", d.at("seed")},
               {"evaluation", d}};
    for (const auto& f : defends)
      if (f.path == e.path) entry["defense"] = f.doc;
    for (const auto& f : distills)
      if (f.path == e.path) entry["blackbox"] = f.doc;
    summary["runs"].push_back(entry);
    auto num = [](const Json& v) {
      std::ostringstream s;
      s.precision(17);
      if (!v.is_null()) s << v.get<double>();
      return s.str();
    };
    csv << e.path.filename().string() << ',' << d.at("config_hash").get<std::string>() << ','
        << d.at("seed").get<std::uint64_t>() << ',' << d.at("interpreter").get<std::string>() << ','
        << d.at("source_category").get<int>() << ',' << d.at("target_category").get<int>() << ','
        << num(d.at("fooling_ratio")) << ',' << num(d.at("leakage_rate")) << ',' << num(d.at("iou_mean")) << ','
        << num(d.at("misclassification_confidence")) << '\n';
    if (iou_curve.empty())
      for (const auto& v : d.at("iou_per_threshold")) iou_curve.push_back(v.get<double>());
  }
  write_json(dest / "summary.json", summary);
  write_text(dest / "summary.csv", csv.str());
  const std::vector<std::string> comments{"dataset_hash=" + dataset_hash};
  write_pgm(dest / "iou_per_threshold.pgm", line_plot(iou_curve, 64, 96), comments);
  const fs::path trace = runs.front() / "attack" / "trace.csv";
  if (fs::exists(trace)) write_pgm(dest / "fooling_trace.pgm", line_plot(trace_fooling(trace), 64, 96), comments);
  out << "aggregated " << evals.size() << " evaluation report(s) into " << dest.string() << "\n";
  return kExitOk;
}

void add_common(CLI::App* sub, CommonOptions& o, bool multi_input = false) {
  sub->add_option("--config", o.config, "JSON experiment config");
  sub->add_option("--seed", o.seed, "Global seed (overrides the config)");
  sub->add_option("--out", o.out, "Run directory")->capture_default_str();
  sub->add_option("--preset", o.preset, "Named preset layered under the config");
  sub->add_option("--override", o.overrides, "Dotted key=value override (repeatable)");
  if (multi_input) sub->add_option("--input", o.inputs, "Run directory to aggregate (repeatable)");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Single-class universal perturbations against interpretable classifiers"};
  app.name(args.empty() ? "singleadv" : fs::path(args[0]).filename().string());
  app.require_subcommand(1);
  CommonOptions o;
  std::string presets;
  for (const auto& n : preset_names()) presets += (presets.empty() ? "" : ", ") + n;
  struct Sub {
    const char* name;
    const char* help;
    int (*fn)(const CommonOptions&, std::ostream&);
  };
  const Sub subs[] = {
      {"train", "Train the classifier", cmd_train},
      {"attack", "Craft the universal perturbation", cmd_attack},
      {"evaluate", "Score the perturbation and emit the qualitative grid", cmd_evaluate},
      {"defend", "Preprocessing chains and interpretation-based adversarial training", cmd_defend},
      {"distill", "Teacher-student transfer attack", cmd_distill},
      {"report", "Aggregate prior artifacts", cmd_report},
  };
  std::map<const CLI::App*, int (*)(const CommonOptions&, std::ostream&)> handlers;
  for (const auto& s : subs) {
    auto* sub = app.add_subcommand(s.name, s.help);
    add_common(sub, o, std::string(s.name) == "report");
    sub->footer("Presets: " + presets);
    handlers[sub] = s.fn;
  }

  std::vector<std::string> rev(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    for (const auto& [sub, fn] : handlers)
      if (sub->parsed()) return fn(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DependencyError& e) {
    err << "dependency error: " << e.what() << "\n";
    return kExitDependency;
  } catch (const OutputExistsError& e) {
    err << "error: " << e.what() << "\n";
    return kExitOutputExists;
  } catch (const ProvenanceError& e) {
    err << "provenance error: " << e.what() << "\n";
    return kExitProvenance;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace singleadv
