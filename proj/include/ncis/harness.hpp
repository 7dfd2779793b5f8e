#ifndef NCIS_HARNESS_HPP
#define NCIS_HARNESS_HPP

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ncis/analysis.hpp"
#include "ncis/attacks.hpp"
#include "ncis/classifier.hpp"
#include "ncis/csv.hpp"
#include "ncis/dataset.hpp"
#include "ncis/io.hpp"
#include "ncis/purifiers.hpp"
#include "ncis/report.hpp"
#include "ncis/smoothing.hpp"

namespace ncis {

using Json = nlohmann::json;

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out = "runs/default";

  DatasetSpec dataset;
  std::size_t train_count = 1600, val_count = 200, test_count = 200;

  std::string classifier_checkpoint;  // empty: train
  ClassifierTrainConfig classifier;

  PurifierConfig purifier;             // iterations = 0: select on the validation split
  PurifierTrainConfig purifier_training;
  std::size_t purifier_images = 0;     // 0: the whole training split
  std::size_t i_max = 10;

  AttackConfig attack;
  bool bpda = false;

  std::size_t k = 5;
  bool dynamic = false;
  double dynamic_sigma = kDynamicSigma;
  std::size_t samples = 4;
  std::size_t curve_iterations = 10;
};

/// Points every stage seed at `seed`.
inline void apply_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.classifier.seed = seed;
  cfg.purifier_training.seed = seed;
  cfg.attack.seed = seed;
}

namespace detail {

inline void check_keys(const Json& j, const char* section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw InvalidArgument(std::string("config: '") + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : keys) known = known || key == k;
    if (!known) throw InvalidArgument(std::string("config: unknown key '") + key + "' in " + section);
  }
}

template <typename V>
void read(const Json& j, const char* key, V& into) {
  if (j.contains(key)) into = j.at(key).get<V>();
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
  using detail::read;
  ExperimentConfig c;
  detail::check_keys(j, "config", {"seed", "out", "dataset", "classifier", "purifier", "attack",
                                   "evaluation"});
  if (j.contains("seed")) apply_seed(c, j.at("seed").get<std::uint64_t>());
  read(j, "out", c.out);
  if (j.contains("dataset")) {
    const Json& d = j.at("dataset");
    detail::check_keys(d, "dataset", {"seed", "count", "classes", "size", "channels", "train", "val", "test"});
    read(d, "seed", c.dataset.seed);
    read(d, "count", c.dataset.count);
    read(d, "classes", c.dataset.classes);
    read(d, "size", c.dataset.size);
    read(d, "channels", c.dataset.channels);
    read(d, "train", c.train_count);
    read(d, "val", c.val_count);
    read(d, "test", c.test_count);
  }
  if (j.contains("classifier")) {
    const Json& m = j.at("classifier");
    detail::check_keys(m, "classifier", {"checkpoint", "epochs", "lr", "batch", "seed"});
    read(m, "checkpoint", c.classifier_checkpoint);
    read(m, "epochs", c.classifier.epochs);
    read(m, "lr", c.classifier.lr);
    read(m, "batch", c.classifier.batch);
    read(m, "seed", c.classifier.seed);
  }
  if (j.contains("purifier")) {
    const Json& p = j.at("purifier");
    detail::check_keys(p, "purifier", {"kind", "K", "m", "iterations", "i_max", "checkpoint", "with_gs",
                                       "epochs", "lr", "batch", "width", "depth", "window", "images",
                                       "seed"});
    if (p.contains("kind")) c.purifier.kind = parse_purifier_kind(p.at("kind").get<std::string>());
    read(p, "K", c.purifier.K);
    read(p, "m", c.purifier.m);
    read(p, "iterations", c.purifier.iterations);
    read(p, "i_max", c.i_max);
    read(p, "checkpoint", c.purifier.checkpoint);
    read(p, "with_gs", c.purifier.with_gs);
    read(p, "epochs", c.purifier_training.epochs);
    read(p, "lr", c.purifier_training.lr);
    read(p, "batch", c.purifier_training.batch);
    read(p, "width", c.purifier_training.width);
    read(p, "depth", c.purifier_training.depth);
    read(p, "window", c.purifier_training.window);
    read(p, "images", c.purifier_images);
    read(p, "seed", c.purifier_training.seed);
  }
  if (j.contains("attack")) {
    const Json& a = j.at("attack");
    detail::check_keys(a, "attack", {"norm", "eps", "alpha", "iterations", "targeted", "target_class",
                                     "random_start", "seed", "bpda"});
    if (a.contains("norm")) c.attack.norm = parse_norm(a.at("norm").get<std::string>());
    read(a, "eps", c.attack.eps);
    read(a, "alpha", c.attack.alpha);
    read(a, "iterations", c.attack.iterations);
    read(a, "targeted", c.attack.targeted);
    if (a.contains("target_class") && !a.at("target_class").is_null())
      c.attack.target_class = a.at("target_class").get<int>();
    read(a, "random_start", c.attack.random_start);
    read(a, "seed", c.attack.seed);
    read(a, "bpda", c.bpda);
  }
  if (j.contains("evaluation")) {
    const Json& e = j.at("evaluation");
    detail::check_keys(e, "evaluation", {"k", "dynamic", "dynamic_sigma", "samples", "curve_iterations"});
    read(e, "k", c.k);
    read(e, "dynamic", c.dynamic);
    read(e, "dynamic_sigma", c.dynamic_sigma);
    read(e, "samples", c.samples);
    read(e, "curve_iterations", c.curve_iterations);
  }
  return c;
}

inline Json config_to_json(const ExperimentConfig& c) {
  Json target = c.attack.target_class ? Json(*c.attack.target_class) : Json(nullptr);
  return Json{
      {"seed", c.seed},
      {"out", c.out},
      {"dataset",
       {{"seed", c.dataset.seed}, {"count", c.dataset.count}, {"classes", c.dataset.classes},
        {"size", c.dataset.size}, {"channels", c.dataset.channels}, {"train", c.train_count},
        {"val", c.val_count}, {"test", c.test_count}}},
      {"classifier",
       {{"checkpoint", c.classifier_checkpoint}, {"epochs", c.classifier.epochs},
        {"lr", c.classifier.lr}, {"batch", c.classifier.batch}, {"seed", c.classifier.seed}}},
      {"purifier",
       {{"kind", to_string(c.purifier.kind)}, {"K", c.purifier.K}, {"m", c.purifier.m},
        {"iterations", c.purifier.iterations}, {"i_max", c.i_max},
        {"checkpoint", c.purifier.checkpoint}, {"with_gs", c.purifier.with_gs},
        {"epochs", c.purifier_training.epochs}, {"lr", c.purifier_training.lr},
        {"batch", c.purifier_training.batch}, {"width", c.purifier_training.width},
        {"depth", c.purifier_training.depth}, {"window", c.purifier_training.window},
        {"images", c.purifier_images}, {"seed", c.purifier_training.seed}}},
      {"attack",
       {{"norm", to_string(c.attack.norm)}, {"eps", c.attack.eps}, {"alpha", c.attack.alpha},
        {"iterations", c.attack.iterations}, {"targeted", c.attack.targeted},
        {"target_class", target}, {"random_start", c.attack.random_start},
        {"seed", c.attack.seed}, {"bpda", c.bpda}}},
      {"evaluation",
       {{"k", c.k}, {"dynamic", c.dynamic}, {"dynamic_sigma", c.dynamic_sigma},
        {"samples", c.samples}, {"curve_iterations", c.curve_iterations}}}};
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  try {
    return config_from_json(Json::parse(bytes.begin(), bytes.end()));
  } catch (const Json::exception& e) {
    throw FormatError("config " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset and adversarial-set files

inline void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  if (data.empty()) throw InvalidArgument("save_dataset: empty dataset");
  save_tensor(dir / "images.nct", stack<float>(images_of(data)));
  CsvTable labels({"index", "label"});
  for (std::size_t i = 0; i < data.size(); ++i)
    labels.row({std::to_string(i), std::to_string(data[i].label)});
  labels.save(dir / "labels.csv");
}

inline std::vector<Image> unstack_all(const Tensor<float>& batch) {
  std::vector<Image> out;
  for (std::size_t n = 0; n < batch.dim(0); ++n) out.push_back(unstack_one(batch, n));
  return out;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  const auto images = unstack_all(load_tensor<float>(dir / "images.nct"));
  const Bytes text = read_file(dir / "labels.csv");
  Dataset out;
  std::size_t line_start = 0, line_no = 0;
  const std::string s(text.begin(), text.end());
  while (line_start < s.size()) {
    std::size_t end = s.find('\n', line_start);
    if (end == std::string::npos) end = s.size();
    const std::string line = s.substr(line_start, end - line_start);
    line_start = end + 1;
    if (line_no++ == 0 || line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("labels.csv: malformed line '" + line + "'");
    const std::size_t index = std::stoul(line.substr(0, comma));
    if (index != out.size() || index >= images.size())
      throw FormatError("labels.csv: unexpected index " + std::to_string(index));
    out.push_back({images[index], std::stoi(line.substr(comma + 1))});
  }
  if (out.size() != images.size())
    throw FormatError("labels.csv lists " + std::to_string(out.size()) + " labels for " +
                      std::to_string(images.size()) + " images");
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline stages

struct Split {
  Dataset train, val, test;
};

inline Split make_split(const ExperimentConfig& cfg) {
  if (cfg.train_count + cfg.val_count + cfg.test_count > cfg.dataset.count)
    throw InvalidArgument("config: train + val + test exceeds dataset count");
  if (cfg.train_count == 0 || cfg.test_count == 0)
    throw InvalidArgument("config: train and test splits must be nonempty");
  const Dataset all = generate_dataset(cfg.dataset);
  const std::size_t a = cfg.train_count, b = a + cfg.val_count;
  return {slice(all, 0, a), slice(all, a, b), slice(all, b, b + cfg.test_count)};
}

inline Classifier<float> obtain_classifier(const ExperimentConfig& cfg, const Dataset& train) {
  if (!cfg.classifier_checkpoint.empty())
    return Classifier<float>(load_checkpoint<float>(cfg.classifier_checkpoint));
  return train_classifier(train, cfg.classifier);
}

inline PurifierTrainConfig training_config(const ExperimentConfig& cfg) {
  PurifierTrainConfig t = cfg.purifier_training;
  t.kind = cfg.purifier.kind;
  t.m = cfg.purifier.m;
  t.K = cfg.purifier.K;
  t.with_gs = cfg.purifier.with_gs;
  return t;
}

inline LearnedPurifier train_learned(const ExperimentConfig& cfg, const Dataset& train) {
  const std::size_t n = cfg.purifier_images ? std::min(cfg.purifier_images, train.size()) : train.size();
  return train_purifier(images_of(slice(train, 0, n)), training_config(cfg)).model;
}

/// Rebuilds a learned purifier from a checkpoint saved by `save_learned`.
inline LearnedPurifier load_learned(const PurifierConfig& pc) {
  LearnedPurifier p{BsnNetwork<float>(load_checkpoint<float>(pc.checkpoint)), pc.extension(),
                    std::nullopt};
  if (pc.has_gs_branch()) p.gs_branch = gaussian_kernel(pc.K);
  return p;
}

inline Purifier purifier_step(const PurifierConfig& pc, const std::optional<LearnedPurifier>& learned) {
  if (pc.kind == PurifierKind::identity) return identity_purifier();
  if (pc.kind == PurifierKind::gs) return gs_purifier(pc.K, 1);
  if (!learned) throw InvalidArgument("purifier '" + to_string(pc.kind) + "' needs trained weights");
  std::string name = to_string(pc.kind);
  if (pc.kind == PurifierKind::fbi && pc.with_gs) name = "fbi+gs";
  return make_purifier(*learned, name, 1);
}

/// Attacks every clean image (purifier-blind PGD, or BPDA through
/// `purifier`) and scores the purified clean and attacked copies.
inline EvalReport evaluate(const Classifier<float>& model, const Purifier& purifier,
                           const Dataset& clean, const AttackConfig& attack, std::size_t k = 5,
                           bool bpda = false) {
  const auto start = std::chrono::steady_clock::now();
  const auto adversarial = attack_dataset(model, clean, attack, bpda ? &purifier : nullptr);
  EvalReport r = score(model, purifier, clean, adversarial, k);
  r.seed = attack.seed;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

inline CsvTable report_table(std::span<const EvalReport> reports) {
  CsvTable t({"config", "seed", "count", "k", "standard_accuracy", "robust_accuracy", "psr_clean",
              "psr_adv", "prediction_accuracy", "top1_agreement", "topk_agreement"});
  for (const auto& r : reports)
    t.row({r.config, std::to_string(r.seed), std::to_string(r.count), std::to_string(r.k),
           fixed6(r.standard_accuracy), fixed6(r.robust_accuracy), fixed6(r.psr_clean),
           fixed6(r.psr_adv), fixed6(r.prediction_accuracy), fixed6(r.top1_agreement),
           fixed6(r.topk_agreement)});
  return t;
}

inline Json report_json(const EvalReport& r, const ExperimentConfig& cfg) {
  return Json{{"standard_accuracy", r.standard_accuracy},
              {"robust_accuracy", r.robust_accuracy},
              {"psr_clean", r.psr_clean},
              {"psr_adv", r.psr_adv},
              {"prediction_accuracy", r.prediction_accuracy},
              {"top1_agreement", r.top1_agreement},
              {"topk_agreement", r.topk_agreement},
              {"k", r.k},
              {"count", r.count},
              {"purifier", r.config},
              {"seed", r.seed},
              {"wall_seconds", r.wall_seconds},
              {"config", config_to_json(cfg)}};
}

inline void save_text(const std::filesystem::path& path, const std::string& s) {
  write_file(path, Bytes(s.begin(), s.end()));
}

inline CsvTable sweep_table(std::span<const IterationScore> scores) {
  CsvTable t({"i", "standard_accuracy", "robust_accuracy", "average"});
  for (const auto& s : scores)
    t.row({std::to_string(s.iterations), fixed6(s.standard_accuracy), fixed6(s.robust_accuracy),
           fixed6(s.average())});
  return t;
}

struct ExperimentResult {
  EvalReport report;
  std::size_t iterations = 0;
  std::vector<IterationScore> sweep;
};

/// Full pipeline: data, classifier, purifier, iteration choice, attack,
/// metrics. Writes classifier/purifier checkpoints, report.csv/.json,
/// iterations.csv, mse_curve.csv and sample images under cfg.out.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const std::filesystem::path out = cfg.out;
  std::filesystem::create_directories(out);
  const Split split = make_split(cfg);
  const Classifier<float> model = obtain_classifier(cfg, split.train);
  save_checkpoint(out / "classifier.nck", model.params());

  std::optional<LearnedPurifier> learned;
  if (is_learned(cfg.purifier.kind)) {
    learned = cfg.purifier.checkpoint.empty() ? train_learned(cfg, split.train)
                                              : load_learned(cfg.purifier);
    save_checkpoint(out / "purifier.nck", learned->net.params());
  }
  Purifier purifier = purifier_step(cfg.purifier, learned);

  ExperimentResult result;
  result.iterations = cfg.purifier.iterations;
  if (cfg.purifier.kind == PurifierKind::identity) {
    result.iterations = 0;
  } else if (result.iterations == 0) {
    if (split.val.empty()) throw InvalidArgument("config: iteration selection needs a validation split");
    const auto attacked_val = attack_dataset(model, split.val, cfg.attack);
    auto sel = cfg.dynamic ? select_dynamic_iterations(purifier, model, split.val, attacked_val, cfg.i_max,
                                                       cfg.dynamic_sigma, kDynamicClip,
                                                       derive_seed(cfg.seed, 0xD1))
                           : select_iterations(purifier, model, split.val, attacked_val, cfg.i_max);
    result.iterations = sel.best;
    result.sweep = std::move(sel.scores);
    sweep_table(result.sweep).save(out / "iterations.csv");
  }
  purifier = purifier.with_iterations(result.iterations);
  if (cfg.dynamic)
    purifier = dynamic_purifier(purifier, cfg.dynamic_sigma, kDynamicClip, derive_seed(cfg.seed, 0xD1));

  const auto start = std::chrono::steady_clock::now();
  const auto adversarial =
      attack_dataset(model, split.test, cfg.attack, cfg.bpda ? &purifier : nullptr);
  result.report = score(model, purifier, split.test, adversarial, cfg.k);
  result.report.seed = cfg.seed;
  result.report.config = purifier.name + "@" + std::to_string(result.iterations);
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  report_table(std::span(&result.report, 1)).save(out / "report.csv");
  save_text(out / "report.json", report_json(result.report, cfg).dump(2) + "\n");

  const auto clean_images = images_of(split.test);
  const std::size_t curve_n = std::min<std::size_t>(clean_images.size(), 50);
  if (cfg.curve_iterations > 0)
    mse_curve_table(mse_curve(purifier.step, std::span(clean_images).first(curve_n),
                              std::span(adversarial).first(curve_n), cfg.curve_iterations))
        .save(out / "mse_curve.csv");
  for (std::size_t i = 0; i < std::min(cfg.samples, clean_images.size()); ++i) {
    const std::string n = (i < 10 ? "0" : "") + std::to_string(i);
    save_image(out / "samples" / ("clean_" + n + image_extension(clean_images[i])), clean_images[i]);
    save_image(out / "samples" / ("attacked_" + n + image_extension(adversarial[i])), adversarial[i]);
    save_image(out / "samples" / ("purified_" + n + image_extension(adversarial[i])),
               purifier(adversarial[i]));
  }
  return result;
}

inline ExperimentResult run_experiment(const std::filesystem::path& config_path) {
  return run_experiment(load_config(config_path));
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string name;
  std::size_t iterations = 0;
  double standard_accuracy = 0;
  double robust_accuracy = 0;
  double seconds_per_image = 0;
};

/// Sequential wall time of one full purification, averaged over images.
inline double seconds_per_image(const Purifier& purifier, std::span<const Image> images) {
  if (images.empty()) return 0;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& x : images) {
    volatile float sink = purifier(x)[0];
    (void)sink;
  }
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() /
         static_cast<double>(images.size());
}

/// One row per purifier, all at the iteration count selected on the
/// validation pair for the first (reference) row. Accuracy is measured on the
/// test pair and per-image time on up to `timing_images` images.
inline std::vector<AblationRow> ablation_suite(const Classifier<float>& model,
                                               std::span<const Purifier> purifiers,
                                               const Dataset& val, std::span<const Image> val_attacked,
                                               const Dataset& test, std::span<const Image> test_attacked,
                                               std::size_t i_max, std::size_t timing_images = 20) {
  if (purifiers.empty()) throw InvalidArgument("ablation_suite: no purifiers");
  const std::size_t shared = select_iterations(purifiers.front(), model, val, val_attacked, i_max).best;
  std::vector<AblationRow> rows;
  const auto timing = images_of(slice(test, 0, timing_images));
  for (const Purifier& p : purifiers) {
    const Purifier chosen = p.with_iterations(shared);
    const EvalReport r = score(model, chosen, test, test_attacked);
    rows.push_back({p.name, shared, r.standard_accuracy, r.robust_accuracy,
                    seconds_per_image(chosen, timing)});
  }
  return rows;
}

inline CsvTable ablation_table(std::span<const AblationRow> rows) {
  CsvTable t({"configuration", "iterations", "standard_accuracy", "robust_accuracy",
              "seconds_per_image"});
  for (const auto& r : rows)
    t.row({r.name, std::to_string(r.iterations), fixed6(r.standard_accuracy),
           fixed6(r.robust_accuracy), fixed6(r.seconds_per_image)});
  return t;
}

/// The six configurations compared in the ablation: NCIS, FBI-E, FBI with a
/// GS branch, FBI, GS(5) and GS(11). Learned rows are trained with
/// cfg.purifier_training on the training split.
inline std::vector<Purifier> ablation_purifiers(const ExperimentConfig& cfg, const Dataset& train) {
  std::vector<Purifier> out;
  auto learned = [&](PurifierKind kind, bool with_gs) {
    ExperimentConfig c = cfg;
    c.purifier.kind = kind;
    c.purifier.with_gs = with_gs;
    c.purifier.checkpoint.clear();
    return purifier_step(c.purifier, train_learned(c, train));
  };
  out.push_back(learned(PurifierKind::ncis, false));
  out.push_back(learned(PurifierKind::fbie, false));
  out.push_back(learned(PurifierKind::fbi, true));
  out.push_back(learned(PurifierKind::fbi, false));
  out.push_back(gs_purifier(5));
  out.push_back(gs_purifier(11));
  return out;
}

}  // namespace ncis

#endif  // NCIS_HARNESS_HPP
