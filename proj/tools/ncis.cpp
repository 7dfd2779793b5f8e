#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ncis/harness.hpp"

namespace fs = std::filesystem;
using namespace ncis;

namespace {

// Every flag a subcommand may expose. Flags only override the config when given.
struct Flags {
  std::string config, data, adversarial, model, purifier_checkpoint;
  std::uint64_t seed = 0;
  std::string out;
  double eps = 0, alpha = 0, sigma = 0;
  std::size_t iters = 0, count = 0, size = 0, classes = 0, channels = 0, epochs = 0, i = 0;
  std::size_t width = 0, depth = 0, window = 0, patches = 100;
  std::string norm, kind;
  bool targeted = false, bpda = false, dynamic = false, random_start = false;
  int target_class = 0, K = 0;
  std::size_t m = 0;
  std::vector<std::size_t> patch_sizes{5, 7, 9, 11};

  CLI::App* app = nullptr;
  bool given(const std::string& name) const {
    const CLI::Option* o = app->get_option_no_throw(name);
    return o && o->count() > 0;
  }
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON experiment config");
  sub->add_option("--seed", f.seed, "seed for every stochastic stage");
  sub->add_option("--out", f.out, "output directory");
}

void add_attack(CLI::App* sub, Flags& f) {
  sub->add_option("--eps", f.eps, "perturbation budget in [0,1] pixel units");
  sub->add_option("--alpha", f.alpha, "step size");
  sub->add_option("--iters", f.iters, "attack iterations");
  sub->add_option("--norm", f.norm, "linf or l2")->check(CLI::IsMember({"linf", "l2"}));
  sub->add_flag("--targeted", f.targeted, "targeted attack");
  sub->add_option("--target-class", f.target_class, "fixed target class");
  sub->add_flag("--random-start", f.random_start, "uniform random start inside the ball");
}

void add_purifier(CLI::App* sub, Flags& f) {
  sub->add_option("--kind", f.kind, "purifier kind")
      ->check(CLI::IsMember({"gs", "fbi", "fbie", "ncis", "identity"}));
  sub->add_option("--K", f.K, "Gaussian kernel size");
  sub->add_option("--m", f.m, "patch extension factor");
  sub->add_option("--i", f.i, "purification iterations (0 selects on the validation split)");
  sub->add_option("--purifier", f.purifier_checkpoint, "trained purifier checkpoint");
}

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig c = f.config.empty() ? ExperimentConfig{} : load_config(f.config);
  if (f.given("--seed")) apply_seed(c, f.seed);
  if (f.given("--out")) c.out = f.out;
  if (f.given("--eps")) c.attack.eps = f.eps;
  if (f.given("--alpha")) c.attack.alpha = f.alpha;
  if (f.given("--iters")) c.attack.iterations = f.iters;
  if (f.given("--norm")) c.attack.norm = parse_norm(f.norm);
  if (f.given("--targeted")) c.attack.targeted = f.targeted;
  if (f.given("--target-class")) c.attack.target_class = f.target_class;
  if (f.given("--random-start")) c.attack.random_start = f.random_start;
  if (f.given("--bpda")) c.bpda = f.bpda;
  if (f.given("--kind")) c.purifier.kind = parse_purifier_kind(f.kind);
  if (f.given("--K")) c.purifier.K = f.K;
  if (f.given("--m")) c.purifier.m = f.m;
  if (f.given("--i")) c.purifier.iterations = f.i;
  if (f.given("--purifier")) c.purifier.checkpoint = f.purifier_checkpoint;
  if (f.given("--model")) c.classifier_checkpoint = f.model;
  if (f.given("--count")) c.dataset.count = f.count;
  if (f.given("--size")) c.dataset.size = f.size;
  if (f.given("--classes")) c.dataset.classes = f.classes;
  if (f.given("--channels")) c.dataset.channels = f.channels;
  if (f.given("--epochs")) c.classifier.epochs = c.purifier_training.epochs = f.epochs;
  if (f.given("--width")) c.purifier_training.width = f.width;
  if (f.given("--depth")) c.purifier_training.depth = f.depth;
  if (f.given("--window")) c.purifier_training.window = f.window;
  if (f.given("--dynamic")) c.dynamic = f.dynamic;
  if (f.given("--sigma")) c.dynamic_sigma = f.sigma;
  return c;
}

// --data overrides the generated split with a saved dataset.
Dataset clean_set(const Flags& f, const ExperimentConfig& c, bool training) {
  if (!f.data.empty()) return load_dataset(f.data);
  const Split s = make_split(c);
  return training ? s.train : s.test;
}

Classifier<float> require_model(const ExperimentConfig& c) {
  if (c.classifier_checkpoint.empty()) throw InvalidArgument("a classifier checkpoint is required (--model)");
  return Classifier<float>(load_checkpoint<float>(c.classifier_checkpoint));
}

Purifier configured_purifier(const ExperimentConfig& c) {
  std::optional<LearnedPurifier> learned;
  if (is_learned(c.purifier.kind)) {
    if (c.purifier.checkpoint.empty())
      throw InvalidArgument("purifier '" + to_string(c.purifier.kind) + "' needs --purifier <checkpoint>");
    learned = load_learned(c.purifier);
  }
  return purifier_step(c.purifier, learned);
}

std::vector<Image> adversarial_set(const Flags& f, const Classifier<float>& model, const Dataset& clean,
                                   const ExperimentConfig& c) {
  if (!f.adversarial.empty()) {
    auto adv = unstack_all(load_tensor<float>(f.adversarial));
    if (adv.size() != clean.size())
      throw InvalidArgument("adversarial set has " + std::to_string(adv.size()) + " images, clean set " +
                            std::to_string(clean.size()));
    return adv;
  }
  return attack_dataset(model, clean, c.attack);
}

void print_table(const CsvTable& t) { std::cout << t.str(); }

int gen_data(const Flags& f) {
  const ExperimentConfig c = resolve(f);
  const Dataset data = generate_dataset(c.dataset);
  const fs::path out = c.out;
  save_dataset(out, data);
  for (std::size_t i = 0; i < std::min<std::size_t>(data.size(), 10); ++i)
    save_image(out / "preview" / ("image_" + std::to_string(i) + image_extension(data[i].image)),
               data[i].image);
  std::cout << "wrote " << data.size() << " images to " << out.string() << "\n";
  return 0;
}

int train_classifier_cmd(const Flags& f) {
  const ExperimentConfig c = resolve(f);
  Dataset train, held_out;
  if (!f.data.empty()) {
    train = load_dataset(f.data);
  } else {
    Split s = make_split(c);
    train = std::move(s.train);
    held_out = std::move(s.test);
  }
  const auto model = train_classifier(train, c.classifier);
  save_checkpoint(fs::path(c.out) / "classifier.nck", model.params());
  std::cout << "train_accuracy " << fixed6(model.info().train_accuracy) << "\n";
  if (!held_out.empty()) std::cout << "test_accuracy " << fixed6(accuracy(model, held_out)) << "\n";
  return 0;
}

int attack_cmd(const Flags& f) {
  const ExperimentConfig c = resolve(f);
  const auto model = require_model(c);
  const Dataset clean = clean_set(f, c, false);
  std::optional<Purifier> purifier;
  if (c.bpda) purifier = configured_purifier(c).with_iterations(std::max<std::size_t>(c.purifier.iterations, 1));
  const auto adv = attack_dataset(model, clean, c.attack, purifier ? &*purifier : nullptr);
  const fs::path out = c.out;
  std::vector<Image> residuals;
  for (std::size_t i = 0; i < adv.size(); ++i) residuals.push_back(residual(adv[i], clean[i].image).values);
  save_tensor(out / "adversarial.nct", stack<float>(adv));
  save_tensor(out / "residuals.nct", stack<float>(residuals));
  for (std::size_t i = 0; i < std::min<std::size_t>(adv.size(), 4); ++i)
    save_image(out / "samples" / ("attacked_" + std::to_string(i) + image_extension(adv[i])), adv[i]);
  const Purifier eval = purifier ? *purifier : identity_purifier();
  const EvalReport r = score(model, eval, clean, adv, c.k);
  CsvTable t({"clean_accuracy", "robust_accuracy"});
  t.row({fixed6(accuracy(model, clean)), fixed6(r.robust_accuracy)});
  t.save(out / "attack.csv");
  print_table(t);
  return 0;
}

int analyze_noise(const Flags& f) {
  const ExperimentConfig c = resolve(f);
  const Dataset clean = clean_set(f, c, false);
  std::vector<NoiseResidual> noises;
  if (f.adversarial.empty()) {
    const auto model = require_model(c);
    const auto adv = attack_dataset(model, clean, c.attack);
    for (std::size_t i = 0; i < adv.size(); ++i) noises.push_back(residual(adv[i], clean[i].image));
  } else {
    const auto adv = unstack_all(load_tensor<float>(f.adversarial));
    if (adv.size() != clean.size()) throw InvalidArgument("adversarial and clean sets differ in length");
    for (std::size_t i = 0; i < adv.size(); ++i) noises.push_back(residual(adv[i], clean[i].image));
  }
  const auto stats = noise_statistics(noises, f.patch_sizes, f.patches, c.seed, c.attack.eps);
  noise_statistics_table(stats).save(fs::path(c.out) / "noise_stats.csv");
  histogram_table(stats).save(fs::path(c.out) / "mean_histogram.csv");
  print_table(noise_statistics_table(stats));
  return 0;
}

int train_purifier_cmd(const Flags& f) {
  const ExperimentConfig c = resolve(f);
  if (!is_learned(c.purifier.kind)) throw InvalidArgument("--kind must be fbi, fbie or ncis");
  const Dataset train = clean_set(f, c, true);
  const std::size_t n = c.purifier_images ? std::min(c.purifier_images, train.size()) : train.size();
  const auto trained = train_purifier(images_of(slice(train, 0, n)), training_config(c));
  save_checkpoint(fs::path(c.out) / "purifier.nck", trained.model.net.params());
  CsvTable t({"epoch", "loss"});
  t.row({"0", fixed6(trained.initial_loss)});
  for (std::size_t e = 0; e < trained.epoch_loss.size(); ++e)
    t.row({std::to_string(e + 1), fixed6(trained.epoch_loss[e])});
  t.save(fs::path(c.out) / "purifier_loss.csv");
  print_table(t);
  return 0;
}

int select_iters(const Flags& f) {
  ExperimentConfig c = resolve(f);
  const auto model = require_model(c);
  Dataset val;
  if (!f.data.empty()) {
    val = load_dataset(f.data);
  } else {
    val = make_split(c).val;
  }
  const auto adv = adversarial_set(f, model, val, c);
  const std::size_t i_max = f.given("--i") && f.i > 0 ? f.i : c.i_max;
  const auto sel = select_iterations(configured_purifier(c), model, val, adv, i_max);
  sweep_table(sel.scores).save(fs::path(c.out) / "iterations.csv");
  print_table(sweep_table(sel.scores));
  std::cout << "selected " << sel.best << "\n";
  return 0;
}

int evaluate_cmd(const Flags& f) {
  const ExperimentConfig c = resolve(f);
  const auto result = run_experiment(c);
  print_table(report_table(std::span(&result.report, 1)));
  return 0;
}

int ablation_cmd(const Flags& f) {
  const ExperimentConfig c = resolve(f);
  const Split s = make_split(c);
  const auto model = obtain_classifier(c, s.train);
  const auto val_adv = attack_dataset(model, s.val, c.attack);
  const auto test_adv = attack_dataset(model, s.test, c.attack);
  const auto purifiers = ablation_purifiers(c, s.train);
  const auto rows = ablation_suite(model, purifiers, s.val, val_adv, s.test, test_adv, c.i_max);
  ablation_table(rows).save(fs::path(c.out) / "ablation.csv");
  print_table(ablation_table(rows));
  return 0;
}

int mse_curve_cmd(const Flags& f) {
  const ExperimentConfig c = resolve(f);
  const Dataset clean = clean_set(f, c, false);
  std::vector<Image> adv;
  if (f.adversarial.empty()) {
    adv = attack_dataset(require_model(c), clean, c.attack);
  } else {
    adv = adversarial_set(f, Classifier<float>{}, clean, c);
  }
  const std::size_t i_max = f.given("--i") && f.i > 0 ? f.i : c.curve_iterations;
  const auto curve = mse_curve(configured_purifier(c).step, images_of(clean), adv, i_max);
  mse_curve_table(curve).save(fs::path(c.out) / "mse_curve.csv");
  print_table(mse_curve_table(curve));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial purification experiments on a synthetic shape dataset"};
  app.require_subcommand(1);
  Flags f;
  f.app = &app;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen, f);
  gen->add_option("--count", f.count, "number of images");
  gen->add_option("--size", f.size, "image height and width");
  gen->add_option("--classes", f.classes, "number of classes");
  gen->add_option("--channels", f.channels, "1 or 3");

  auto* trc = app.add_subcommand("train-classifier", "train the target classifier");
  add_common(trc, f);
  trc->add_option("--data", f.data, "dataset directory from gen-data");
  trc->add_option("--epochs", f.epochs, "training epochs");

  auto* att = app.add_subcommand("attack", "generate adversarial examples");
  add_common(att, f);
  add_attack(att, f);
  add_purifier(att, f);
  att->add_option("--model", f.model, "classifier checkpoint");
  att->add_option("--data", f.data, "dataset directory");
  att->add_flag("--bpda", f.bpda, "attack through the purifier");

  auto* noise = app.add_subcommand("analyze-noise", "per-patch statistics of adversarial noise");
  add_common(noise, f);
  add_attack(noise, f);
  noise->add_option("--model", f.model, "classifier checkpoint (when --adv is absent)");
  noise->add_option("--data", f.data, "clean dataset directory");
  noise->add_option("--adv", f.adversarial, "adversarial images (NCT1, N x C x H x W)");
  noise->add_option("--patch-sizes", f.patch_sizes, "patch sizes");
  noise->add_option("--patches", f.patches, "patches per image");

  auto* trp = app.add_subcommand("train-purifier", "self-supervised purifier training");
  add_common(trp, f);
  add_purifier(trp, f);
  trp->add_option("--data", f.data, "dataset directory");
  trp->add_option("--epochs", f.epochs, "training epochs");
  trp->add_option("--width", f.width, "hidden channels");
  trp->add_option("--depth", f.depth, "convolution layers");
  trp->add_option("--window", f.window, "masked window size");

  auto* sel = app.add_subcommand("select-iters", "choose the purification iteration count");
  add_common(sel, f);
  add_attack(sel, f);
  add_purifier(sel, f);
  sel->add_option("--model", f.model, "classifier checkpoint");
  sel->add_option("--data", f.data, "validation dataset directory");
  sel->add_option("--adv", f.adversarial, "attacked validation images (NCT1)");

  auto* ev = app.add_subcommand("evaluate", "full pipeline with report");
  add_common(ev, f);
  add_attack(ev, f);
  add_purifier(ev, f);
  ev->add_option("--model", f.model, "classifier checkpoint (trained when absent)");
  ev->add_flag("--bpda", f.bpda, "attack through the purifier");
  ev->add_flag("--dynamic", f.dynamic, "noise before every purification");
  ev->add_option("--sigma", f.sigma, "dynamic inference noise level");

  auto* abl = app.add_subcommand("ablation", "compare the six purifier configurations");
  add_common(abl, f);
  add_attack(abl, f);
  abl->add_option("--model", f.model, "classifier checkpoint (trained when absent)");

  auto* mse = app.add_subcommand("mse-curve", "MSE to the clean image across iterations");
  add_common(mse, f);
  add_attack(mse, f);
  add_purifier(mse, f);
  mse->add_option("--model", f.model, "classifier checkpoint (when --adv is absent)");
  mse->add_option("--data", f.data, "clean dataset directory");
  mse->add_option("--adv", f.adversarial, "adversarial images (NCT1)");

  CLI11_PARSE(app, argc, argv);
  // Flags live on the chosen subcommand.
  for (CLI::App* sub : app.get_subcommands()) f.app = sub;

  try {
    if (*gen) return gen_data(f);
    if (*trc) return train_classifier_cmd(f);
    if (*att) return attack_cmd(f);
    if (*noise) return analyze_noise(f);
    if (*trp) return train_purifier_cmd(f);
    if (*sel) return select_iters(f);
    if (*ev) return evaluate_cmd(f);
    if (*abl) return ablation_cmd(f);
    if (*mse) return mse_curve_cmd(f);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
