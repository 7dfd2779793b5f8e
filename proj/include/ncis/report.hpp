#ifndef NCIS_REPORT_HPP
#define NCIS_REPORT_HPP

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncis/classifier.hpp"
#include "ncis/parallel.hpp"
#include "ncis/purifier.hpp"

namespace ncis {

struct EvalReport {
  double standard_accuracy = 0;
  double robust_accuracy = 0;
  double psr_clean = 0;
  double psr_adv = 0;
  // Top-k agreement between the clean image and the purified adversarial image.
  double prediction_accuracy = 0;
  double top1_agreement = 0;
  double topk_agreement = 0;
  std::size_t k = 5;
  std::size_t count = 0;
  std::string config;
  std::uint64_t seed = 0;
  double wall_seconds = 0;
};

struct TopkAgreement {
  double prediction_accuracy = 0;  // |clean ∩ purified| / k
  double top1 = 0;                 // purified top-1 == clean top-1
  double topk = 0;                 // clean top-1 within purified top-k
};

inline TopkAgreement topk_metrics(std::span<const int> clean_topk,
                                  std::span<const int> purified_topk, std::size_t k) {
  if (k == 0 || clean_topk.size() != k || purified_topk.size() != k)
    throw InvalidArgument("topk_metrics: both lists must have length k=" + std::to_string(k));
  std::size_t shared = 0;
  for (int c : clean_topk)
    shared += std::find(purified_topk.begin(), purified_topk.end(), c) != purified_topk.end();
  TopkAgreement m;
  m.prediction_accuracy = static_cast<double>(shared) / static_cast<double>(k);
  m.top1 = clean_topk.front() == purified_topk.front() ? 1.0 : 0.0;
  m.topk = std::find(purified_topk.begin(), purified_topk.end(), clean_topk.front()) !=
                   purified_topk.end()
               ? 1.0
               : 0.0;
  return m;
}

/// Scores a purifier on paired clean/adversarial images: accuracy of the
/// purified clean and adversarial copies, PSR of both against the clean
/// prediction, and top-k agreement of the purified adversarial copy.
inline EvalReport score(const Classifier<float>& model, const Purifier& purifier,
                        const Dataset& clean, std::span<const Image> adversarial,
                        std::size_t k = 5) {
  if (clean.empty()) throw InvalidArgument("score: empty dataset");
  if (clean.size() != adversarial.size())
    throw InvalidArgument("score: clean and adversarial sets differ in length");
  k = std::min(k, model.classes());
  struct Row {
    bool standard, robust, psr_clean, psr_adv;
    TopkAgreement agreement;
  };
  std::vector<Row> rows(clean.size());
  parallel_for(clean.size(), [&](std::size_t i) {
    const auto reference = model.predict(clean[i].image);
    const auto on_clean = model.predict(purifier(clean[i].image));
    const auto on_adv = model.predict(purifier(adversarial[i]));
    const int ref = argmax<float>(reference);
    const int pc = argmax<float>(on_clean), pa = argmax<float>(on_adv);
    rows[i] = Row{pc == clean[i].label, pa == clean[i].label, pc == ref, pa == ref,
                  topk_metrics(top_k<float>(reference, k), top_k<float>(on_adv, k), k)};
  });
  EvalReport r;
  r.k = k;
  r.count = clean.size();
  for (const Row& row : rows) {
    r.standard_accuracy += row.standard;
    r.robust_accuracy += row.robust;
    r.psr_clean += row.psr_clean;
    r.psr_adv += row.psr_adv;
    r.prediction_accuracy += row.agreement.prediction_accuracy;
    r.top1_agreement += row.agreement.top1;
    r.topk_agreement += row.agreement.topk;
  }
  const double n = static_cast<double>(rows.size());
  for (double* v : {&r.standard_accuracy, &r.robust_accuracy, &r.psr_clean, &r.psr_adv,
                    &r.prediction_accuracy, &r.top1_agreement, &r.topk_agreement})
    *v /= n;
  return r;
}

}  // namespace ncis

#endif  // NCIS_REPORT_HPP
