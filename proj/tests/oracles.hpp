#pragma once

#include <algorithm>
#include <map>
#include <utility>
#include <vector>

#include "pcnn/classifier.hpp"
#include "pcnn/embedstore.hpp"
#include "pcnn/reranker.hpp"
#include "pcnn/rng.hpp"

namespace pcnn::testing {

// Always ranks the true class first, the rest by a per-record random order.
inline ProbabilityTable truthful(const EmbeddingStore& store, Split split, std::uint64_t seed) {
  std::vector<ClassifierOutput> rows;
  const std::size_t c = store.num_classes();
  for (const auto& r : store.records(split)) {
    Rng rng = Rng::stream(seed, static_cast<std::uint64_t>(r.id));
    ClassifierOutput o{r.id, std::vector<double>(c)};
    double z = 0.0;
    for (std::size_t k = 0; k < c; ++k) o.probs[k] = 0.1 + rng.uniform();
    o.probs[static_cast<std::size_t>(r.label)] = 0.0;
    for (double p : o.probs) z += p;
    o.probs[static_cast<std::size_t>(r.label)] = z;
    z += z;
    for (double& p : o.probs) p /= z;
    rows.push_back(o);
  }
  return ProbabilityTable(split, c, rows);
}

// Exhaustive kNN: full sort of the training split, majority vote, ties by
// higher mean score then lower class id.
inline ClassId brute_knn(const EmbeddingRecord& q, const EmbeddingStore& store,
                  const PairScorer& scorer, std::size_t k) {
  const auto qp = pooled(q);
  std::vector<std::pair<double, RecordId>> all;
  for (const auto& r : store.records(Split::Train)) {
    const auto p = pooled(r);
    double d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) d += (p[i] - qp[i]) * (p[i] - qp[i]);
    all.push_back({d, r.id});
  }
  std::sort(all.begin(), all.end());
  std::map<ClassId, std::vector<double>> votes;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& n = store.record(Split::Train, all[i].second);
    const EmbeddingRecord* ptr[] = {&n};
    votes[n.label].push_back(scorer.score(q, ptr)[0]);
  }
  ClassId best = -1;
  std::size_t best_n = 0;
  double best_mean = -1e300;
  for (const auto& [label, s] : votes) {
    double mean = 0.0;
    for (double v : s) mean += v;
    mean /= static_cast<double>(s.size());
    if (s.size() > best_n || (s.size() == best_n && mean > best_mean)) {
      best = label;
      best_n = s.size();
      best_mean = mean;
    }
  }
  return best;
}

}  // namespace pcnn::testing
