#include "pcnn/reranker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "pcnn/error.hpp"
#include "pcnn/rng.hpp"

namespace pcnn {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::size_t kShuffleBatch = 64;
}  // namespace

// ---------------------------------------------------------------------------
// Scorers

std::vector<double> ComparatorScorer::score(
    const EmbeddingRecord& query, std::span<const EmbeddingRecord* const> neighbors) const {
  std::vector<std::span<const float>> a(neighbors.size(), query.grid);
  std::vector<std::span<const float>> b;
  b.reserve(neighbors.size());
  for (const auto* n : neighbors) b.push_back(n->grid);
  return model_.score(a, b);
}

std::vector<double> OracleScorer::score(
    const EmbeddingRecord& query, std::span<const EmbeddingRecord* const> neighbors) const {
  std::vector<double> out;
  for (const auto* n : neighbors) out.push_back(n->label == query.label ? 1.0 : 0.0);
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> CosineScorer::score(
    const EmbeddingRecord& query, std::span<const EmbeddingRecord* const> neighbors) const {
  const auto q = pooled(query);
  std::vector<double> out;
  for (const auto* n : neighbors) out.push_back(cosine_similarity(q, pooled(*n)));
  return out;
}

// ---------------------------------------------------------------------------
// Config and serialization

std::string to_string(RerankMode mode) { return mode == RerankMode::Soft ? "soft" : "hard"; }

RerankMode rerank_mode_from_string(const std::string& name) {
  if (name == "soft") return RerankMode::Soft;
  if (name == "hard") return RerankMode::Hard;
  throw Error(ErrorKind::Configuration, "unknown rerank mode '" + name + "'");
}

void RerankConfig::validate() const {
  if (k < 1) throw Error(ErrorKind::Configuration, "K must be at least 1");
  if (n_neighbors < 1) throw Error(ErrorKind::Configuration, "n_neighbors must be at least 1");
  if (!(floor >= 0.0 && floor < 1.0)) {
    throw Error(ErrorKind::Configuration, "probability floor must be in [0, 1)");
  }
}

nlohmann::json RerankConfig::to_json() const {
  return {{"K", k}, {"n_neighbors", n_neighbors}, {"mode", to_string(mode)}, {"floor", floor}};
}

RerankConfig RerankConfig::from_json(const nlohmann::json& j) {
  RerankConfig c;
  c.k = j.value("K", c.k);
  c.n_neighbors = j.value("n_neighbors", c.n_neighbors);
  c.mode = rerank_mode_from_string(j.value("mode", to_string(c.mode)));
  c.floor = j.value("floor", c.floor);
  return c;
}

nlohmann::json RankedResult::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : classes) {
    rows.push_back({{"class", c.label},
                    {"c_rank", c.c_rank},
                    {"c_prob", c.c_prob},
                    {"s_score", c.s_score ? nlohmann::json(*c.s_score) : nlohmann::json()},
                    {"final", c.skipped() ? nlohmann::json() : nlohmann::json(c.final_score)},
                    {"skipped", c.skipped()},
                    {"neighbors", c.neighbors}});
  }
  return {{"query", query},
          {"split", to_string(split)},
          {"truth", truth},
          {"mode", to_string(mode)},
          {"predicted", predicted},
          {"comparator_queries", comparator_queries},
          {"classes", std::move(rows)}};
}

RankedResult RankedResult::from_json(const nlohmann::json& j) {
  try {
    RankedResult r;
    r.query = j.at("query").get<RecordId>();
    r.split = split_from_string(j.at("split").get<std::string>());
    r.truth = j.at("truth").get<ClassId>();
    r.mode = rerank_mode_from_string(j.at("mode").get<std::string>());
    r.predicted = j.at("predicted").get<ClassId>();
    r.comparator_queries = j.at("comparator_queries").get<std::size_t>();
    for (const auto& c : j.at("classes")) {
      ClassDecision d;
      d.label = c.at("class").get<ClassId>();
      d.c_rank = c.at("c_rank").get<std::size_t>();
      d.c_prob = c.at("c_prob").get<double>();
      if (!c.at("s_score").is_null()) d.s_score = c.at("s_score").get<double>();
      d.final_score = c.at("final").is_null() ? kNegInf : c.at("final").get<double>();
      d.neighbors = c.at("neighbors").get<std::vector<RecordId>>();
      r.classes.push_back(std::move(d));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Validation, std::string("malformed ranked result: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Re-ranking

Candidates score_candidates(const EmbeddingRecord& query, const ClassifierOutput& output,
                            const ClassIndex& train_index, const EmbeddingStore& store,
                            const PairScorer& scorer, const RerankConfig& config) {
  config.validate();
  const std::size_t k = std::min(config.k, output.probs.size());
  const auto top = top_q(output, k);
  const auto q = pooled(query);
  std::vector<RecordId> exclude;
  if (query.split == Split::Train) exclude.push_back(query.id);

  Candidates out{query.id, query.split, query.label, {}, 0};
  std::vector<const EmbeddingRecord*> batch;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < top.size(); ++i) {
    ClassDecision d;
    d.label = top[i].label;
    d.c_rank = i + 1;
    d.c_prob = top[i].prob;
    if (config.floor == 0.0 || d.c_prob >= config.floor) {
      const auto nns = train_index.nearest_k_in_class(q, d.label, config.n_neighbors, exclude);
      for (const auto& nn : nns) {
        d.neighbors.push_back(nn.id);
        batch.push_back(&store.record(Split::Train, nn.id));
        owner.push_back(i);
      }
      d.s_score = 0.0;
    }
    out.classes.push_back(std::move(d));
  }
  out.comparator_queries = batch.size();
  if (!batch.empty()) {
    const auto scores = scorer.score(query, batch);
    for (std::size_t j = 0; j < scores.size(); ++j) *out.classes[owner[j]].s_score += scores[j];
    for (auto& d : out.classes) {
      if (d.s_score) *d.s_score /= static_cast<double>(d.neighbors.size());
    }
  }
  return out;
}

RankedResult combine(const Candidates& candidates, RerankMode mode) {
  RankedResult r;
  r.query = candidates.query;
  r.split = candidates.split;
  r.truth = candidates.truth;
  r.mode = mode;
  r.comparator_queries = candidates.comparator_queries;
  r.classes = candidates.classes;
  for (auto& d : r.classes) {
    if (d.skipped()) {
      d.final_score = kNegInf;
    } else {
      d.final_score = mode == RerankMode::Soft ? d.c_prob * *d.s_score : *d.s_score;
    }
  }
  std::stable_sort(r.classes.begin(), r.classes.end(),
                   [](const ClassDecision& a, const ClassDecision& b) {
                     if (a.final_score != b.final_score) return a.final_score > b.final_score;
                     if (a.c_prob != b.c_prob) return a.c_prob > b.c_prob;
                     return a.label < b.label;
                   });
  r.predicted = r.classes.front().label;
  return r;
}

RankedResult rerank(const EmbeddingRecord& query, const ClassifierOutput& output,
                    const ClassIndex& train_index, const EmbeddingStore& store,
                    const PairScorer& scorer, const RerankConfig& config) {
  return combine(score_candidates(query, output, train_index, store, scorer, config),
                 config.mode);
}

nlohmann::json RerankReport::to_json() const {
  return {{"queries", queries},
          {"accuracy_c", accuracy_c},
          {"accuracy_c_then_s", accuracy_c_then_s},
          {"accuracy_c_times_s", accuracy_c_times_s},
          {"top_k_ceiling", top_k_ceiling},
          {"mean_comparator_queries", mean_comparator_queries}};
}

RerankReport evaluate_rerank(const EmbeddingStore& store, Split split,
                             const ProbabilityTable& outputs, const ClassIndex& train_index,
                             const PairScorer& scorer, const RerankConfig& config,
                             std::vector<RankedResult>* results) {
  config.validate();
  RerankReport report;
  std::size_t hit_c = 0, hit_hard = 0, hit_soft = 0, hit_ceiling = 0, issued = 0;
  for (const auto& query : store.records(split)) {
    const auto& output = outputs.at(query.id);
    const auto cand = score_candidates(query, output, train_index, store, scorer, config);
    const auto hard = combine(cand, RerankMode::Hard);
    const auto soft = combine(cand, RerankMode::Soft);
    hit_c += cand.classes.front().label == query.label;
    hit_hard += hard.predicted == query.label;
    hit_soft += soft.predicted == query.label;
    hit_ceiling += std::any_of(cand.classes.begin(), cand.classes.end(),
                               [&](const ClassDecision& d) { return d.label == query.label; });
    issued += cand.comparator_queries;
    ++report.queries;
    if (results) results->push_back(config.mode == RerankMode::Soft ? soft : hard);
  }
  if (report.queries) {
    const double n = static_cast<double>(report.queries);
    report.accuracy_c = static_cast<double>(hit_c) / n;
    report.accuracy_c_then_s = static_cast<double>(hit_hard) / n;
    report.accuracy_c_times_s = static_cast<double>(hit_soft) / n;
    report.top_k_ceiling = static_cast<double>(hit_ceiling) / n;
    report.mean_comparator_queries = static_cast<double>(issued) / n;
  }
  return report;
}

// ---------------------------------------------------------------------------
// kNN baseline

KnnResult knn_classify(const EmbeddingRecord& query, const ClassIndex& train_index,
                       const EmbeddingStore& store, const PairScorer& scorer, std::size_t k) {
  std::vector<RecordId> exclude;
  if (query.split == Split::Train) exclude.push_back(query.id);
  KnnResult r;
  r.neighbors = train_index.topk_global(pooled(query), k, exclude);
  std::vector<const EmbeddingRecord*> recs;
  for (const auto& n : r.neighbors) recs.push_back(&store.record(Split::Train, n.id));
  r.scores = scorer.score(query, recs);

  std::map<ClassId, std::pair<std::size_t, double>> tally;  // votes, score sum
  for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
    auto& t = tally[r.neighbors[i].label];
    t.first += 1;
    t.second += r.scores[i];
  }
  bool first = true;
  std::size_t best_votes = 0;
  double best_mean = 0.0;
  for (const auto& [label, t] : tally) {  // ascending class id
    const double mean = t.second / static_cast<double>(t.first);
    if (first || t.first > best_votes || (t.first == best_votes && mean > best_mean)) {
      r.label = label;
      best_votes = t.first;
      best_mean = mean;
      first = false;
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Sanity checks and ceiling

nlohmann::json SanityReport::to_json() const {
  return {{"queries", queries},
          {"self_rate", self_rate},
          {"random_values_rate", random_values_rate},
          {"shuffled_real_rate", shuffled_real_rate}};
}

SanityReport sanity_suite(const ComparatorModel& model, const EmbeddingStore& store,
                          Split split, std::uint64_t seed) {
  const auto records = store.records(split);
  SanityReport report;
  report.queries = records.size();
  if (records.empty()) return report;

  float lo = std::numeric_limits<float>::max(), hi = std::numeric_limits<float>::lowest();
  for (Split s : {Split::Train, Split::Test}) {
    for (const auto& r : store.records(s)) {
      for (float v : r.grid) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
  }

  std::vector<std::span<const float>> queries;
  for (const auto& r : records) queries.push_back(r.grid);

  auto rate_of = [&](std::span<const std::span<const float>> first,
                     std::span<const std::span<const float>> second) {
    const auto scores = model.score(first, second);
    const auto yes = std::count_if(scores.begin(), scores.end(), [](double s) { return s > 0.5; });
    return static_cast<double>(yes) / static_cast<double>(scores.size());
  };
  auto rate = [&](std::span<const std::span<const float>> second) { return rate_of(queries, second); };

  report.self_rate = rate(queries);

  const std::size_t per = store.tokens() * store.depth();
  std::vector<float> noise(records.size() * per);
  Rng rng = Rng::stream(seed, 0x5A417Eull);
  for (float& v : noise) v = static_cast<float>(rng.uniform(lo, hi));
  std::vector<std::span<const float>> random_grids;
  for (std::size_t i = 0; i < records.size(); ++i) {
    random_grids.push_back(std::span<const float>(noise).subspan(i * per, per));
  }
  report.random_values_rate = rate(random_grids);

  // Batches are drawn in loader order (a seeded permutation), then the
  // partners inside each batch are rotated by a Sattolo cycle so nobody keeps
  // its own grid.
  Rng shuffle_rng = Rng::stream(seed, 0x5B0FF1Eull);
  std::vector<std::size_t> order(queries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle_rng.shuffle(order);
  std::vector<std::span<const float>> batch_queries(queries.size()), shuffled(queries.size());
  for (std::size_t start = 0; start < order.size(); start += kShuffleBatch) {
    const std::size_t n = std::min(kShuffleBatch, order.size() - start);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng.below(i - 1));
      std::swap(perm[i - 1], perm[j]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      batch_queries[start + i] = queries[order[start + i]];
      shuffled[start + i] = queries[order[start + perm[i]]];
    }
  }
  report.shuffled_real_rate = rate_of(batch_queries, shuffled);
  return report;
}

std::vector<CeilingRow> topq_ceiling(const ProbabilityTable& outputs,
                                     const EmbeddingStore& store, std::size_t q_min,
                                     std::size_t q_max) {
  if (q_min < 1 || q_max < q_min || q_max > outputs.num_classes()) {
    throw Error(ErrorKind::Configuration, "ceiling range must satisfy 1 <= min <= max <= c");
  }
  std::vector<CeilingRow> rows;
  for (std::size_t q = q_min; q <= q_max; ++q) {
    rows.push_back(CeilingRow{q, topq_accuracy(outputs, store, q)});
  }
  return rows;
}

}  // namespace pcnn
