#include "pcnn/pairsampler.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "pcnn/error.hpp"
#include "pcnn/rng.hpp"

namespace pcnn {

std::string to_string(NegativeMode mode) {
  return mode == NegativeMode::HardTopQ ? "hard_topQ" : "random_class";
}

NegativeMode negative_mode_from_string(const std::string& name) {
  if (name == "hard_topQ") return NegativeMode::HardTopQ;
  if (name == "random_class") return NegativeMode::RandomClass;
  throw Error(ErrorKind::Configuration, "unknown negative mode '" + name + "'");
}

void SamplerConfig::validate() const {
  if (q < 2) throw Error(ErrorKind::Configuration, "sampler Q must be at least 2");
  if (nn_rank < 1) throw Error(ErrorKind::Configuration, "nn_rank must be at least 1");
}

std::size_t PairSet::positives() const {
  return static_cast<std::size_t>(std::count_if(
      pairs.begin(), pairs.end(), [](const PairSample& p) { return p.positive; }));
}

void PairSet::save_jsonl(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  for (const auto& p : pairs) {
    nlohmann::json j = {{"query", p.query},
                        {"query_split", to_string(query_split)},
                        {"neighbor", p.neighbor},
                        {"label", p.positive ? 1 : 0},
                        {"class", p.source_class},
                        {"rank", p.rank}};
    out << j.dump() << '\n';
  }
}

PairSet PairSet::load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  PairSet set;
  std::string line;
  bool first = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const Split split = split_from_string(j.at("query_split").get<std::string>());
      if (first) {
        set.query_split = split;
        first = false;
      } else if (split != set.query_split) {
        throw Error(ErrorKind::Validation, "mixed query splits");
      }
      set.pairs.push_back(PairSample{j.at("query").get<RecordId>(),
                                     j.at("neighbor").get<RecordId>(),
                                     j.at("label").get<int>() == 1,
                                     j.at("class").get<ClassId>(),
                                     j.at("rank").get<std::size_t>()});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Validation,
                  path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return set;
}

namespace {

void append_query_pairs(const EmbeddingRecord& query, const ClassifierOutput& output,
                        const ClassIndex& index, const SamplerConfig& config,
                        Split query_split, const EmbeddingStore& store,
                        std::vector<PairSample>& out) {
  const auto pooled_query = pooled(query);
  const ClassId truth = query.label;
  std::vector<RecordId> exclude;
  if (query_split == Split::Train) exclude.push_back(query.id);

  auto fail = [&](ClassId c, const Error& e) {
    throw Error(ErrorKind::InsufficientCandidates,
                "query " + std::to_string(query.id) + ": class " + std::to_string(c) +
                    " ('" + store.manifest().classes[static_cast<std::size_t>(c)] +
                    "') is too small: " + e.what());
  };

  std::vector<Neighbor> positives;
  try {
    positives = index.nearest_k_in_class(pooled_query, truth, config.q, exclude);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::InsufficientCandidates) throw;
    fail(truth, e);
  }
  for (std::size_t i = 0; i < positives.size(); ++i) {
    out.push_back(PairSample{query.id, positives[i].id, true, truth, i + 1});
  }

  const auto top = top_q(output, config.q);
  const bool truth_in_top =
      std::any_of(top.begin(), top.end(), [&](const ClassScore& s) { return s.label == truth; });
  const std::size_t negatives = truth_in_top ? config.q - 1 : config.q;

  std::vector<ClassId> negative_classes;
  if (config.negative_mode == NegativeMode::HardTopQ) {
    for (const auto& s : top) {
      if (s.label != truth) negative_classes.push_back(s.label);
    }
  } else {
    std::vector<ClassId> others;
    for (std::size_t c = 0; c < store.num_classes(); ++c) {
      if (static_cast<ClassId>(c) != truth) others.push_back(static_cast<ClassId>(c));
    }
    Rng rng = Rng::stream(config.seed, static_cast<std::uint64_t>(query.id) * 2 +
                                           (query_split == Split::Test ? 1 : 0));
    for (std::size_t j : rng.choose(others.size(), negatives)) {
      negative_classes.push_back(others[j]);
    }
  }
  for (ClassId c : negative_classes) {
    try {
      const Neighbor nn = index.nearest_in_class(pooled_query, c, config.nn_rank, exclude);
      out.push_back(PairSample{query.id, nn.id, false, c, config.nn_rank});
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::InsufficientCandidates) throw;
      fail(c, e);
    }
  }
}

}  // namespace

PairSet sample_pairs(Split query_split, const EmbeddingStore& store,
                     const ProbabilityTable& outputs, const ClassIndex& train_index,
                     const SamplerConfig& config) {
  config.validate();
  if (train_index.split() != Split::Train) {
    throw Error(ErrorKind::Usage, "pair neighbors must come from a training-split index");
  }
  if (outputs.split() != query_split) {
    throw Error(ErrorKind::Usage, "classifier outputs are for the " +
                                      to_string(outputs.split()) + " split, queries for " +
                                      to_string(query_split));
  }
  PairSet set;
  set.query_split = query_split;
  for (const auto& query : store.records(query_split)) {
    append_query_pairs(query, outputs.at(query.id), train_index, config, query_split,
                       store, set.pairs);
  }
  return set;
}

PairSet sample_train(const EmbeddingStore& store, const ProbabilityTable& outputs,
                     const ClassIndex& train_index, const SamplerConfig& config) {
  return sample_pairs(Split::Train, store, outputs, train_index, config);
}

PairSet sample_eval(const EmbeddingStore& store, const ProbabilityTable& outputs,
                    const ClassIndex& train_index, const SamplerConfig& config,
                    EvalSampleStats* stats) {
  PairSet raw = sample_pairs(Split::Test, store, outputs, train_index, config);
  EvalSampleStats local;
  local.generated = raw.size();

  PairSet set;
  set.query_split = Split::Test;
  for (const auto& p : raw.pairs) {
    const auto& a = store.record(Split::Test, p.query).grid;
    const auto& b = store.record(Split::Train, p.neighbor).grid;
    const bool identical =
        a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
    if (identical) {
      ++local.identical_removed;
      continue;
    }
    set.pairs.push_back(p);
  }

  const std::size_t pos = set.positives();
  const std::size_t neg = set.size() - pos;
  if (pos != neg) {
    const bool drop_positive = pos > neg;
    const std::size_t excess = drop_positive ? pos - neg : neg - pos;
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < set.pairs.size(); ++i) {
      if (set.pairs[i].positive == drop_positive) candidates.push_back(i);
    }
    Rng rng = Rng::stream(config.seed, 0xBA1A4CEull);
    std::vector<bool> drop(set.pairs.size(), false);
    for (std::size_t j : rng.choose(candidates.size(), excess)) drop[candidates[j]] = true;
    std::vector<PairSample> kept;
    kept.reserve(set.pairs.size() - excess);
    for (std::size_t i = 0; i < set.pairs.size(); ++i) {
      if (!drop[i]) kept.push_back(set.pairs[i]);
    }
    set.pairs = std::move(kept);
    local.balance_removed = excess;
  }
  if (stats) *stats = local;
  return set;
}

AuditReport pair_count_audit(const PairSet& pairs, const EmbeddingStore& store,
                             const ProbabilityTable& outputs,
                             std::span<const RecordId> queries, std::size_t q) {
  AuditReport report;
  report.actual = pairs.size();
  for (RecordId id : queries) {
    const ClassId truth = store.record(pairs.query_split, id).label;
    const auto top = top_q(outputs.at(id), q);
    const bool hit = std::any_of(top.begin(), top.end(),
                                 [&](const ClassScore& s) { return s.label == truth; });
    report.expected += hit ? 2 * q - 1 : 2 * q;
    (hit ? report.queries_with_truth_in_top_q : report.queries_missing_truth) += 1;
  }
  for (std::size_t i = 0; i < pairs.pairs.size(); ++i) {
    const auto& p = pairs.pairs[i];
    const auto& query = store.record(pairs.query_split, p.query);
    const auto& nn = store.record(Split::Train, p.neighbor);
    const std::string where = "pair " + std::to_string(i);
    if (pairs.query_split == Split::Train && p.query == p.neighbor) {
      report.violations.push_back(where + ": query paired with itself");
    }
    if (p.positive != (p.source_class == query.label)) {
      report.violations.push_back(where + ": label disagrees with source class");
    }
    if (nn.label != p.source_class) {
      report.violations.push_back(where + ": neighbor is not from the source class");
    }
  }
  if (report.expected != report.actual) {
    report.violations.push_back("expected " + std::to_string(report.expected) +
                                " pairs, found " + std::to_string(report.actual));
  }
  return report;
}

}  // namespace pcnn
