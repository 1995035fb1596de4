#include "pcnn/comparator.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_map>

#include "pcnn/error.hpp"
#include "pcnn/rng.hpp"

namespace pcnn {

namespace {
constexpr const char* kCheckpointFormat = "pcnn.comparator.v1";
constexpr std::size_t kEvalBatch = 256;

std::string attn_prefix(const char* kind, std::size_t block, std::size_t layer) {
  return std::string(kind) + "." + std::to_string(block) + "." + std::to_string(layer);
}

constexpr const char* kAttnSuffixes[] = {"wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"};
}  // namespace

// ---------------------------------------------------------------------------
// Configs

void ComparatorConfig::validate() const {
  if (depth == 0 || tokens == 0) {
    throw Error(ErrorKind::Configuration, "comparator depth and tokens must be positive");
  }
  if (blocks > 0 && (heads == 0 || depth % heads != 0)) {
    throw Error(ErrorKind::Configuration, "comparator depth " + std::to_string(depth) +
                                              " is not divisible by " +
                                              std::to_string(heads) + " heads");
  }
  if (mlp_width == 0 || mlp_hidden == 0) {
    throw Error(ErrorKind::Configuration, "MLP widths must be positive");
  }
  if (!(jitter >= 0.0)) throw Error(ErrorKind::Configuration, "jitter must be >= 0");
}

nlohmann::json ComparatorConfig::to_json() const {
  return {{"L", blocks},        {"M", cross_layers},     {"N", self_layers},
          {"heads", heads},     {"depth", depth},        {"tokens", tokens},
          {"mlp_width", mlp_width}, {"mlp_hidden", mlp_hidden}, {"jitter", jitter},
          {"zero_head", zero_head}};
}

ComparatorConfig ComparatorConfig::from_json(const nlohmann::json& j) {
  ComparatorConfig c;
  c.blocks = j.value("L", c.blocks);
  c.cross_layers = j.value("M", c.cross_layers);
  c.self_layers = j.value("N", c.self_layers);
  c.heads = j.value("heads", c.heads);
  c.depth = j.value("depth", c.depth);
  c.tokens = j.value("tokens", c.tokens);
  c.mlp_width = j.value("mlp_width", c.mlp_width);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.jitter = j.value("jitter", c.jitter);
  c.zero_head = j.value("zero_head", c.zero_head);
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(ErrorKind::Configuration, "epochs must be at least 1");
  if (batch_size < 2) {
    throw Error(ErrorKind::Configuration, "batch size must be at least 2 (batch norm)");
  }
  if (!(max_lr > 0.0)) throw Error(ErrorKind::Configuration, "max_lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw Error(ErrorKind::Configuration, "momentum must be in [0, 1)");
  }
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"momentum", momentum},
          {"max_lr", max_lr}, {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.momentum = j.value("momentum", c.momentum);
  c.max_lr = j.value("max_lr", c.max_lr);
  c.seed = j.value("seed", c.seed);
  return c;
}

OneCycleSchedule::OneCycleSchedule(double max_lr, std::size_t total_steps)
    : max_lr_(max_lr),
      total_steps_(std::max<std::size_t>(total_steps, 1)),
      warmup_end_(kWarmupFraction * static_cast<double>(total_steps_) - 1.0) {}

double OneCycleSchedule::lr(std::size_t step) const {
  auto anneal = [](double from, double to, double pct) {
    return to + (from - to) / 2.0 * (1.0 + std::cos(std::numbers::pi * pct));
  };
  const double initial = max_lr_ / kDivFactor;
  const double final_lr = max_lr_ / kFinalDivFactor;
  const double s = static_cast<double>(std::min(step, total_steps_ - 1));
  if (warmup_end_ > 0.0 && s <= warmup_end_) {
    return anneal(initial, max_lr_, s / warmup_end_);
  }
  const double start = std::max(warmup_end_, 0.0);
  const double span = static_cast<double>(total_steps_ - 1) - start;
  if (span <= 0.0) return final_lr;
  return anneal(max_lr_, final_lr, (s - start) / span);
}

// ---------------------------------------------------------------------------
// Model

namespace {

nk::Tensor xavier(std::size_t in, std::size_t out, Rng& rng) {
  nk::Tensor t(nk::Shape{in, out});
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
  return t;
}

nk::Tensor normal(nk::Shape shape, double stddev, Rng& rng) {
  nk::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal();
  return t;
}

}  // namespace

ComparatorModel ComparatorModel::init(const ComparatorConfig& config,
                                      std::uint64_t seed) {
  config.validate();
  ComparatorModel m;
  m.config_ = config;
  Rng rng(seed);
  const std::size_t d = config.depth;
  auto add = [&m](std::string name, nk::Tensor t) {
    m.params_.push_back(Parameter{std::move(name), std::move(t)});
  };
  add("cls", normal(nk::Shape{d}, 0.02, rng));
  add("pos", normal(nk::Shape{config.tokens + 1, d}, 0.02, rng));
  auto add_attention = [&](const std::string& prefix) {
    for (int k = 0; k < 4; ++k) {
      add(prefix + "." + kAttnSuffixes[2 * k], xavier(d, d, rng));
      add(prefix + "." + kAttnSuffixes[2 * k + 1], nk::Tensor(nk::Shape{d}, 0.0));
    }
  };
  for (std::size_t l = 0; l < config.blocks; ++l) {
    for (std::size_t n = 0; n < config.self_layers; ++n) add_attention(attn_prefix("self", l, n));
    for (std::size_t c = 0; c < config.cross_layers; ++c) add_attention(attn_prefix("cross", l, c));
  }
  const std::size_t widths[] = {2 * d, config.mlp_width, config.mlp_hidden, 2, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string p = "mlp." + std::to_string(i);
    nk::Tensor w = xavier(widths[i], widths[i + 1], rng);
    if (i == 3 && config.zero_head) w.fill(0.0);
    add(p + ".w", std::move(w));
    add(p + ".b", nk::Tensor(nk::Shape{widths[i + 1]}, 0.0));
    if (i < 2) {
      add("bn." + std::to_string(i) + ".gamma", nk::Tensor(nk::Shape{widths[i + 1]}, 1.0));
      add("bn." + std::to_string(i) + ".beta", nk::Tensor(nk::Shape{widths[i + 1]}, 0.0));
      m.bn_.push_back(nk::BatchNormStats{nk::Tensor(nk::Shape{widths[i + 1]}, 0.0),
                                         nk::Tensor(nk::Shape{widths[i + 1]}, 1.0)});
    }
  }
  return m;
}

const nk::Tensor& ComparatorModel::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw Error(ErrorKind::Usage, "no parameter named '" + name + "'");
}

nk::Tensor& ComparatorModel::parameter(const std::string& name) {
  return const_cast<nk::Tensor&>(std::as_const(*this).parameter(name));
}

std::size_t ComparatorModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ComparatorModel::parameter_count(const ComparatorConfig& c) {
  const std::size_t d = c.depth, w = c.mlp_width, h = c.mlp_hidden;
  const std::size_t embed = d + (c.tokens + 1) * d;
  const std::size_t attention = c.blocks * (c.self_layers + c.cross_layers) * 4 * (d * d + d);
  const std::size_t mlp = (2 * d * w + w) + 2 * w + (w * h + h) + 2 * h + (h * 2 + 2) + (2 + 1);
  return embed + attention + mlp;
}

nk::Var ComparatorModel::build(nk::Tape& tape, const nk::Tensor& grids1,
                               const nk::Tensor& grids2, nk::Mode mode,
                               std::vector<nk::BatchNormStats>& stats,
                               std::vector<nk::Var>* param_vars) const {
  const auto& c = config_;
  const nk::Shape expect_tail{c.tokens, c.depth};
  for (const nk::Tensor* g : {&grids1, &grids2}) {
    if (g->rank() != 3 || g->dim(1) != c.tokens || g->dim(2) != c.depth) {
      throw Error(ErrorKind::Dimension,
                  "comparator expects [B x " + std::to_string(c.tokens) + " x " +
                      std::to_string(c.depth) + "] grids, got " +
                      nk::shape_string(g->shape()));
    }
  }
  if (grids1.shape() != grids2.shape()) {
    throw Error(ErrorKind::Dimension, "comparator grids differ: " +
                                          nk::shape_string(grids1.shape()) + " vs " +
                                          nk::shape_string(grids2.shape()));
  }

  std::vector<nk::Var> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) {
    vars.push_back(param_vars ? tape.parameter(p.value) : tape.constant(p.value));
  }
  if (param_vars) *param_vars = vars;
  std::size_t next = 0;
  auto take = [&]() { return vars[next++]; };
  auto take_attention = [&]() {
    nk::AttentionWeights w;
    w.wq = take(); w.bq = take(); w.wk = take(); w.bk = take();
    w.wv = take(); w.bv = take(); w.wo = take(); w.bo = take();
    return w;
  };

  nk::Var cls = take();
  nk::Var pos = take();
  nk::Var x1 = nk::add_broadcast(nk::prepend_token(cls, tape.constant(grids1)), pos);
  nk::Var x2 = nk::add_broadcast(nk::prepend_token(cls, tape.constant(grids2)), pos);
  for (std::size_t l = 0; l < c.blocks; ++l) {
    for (std::size_t n = 0; n < c.self_layers; ++n) {
      const auto w = take_attention();
      x1 = nk::add(x1, nk::mhsa(x1, w, c.heads));
      x2 = nk::add(x2, nk::mhsa(x2, w, c.heads));
    }
    for (std::size_t m = 0; m < c.cross_layers; ++m) {
      const auto w = take_attention();
      std::tie(x1, x2) = nk::cross_attention(x1, x2, w, c.heads);
    }
  }
  nk::Var f1 = c.blocks == 0 ? nk::mean_tokens(x1) : nk::take_token(x1, 0);
  nk::Var f2 = c.blocks == 0 ? nk::mean_tokens(x2) : nk::take_token(x2, 0);
  nk::Var h = nk::concat_features(f1, f2);
  for (std::size_t i = 0; i < 4; ++i) {
    nk::Var w = take();
    nk::Var b = take();
    h = nk::linear(h, w, b);
    if (i < 2) {
      nk::Var gamma = take();
      nk::Var beta = take();
      h = nk::gelu(nk::batchnorm(h, gamma, beta, stats[i], mode));
    }
  }
  return nk::reshape(h, nk::Shape{grids1.dim(0)});
}

nk::Var ComparatorModel::logits(nk::Tape& tape, const nk::Tensor& grids1,
                                const nk::Tensor& grids2, nk::Mode mode,
                                std::vector<nk::Var>* param_vars) {
  return build(tape, grids1, grids2, mode, bn_, param_vars);
}

nk::Tensor stack_grids(std::span<const std::span<const float>> grids, std::size_t tokens,
                       std::size_t depth) {
  const std::size_t per = tokens * depth;
  nk::Tensor t(nk::Shape{grids.size(), tokens, depth});
  for (std::size_t b = 0; b < grids.size(); ++b) {
    if (grids[b].size() != per) {
      throw Error(ErrorKind::Dimension, "grid " + std::to_string(b) + " has " +
                                            std::to_string(grids[b].size()) +
                                            " values, expected " + std::to_string(per));
    }
    std::copy(grids[b].begin(), grids[b].end(), t.ptr() + b * per);
  }
  return t;
}

std::vector<double> ComparatorModel::score(
    std::span<const std::span<const float>> first,
    std::span<const std::span<const float>> second) const {
  if (first.size() != second.size()) {
    throw Error(ErrorKind::Dimension, "score: mismatched pair lists");
  }
  std::vector<double> out;
  out.reserve(first.size());
  std::vector<nk::BatchNormStats> stats = bn_;
  for (std::size_t start = 0; start < first.size(); start += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, first.size() - start);
    nk::Tape tape;
    nk::Var o = build(tape, stack_grids(first.subspan(start, n), config_.tokens, config_.depth),
                      stack_grids(second.subspan(start, n), config_.tokens, config_.depth),
                      nk::Mode::Eval, stats, nullptr);
    for (double v : o.value().data()) out.push_back(nk::sigmoid_value(v));
  }
  return out;
}

double ComparatorModel::forward_pair(std::span<const float> grid1,
                                     std::span<const float> grid2) const {
  const std::span<const float> a[] = {grid1};
  const std::span<const float> b[] = {grid2};
  return score(a, b).front();
}

void ComparatorModel::quantize_to_f32() {
  auto round = [](nk::Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<double>(static_cast<float>(t[i]));
    }
  };
  for (auto& p : params_) round(p.value);
  for (auto& s : bn_) {
    round(s.running_mean);
    round(s.running_var);
  }
}

void ComparatorModel::save(const std::filesystem::path& header,
                           const std::filesystem::path& blob,
                           const nlohmann::json& metadata) const {
  std::vector<float> values;
  nlohmann::json layout = nlohmann::json::array();
  auto push = [&](const std::string& name, const nk::Tensor& t) {
    layout.push_back({{"name", name}, {"shape", t.shape()}, {"offset", values.size()}});
    for (double v : t.data()) values.push_back(static_cast<float>(v));
  };
  for (const auto& p : params_) push(p.name, p.value);
  for (std::size_t i = 0; i < bn_.size(); ++i) {
    push("bn." + std::to_string(i) + ".running_mean", bn_[i].running_mean);
    push("bn." + std::to_string(i) + ".running_var", bn_[i].running_var);
  }
  const auto bytes = encode_f32(values);
  write_file(blob, bytes);
  write_json(header, {{"format", kCheckpointFormat},
                      {"config", config_.to_json()},
                      {"tensors", layout},
                      {"values", values.size()},
                      {"checksum", crc32_hex(bytes)},
                      {"metadata", metadata}});
}

ComparatorModel ComparatorModel::load(const std::filesystem::path& header,
                                      const std::filesystem::path& blob,
                                      nlohmann::json* metadata) {
  const auto j = read_json(header);
  if (j.value("format", std::string{}) != kCheckpointFormat) {
    throw Error(ErrorKind::Validation, header.string() + ": not a comparator checkpoint");
  }
  const auto bytes = read_file(blob);
  if (crc32_hex(bytes) != j.at("checksum").get<std::string>()) {
    throw Error(ErrorKind::Validation, blob.string() + ": checksum mismatch");
  }
  const auto values = decode_f32(bytes);
  if (values.size() != j.at("values").get<std::size_t>()) {
    throw Error(ErrorKind::Validation, blob.string() + ": wrong number of values");
  }
  ComparatorModel m = init(ComparatorConfig::from_json(j.at("config")), 0);
  std::unordered_map<std::string, nk::Tensor*> targets;
  for (auto& p : m.params_) targets[p.name] = &p.value;
  for (std::size_t i = 0; i < m.bn_.size(); ++i) {
    targets["bn." + std::to_string(i) + ".running_mean"] = &m.bn_[i].running_mean;
    targets["bn." + std::to_string(i) + ".running_var"] = &m.bn_[i].running_var;
  }
  std::size_t filled = 0;
  for (const auto& entry : j.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    auto it = targets.find(name);
    if (it == targets.end()) {
      throw Error(ErrorKind::Validation, "checkpoint has unexpected tensor '" + name + "'");
    }
    nk::Tensor& t = *it->second;
    if (entry.at("shape").get<nk::Shape>() != t.shape()) {
      throw Error(ErrorKind::Validation, "checkpoint tensor '" + name + "' has wrong shape");
    }
    const auto offset = entry.at("offset").get<std::size_t>();
    if (offset + t.size() > values.size()) {
      throw Error(ErrorKind::Validation, "checkpoint tensor '" + name + "' overruns blob");
    }
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = values[offset + k];
    ++filled;
  }
  if (filled != targets.size()) {
    throw Error(ErrorKind::Validation, "checkpoint is missing tensors");
  }
  if (metadata) *metadata = j.value("metadata", nlohmann::json::object());
  return m;
}

// ---------------------------------------------------------------------------
// Metrics

nlohmann::json BinaryMetrics::to_json() const {
  return {{"tp", true_positive},
          {"fp", false_positive},
          {"tn", true_negative},
          {"fn", false_negative},
          {"accuracy", accuracy},
          {"precision", precision},
          {"recall", recall},
          {"f1", f1},
          {"confidence",
           {{"correctly_accept", correctly_accept},
            {"incorrectly_accept", incorrectly_accept},
            {"correctly_reject", correctly_reject},
            {"incorrectly_reject", incorrectly_reject}}}};
}

BinaryMetrics evaluate_binary(std::span<const double> scores, const std::vector<bool>& labels,
                              double threshold) {
  if (scores.empty()) throw Error(ErrorKind::Usage, "cannot evaluate an empty pair set");
  if (scores.size() != labels.size()) {
    throw Error(ErrorKind::Dimension, "scores and labels differ in length");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorKind::Configuration, "threshold must be in (0, 1)");
  }
  BinaryMetrics m;
  double conf[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool accept = scores[i] > threshold;
    if (accept && labels[i]) {
      ++m.true_positive;
      conf[0] += scores[i];
    } else if (accept) {
      ++m.false_positive;
      conf[1] += scores[i];
    } else if (!labels[i]) {
      ++m.true_negative;
      conf[2] += 1.0 - scores[i];
    } else {
      ++m.false_negative;
      conf[3] += 1.0 - scores[i];
    }
  }
  auto ratio = [](double a, std::size_t b) { return b ? a / static_cast<double>(b) : 0.0; };
  m.accuracy = ratio(static_cast<double>(m.true_positive + m.true_negative), scores.size());
  m.precision = ratio(static_cast<double>(m.true_positive), m.true_positive + m.false_positive);
  m.recall = ratio(static_cast<double>(m.true_positive), m.true_positive + m.false_negative);
  m.f1 = (m.precision + m.recall) > 0.0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  m.correctly_accept = ratio(conf[0], m.true_positive);
  m.incorrectly_accept = ratio(conf[1], m.false_positive);
  m.correctly_reject = ratio(conf[2], m.true_negative);
  m.incorrectly_reject = ratio(conf[3], m.false_negative);
  return m;
}

namespace {

struct ResolvedPairs {
  std::vector<std::span<const float>> first;
  std::vector<std::span<const float>> second;
  std::vector<double> labels;
};

ResolvedPairs resolve(const PairSet& pairs, const EmbeddingStore& store) {
  ResolvedPairs r;
  r.first.reserve(pairs.size());
  r.second.reserve(pairs.size());
  r.labels.reserve(pairs.size());
  for (const auto& p : pairs.pairs) {
    r.first.push_back(store.record(pairs.query_split, p.query).grid);
    r.second.push_back(store.record(Split::Train, p.neighbor).grid);
    r.labels.push_back(p.positive ? 1.0 : 0.0);
  }
  return r;
}

}  // namespace

std::vector<double> score_pairs(const ComparatorModel& model, const PairSet& pairs,
                                const EmbeddingStore& store) {
  const auto r = resolve(pairs, store);
  return model.score(r.first, r.second);
}

BinaryMetrics evaluate_binary(const ComparatorModel& model, const PairSet& pairs,
                              const EmbeddingStore& store, double threshold) {
  if (pairs.size() == 0) throw Error(ErrorKind::Usage, "cannot evaluate an empty pair set");
  const auto scores = score_pairs(model, pairs, store);
  std::vector<bool> labels;
  for (const auto& p : pairs.pairs) labels.push_back(p.positive);
  return evaluate_binary(scores, labels, threshold);
}

// ---------------------------------------------------------------------------
// Training

nlohmann::json TrainReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : epochs) {
    rows.push_back({{"epoch", e.epoch},
                    {"loss", e.loss},
                    {"train_accuracy", e.train_accuracy},
                    {"eval", e.eval.to_json()}});
  }
  return {{"epochs", rows}, {"selected_epoch", selected_epoch}};
}

std::size_t select_checkpoint(std::span<const double> f1_per_epoch) {
  if (f1_per_epoch.empty()) throw Error(ErrorKind::Usage, "no epochs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < f1_per_epoch.size(); ++i) {
    if (f1_per_epoch[i] > f1_per_epoch[best]) best = i;
  }
  return best;
}

TrainResult train(ComparatorModel model, const PairSet& train_pairs,
                  const PairSet& eval_pairs, const EmbeddingStore& store,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_pairs.size() == 0 || eval_pairs.size() == 0) {
    throw Error(ErrorKind::Usage, "training needs non-empty train and eval pair sets");
  }
  const auto& mc = model.config();
  if (mc.tokens != store.tokens() || mc.depth != store.depth()) {
    throw Error(ErrorKind::Dimension, "comparator shape does not match the store");
  }
  const ResolvedPairs data = resolve(train_pairs, store);
  const std::size_t n = data.labels.size();
  std::size_t steps_per_epoch = n / config.batch_size;
  if (n % config.batch_size >= 2) ++steps_per_epoch;
  if (steps_per_epoch == 0) {
    throw Error(ErrorKind::Usage, "training set has fewer than 2 pairs");
  }
  const OneCycleSchedule schedule(config.max_lr, steps_per_epoch * config.epochs);

  std::vector<nk::Tensor> velocity;
  for (const auto& p : model.parameters()) velocity.emplace_back(p.value.shape(), 0.0);

  std::vector<bool> eval_labels;
  for (const auto& p : eval_pairs.pairs) eval_labels.push_back(p.positive);

  TrainReport report;
  ComparatorModel best = model;
  double best_f1 = -1.0;
  std::size_t step = 0;
  std::vector<std::size_t> order(n);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = Rng::stream(config.seed, epoch);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t loss_rows = 0, correct = 0;
    for (std::size_t start = 0, batch_no = 0; start < n; start += config.batch_size, ++batch_no) {
      const std::size_t rows = std::min(config.batch_size, n - start);
      if (rows < 2) break;
      std::vector<std::span<const float>> a(rows), b(rows);
      std::vector<double> labels(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t k = order[start + i];
        a[i] = data.first[k];
        b[i] = data.second[k];
        labels[i] = data.labels[k];
      }
      nk::Tensor g1 = stack_grids(a, mc.tokens, mc.depth);
      nk::Tensor g2 = stack_grids(b, mc.tokens, mc.depth);
      if (mc.jitter > 0.0) {
        Rng noise = Rng::stream(config.seed ^ 0x7177E4ull, (epoch << 32) | batch_no);
        for (std::size_t i = 0; i < g1.size(); ++i) g1[i] += mc.jitter * noise.normal();
        for (std::size_t i = 0; i < g2.size(); ++i) g2[i] += mc.jitter * noise.normal();
      }

      nk::Tape tape;
      std::vector<nk::Var> params;
      nk::Var o = model.logits(tape, g1, g2, nk::Mode::Train, &params);
      nk::Var loss = nk::bce_with_logits(o, labels);
      const double loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        throw Error(ErrorKind::Training, "non-finite loss at epoch " + std::to_string(epoch) +
                                             ", batch " + std::to_string(batch_no + 1));
      }
      tape.backward(loss);

      const double lr = schedule.lr(step++);
      auto& ps = model.parameters();
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const nk::Tensor g = tape.grad(params[i]);
        nk::Tensor& v = velocity[i];
        nk::Tensor& w = ps[i].value;
        for (std::size_t k = 0; k < w.size(); ++k) {
          v[k] = config.momentum * v[k] + g[k];
          w[k] -= lr * v[k];
        }
        if (!w.all_finite()) {
          throw Error(ErrorKind::Training,
                      "parameter '" + ps[i].name + "' diverged at epoch " +
                          std::to_string(epoch) + ", batch " + std::to_string(batch_no + 1));
        }
      }
      loss_sum += loss_value * static_cast<double>(rows);
      loss_rows += rows;
      const auto& ov = o.value();
      for (std::size_t i = 0; i < rows; ++i) correct += ((ov[i] > 0.0) == (labels[i] == 1.0));
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = loss_sum / static_cast<double>(loss_rows);
    stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(loss_rows);
    const auto scores = score_pairs(model, eval_pairs, store);
    stats.eval = evaluate_binary(scores, eval_labels);
    report.epochs.push_back(stats);
    if (stats.eval.f1 > best_f1) {
      best_f1 = stats.eval.f1;
      best = model;
      report.selected_epoch = epoch;
    }
    if (on_epoch) on_epoch(stats);
  }
  return TrainResult{std::move(best), std::move(report)};
}

}  // namespace pcnn
