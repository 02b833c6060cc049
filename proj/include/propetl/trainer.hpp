#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "propetl/backbone.hpp"
#include "propetl/bls.hpp"
#include "propetl/petl.hpp"
#include "propetl/tasks.hpp"

namespace propetl {

enum class OptimizerKind : std::uint8_t { Sgd = 0, AdamW = 1 };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adamw"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adamw") return OptimizerKind::AdamW;
  throw ValueError("unknown optimizer '" + std::string(s) + "'");
}

struct TrainConfig {
  double lambda_p = 1e-4;                // prototype (and full fine-tune body)
  double lambda_m = 3e-3;                // mask scores
  std::optional<double> lambda_head;     // classifier heads; lambda_p when unset
  std::size_t steps = 500;
  std::size_t batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::AdamW;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.01;            // prototype, heads and body; never scores
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;            // 0: evaluate once, after the last step
  bool keep_best = true;
  std::size_t log_every = 10;
  std::size_t eval_batch = 64;

  double head_lr() const { return lambda_head.value_or(lambda_p); }
};

inline void validate(const TrainConfig& c) {
  const auto finite_nonneg = [](double x) { return std::isfinite(x) && x >= 0.0; };
  if (!(c.lambda_p > 0.0) || !std::isfinite(c.lambda_p)) throw ValueError("train: lambda_p must be > 0");
  if (!finite_nonneg(c.lambda_m)) throw ValueError("train: lambda_m must be >= 0");
  if (!finite_nonneg(c.head_lr())) throw ValueError("train: head learning rate must be >= 0");
  if (c.steps == 0) throw ValueError("train: steps must be positive");
  if (c.batch_size == 0 || c.eval_batch == 0) throw ValueError("train: batch sizes must be positive");
  if (!(c.beta1 >= 0 && c.beta1 < 1) || !(c.beta2 >= 0 && c.beta2 < 1)) throw ValueError("train: betas in [0, 1)");
  if (!(c.eps > 0.0)) throw ValueError("train: eps must be > 0");
  if (!finite_nonneg(c.weight_decay)) throw ValueError("train: weight_decay must be >= 0");
}

// ----------------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------------

/// SGD or AdamW over parameter groups. A parameter without a gradient this
/// step is left untouched, moments and step count included.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& c) : c_(c) {}

  void add(const std::vector<Parameter*>& params, double lr, double weight_decay) {
    for (auto* p : params) {
      if (!p->requires_grad) continue;
      slots_.push_back(Slot{p, lr, weight_decay, std::vector<double>(p->numel()), std::vector<double>(p->numel()), 0});
    }
  }

  void step() {
    for (auto& s : slots_) {
      Parameter& p = *s.p;
      if (!p.has_grad()) continue;
      if (s.lr > 0.0) update(s);
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.p->zero_grad();
  }

  std::size_t size() const { return slots_.size(); }

 private:
  struct Slot {
    Parameter* p;
    double lr, wd;
    std::vector<double> m, v;
    std::uint64_t t;
  };

  void update(Slot& s) {
    auto& w = s.p->value.values();
    const auto& g = s.p->grad.values();
    if (c_.optimizer == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = float(double(w[i]) - s.lr * (double(g[i]) + s.wd * double(w[i])));
      }
      return;
    }
    ++s.t;
    const double bc1 = 1.0 - std::pow(c_.beta1, double(s.t));
    const double bc2 = 1.0 - std::pow(c_.beta2, double(s.t));
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      s.m[i] = c_.beta1 * s.m[i] + (1.0 - c_.beta1) * gi;
      s.v[i] = c_.beta2 * s.v[i] + (1.0 - c_.beta2) * gi * gi;
      const double mh = s.m[i] / bc1, vh = s.v[i] / bc2;
      double x = double(w[i]);
      x -= s.lr * s.wd * x;
      x -= s.lr * mh / (std::sqrt(vh) + c_.eps);
      w[i] = float(x);
    }
  }

  TrainConfig c_;
  std::vector<Slot> slots_;
};

// ----------------------------------------------------------------------------
// Metrics
// ----------------------------------------------------------------------------

struct MetricRow {
  std::size_t step = 0;
  std::string task;
  Split split = Split::Train;
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> mask_density;  // per layer
  double wall_ms = 0.0;
};

using MetricsSink = std::function<void(const MetricRow&)>;

inline constexpr std::string_view kMetricsHeader = "# propetl-metrics v1";

/// Append-only CSV: step, task, split, loss, accuracy, mask_density (per-layer
/// values joined by ';'), wall_ms.
class MetricsCsv {
 public:
  explicit MetricsCsv(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw Error("cannot write metrics file '" + path + "'");
    out_ << kMetricsHeader << '\n' << "step,task,split,loss,accuracy,mask_density,wall_ms\n";
  }

  void write(const MetricRow& r) {
    out_ << r.step << ',' << r.task << ',' << to_string(r.split) << ',' << std::setprecision(9) << r.loss << ','
         << r.accuracy << ',';
    for (std::size_t i = 0; i < r.mask_density.size(); ++i) out_ << (i ? ";" : "") << r.mask_density[i];
    out_ << ',' << std::setprecision(6) << r.wall_ms << '\n';
    out_.flush();
  }

  MetricsSink sink() {
    return [this](const MetricRow& r) { write(r); };
  }

 private:
  std::ofstream out_;
};

/// Per-layer fraction of ones in the masks the next forward would use.
inline std::vector<double> mask_densities(const Attachment<float>& a, std::optional<std::size_t> task = std::nullopt) {
  const auto& c = a.config;
  std::vector<double> out;
  const bool tasked = task && c.has_masks() && c.num_tasks > 0;
  std::vector<BinaryMask> tm;
  if (tasked) tm = a.task_masks.empty() ? a.current_task_masks(*task) : a.task_masks.at(*task);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    if (c.mode == Mode::OnlyShare) {
      out.push_back(1.0);
      continue;
    }
    if (c.mode == Mode::RandomMask && !a.frozen()) {
      std::uint64_t ones = 0, n = 0;
      for (const auto& t : a.targets()) ones += c.k.ones(shape_numel(t.shape)), n += shape_numel(t.shape);
      out.push_back(double(ones) / double(n));
      continue;
    }
    auto lm = a.frozen() ? a.layer_masks.at(l) : a.current_layer_masks(l);
    std::uint64_t ones = 0, n = 0;
    for (std::size_t i = 0; i < lm.size(); ++i) {
      const auto m = tasked ? combine(lm[i], tm[i], c.combine) : lm[i];
      ones += m.popcount();
      n += m.numel();
    }
    out.push_back(double(ones) / double(n));
  }
  return out;
}

// ----------------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;  // mean negative log-likelihood
  std::size_t examples = 0;
};

/// Inference-mode accuracy and loss on one split. Each example's loss is
/// computed on its own logits row, so the result does not depend on the
/// batch size.
inline EvalResult evaluate(BackboneWeights<float>& w, Attachment<float>* a, const TaskData& t, Split split,
                           std::size_t task = 0, std::size_t batch_size = 64) {
  const auto& xs = t.split(split);
  if (xs.empty()) throw ValueError("evaluate: task '" + t.name + "' has an empty " + std::string(to_string(split)) + " split");
  if (batch_size == 0) throw ValueError("evaluate: batch size must be positive");
  std::optional<Attachment<float>> drawn;
  if (a && a->config.mode == Mode::RandomMask && !a->frozen()) {
    drawn = *a;
    drawn->freeze();
    a = &*drawn;
  }
  double nll = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  std::vector<std::int32_t> labels;
  for (std::size_t start = 0; start < xs.size(); start += batch_size) {
    rows.resize(std::min(batch_size, xs.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const auto tokens = make_batch(xs, rows, &labels);
    const auto logits = infer_logits<float>(w, a, tokens, task);
    const std::size_t C = logits.cols();
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const float* x = logits.data() + b * C;
      const std::size_t arg = std::size_t(std::max_element(x, x + C) - x);
      correct += arg == std::size_t(labels[b]) ? 1 : 0;
      const double mx = x[arg];
      double z = 0.0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(double(x[c]) - mx);
      nll += mx + std::log(z) - double(x[labels[b]]);
    }
  }
  return {double(correct) / double(xs.size()), nll / double(xs.size()), xs.size()};
}

// ----------------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------------

struct TrainResult {
  std::vector<MetricRow> history;
  std::vector<double> train_loss;      // one per step
  std::size_t best_step = 0;
  double best_valid_accuracy = 0.0;
  double best_valid_loss = 0.0;
};

namespace detail {

struct Snapshot {
  std::optional<Attachment<float>> attachment;
  std::vector<ClassifierHead<float>> heads;
  std::vector<BasicTensor<float>> body;
};

inline Snapshot take_snapshot(BackboneWeights<float>& w, const Attachment<float>* a) {
  Snapshot s;
  if (a) s.attachment = *a;
  s.heads = w.heads;
  if (!w.frozen())
    for (auto* p : w.body_parameters()) s.body.push_back(p->value);
  return s;
}

inline void restore(const Snapshot& s, BackboneWeights<float>& w, Attachment<float>* a) {
  if (a) *a = *s.attachment;
  w.heads = s.heads;
  if (!s.body.empty()) {
    auto ps = w.body_parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = s.body[i];
  }
}

inline double mean_of(std::span<const double> xs) {
  return xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / double(xs.size());
}

/// Shared loop. `sampling` empty means a single task (index 0) on `heads[0]`.
inline TrainResult train_loop(BackboneWeights<float>& w, Attachment<float>* a, const TaskSet& ts,
                              const std::vector<std::size_t>& heads, const TrainConfig& cfg, const MetricsSink& sink) {
  validate(cfg);
  if (ts.tasks.empty()) throw ValueError("train: no tasks");
  for (std::size_t t = 0; t < ts.tasks.size(); ++t) {
    const auto& task = ts.tasks[t];
    if (task.train.empty()) throw ValueError("train: task '" + task.name + "' has no training examples");
    validate(task, w.config.vocab_size);
    if (heads[t] >= w.heads.size() || w.heads[heads[t]].num_classes() != task.num_classes) {
      throw ValueError("train: task '" + task.name + "' does not match classifier head " + std::to_string(heads[t]));
    }
  }
  if (a && a->frozen()) throw ValueError("train: attachment is frozen");

  Optimizer opt(cfg);
  if (a) {
    opt.add(a->prototype_parameters(), cfg.lambda_p, cfg.weight_decay);
    opt.add(a->score_parameters(), cfg.lambda_m, 0.0);
  }
  opt.add(w.head_parameters(), cfg.head_lr(), cfg.weight_decay);
  if (!w.frozen()) opt.add(w.body_parameters(), cfg.lambda_p, cfg.weight_decay);

  const bool multi = ts.tasks.size() > 1;
  const auto probs = multi ? sample_task(ts) : std::vector<double>{1.0};
  Rng task_rng = Rng::derive(cfg.seed, "task-sampling");
  Rng batch_rng = Rng::derive(cfg.seed, "batches");
  Rng mask_rng = Rng::derive(cfg.seed, "random-masks");

  const auto start = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  };

  TrainResult res;
  std::optional<Snapshot> best;
  const auto emit = [&](MetricRow r) {
    r.wall_ms = elapsed();
    if (sink) sink(r);
    res.history.push_back(std::move(r));
  };
  const auto densities = [&](std::size_t head) {
    return a ? mask_densities(*a, std::optional<std::size_t>(head)) : std::vector<double>{};
  };

  const auto validate_now = [&](std::size_t step) {
    std::vector<double> accs, losses;
    for (std::size_t t = 0; t < ts.tasks.size(); ++t) {
      const auto& task = ts.tasks[t];
      if (task.valid.empty()) continue;
      const auto r = evaluate(w, a, task, Split::Valid, heads[t], cfg.eval_batch);
      accs.push_back(r.accuracy);
      losses.push_back(r.loss);
      emit({step, task.name, Split::Valid, r.loss, r.accuracy, densities(heads[t]), 0.0});
    }
    if (accs.empty()) return;
    const double acc = mean_of(accs), loss = mean_of(losses);
    const bool better = !best || acc > res.best_valid_accuracy ||
                        (acc == res.best_valid_accuracy && loss < res.best_valid_loss);
    if (better) {
      res.best_step = step;
      res.best_valid_accuracy = acc;
      res.best_valid_loss = loss;
      if (cfg.keep_best) best = take_snapshot(w, a);
    }
  };

  std::vector<std::size_t> rows(cfg.batch_size);
  std::vector<std::int32_t> labels;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t t = multi ? draw_categorical(probs, task_rng) : 0;
    const auto& task = ts.tasks[t];
    for (auto& r : rows) r = batch_rng.below(task.train.size());
    const auto tokens = make_batch(task.train, rows, &labels);

    Graph g;
    ForwardOptions<float> fo;
    fo.training = true;
    fo.task = heads[t];
    fo.random_mask_rng = &mask_rng;
    double loss = 0.0, acc = 0.0;
    try {
      const Var logits = encode(g, w, a, tokens, fo);
      const Var l = cross_entropy(logits, std::span<const std::int32_t>(labels));
      loss = double(l.value()[0]);
      if (!std::isfinite(loss)) throw ValueError("loss is " + std::to_string(loss));
      const auto& X = logits.value();
      for (std::size_t b = 0; b < rows.size(); ++b) {
        const float* x = X.data() + b * X.cols();
        acc += std::size_t(std::max_element(x, x + X.cols()) - x) == std::size_t(labels[b]) ? 1.0 : 0.0;
      }
      acc /= double(rows.size());
      g.backward(l);
    } catch (const ValueError& e) {
      opt.zero_grad();
      throw TrainingError("training diverged at step " + std::to_string(step) + " (task '" + task.name +
                          "'): " + e.what());
    }
    opt.step();
    res.train_loss.push_back(loss);
    if (cfg.log_every && (step % cfg.log_every == 0 || step == cfg.steps)) {
      emit({step, task.name, Split::Train, loss, acc, densities(heads[t]), 0.0});
    }
    if ((cfg.eval_every && step % cfg.eval_every == 0) || step == cfg.steps) validate_now(step);
  }

  if (best) restore(*best, w, a);
  if (a) a->freeze();
  return res;
}

}  // namespace detail

/// Trains the attachment (and the head `head`) on one task. The body stays as
/// given: frozen for PETL. Returns with the best-validation state restored
/// and the attachment frozen to binary masks.
inline TrainResult train_single_task(BackboneWeights<float>& w, Attachment<float>& a, const TaskData& task,
                                     const TrainConfig& cfg, std::size_t head = 0, const MetricsSink& sink = {}) {
  if (a.config.num_tasks > 0) throw ValueError("train_single_task: attachment carries task masks");
  TaskSet ts{{task}, 1.0};
  return detail::train_loop(w, &a, ts, {head}, cfg, sink);
}

/// Multi-task training: each step samples a task with temperature sampling
/// and trains through the hybrid of the layer masks and that task's mask.
/// Task t uses head t and task-mask set t.
inline TrainResult train_multi_task(BackboneWeights<float>& w, Attachment<float>& a, const TaskSet& ts,
                                    const TrainConfig& cfg, const MetricsSink& sink = {}) {
  if (a.config.has_masks() && a.config.num_tasks != ts.tasks.size()) {
    throw ValueError("train_multi_task: attachment has " + std::to_string(a.config.num_tasks) + " task-mask sets for " +
                     std::to_string(ts.tasks.size()) + " tasks");
  }
  std::vector<std::size_t> heads(ts.tasks.size());
  std::iota(heads.begin(), heads.end(), 0);
  return detail::train_loop(w, &a, ts, heads, cfg, sink);
}

/// Full fine-tuning without an attachment: every backbone parameter trains
/// at lambda_p. The body is frozen again afterwards.
inline TrainResult train_full_finetune(BackboneWeights<float>& w, const TaskData& task, const TrainConfig& cfg,
                                       std::size_t head = 0, const MetricsSink& sink = {}) {
  w.unfreeze();
  TaskSet ts{{task}, 1.0};
  auto res = detail::train_loop(w, nullptr, ts, {head}, cfg, sink);
  w.freeze();
  return res;
}

struct WarmupConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Pretraining stand-in: a fresh backbone trained end to end on `pretrain`
/// (uniform task sampling), then frozen and given fresh heads for
/// `num_classes`.
inline BackboneWeights<float> warmup_backbone(TransformerConfig c, const TaskSet& pretrain, const WarmupConfig& wc) {
  const auto target_classes = c.num_classes;
  c.num_classes = pretrain.num_classes();
  auto w = init_backbone<float>(c, wc.seed);
  w.unfreeze();
  TrainConfig tc;
  tc.lambda_p = wc.lr;
  tc.lambda_head = wc.lr;
  tc.steps = wc.steps;
  tc.batch_size = wc.batch_size;
  tc.seed = Rng::derive(wc.seed, "warmup").next_u64();
  tc.keep_best = false;
  tc.log_every = 0;
  TaskSet ts = pretrain;
  ts.sampling_temperature = 1e9;  // effectively uniform
  for (auto& t : ts.tasks) t.valid.clear();
  std::vector<std::size_t> heads(ts.tasks.size());
  std::iota(heads.begin(), heads.end(), 0);
  detail::train_loop(w, nullptr, ts, heads, tc, {});
  w.freeze();
  w.reset_heads(target_classes, wc.seed);
  return w;
}

// ----------------------------------------------------------------------------
// Ablations and sweeps
// ----------------------------------------------------------------------------

inline constexpr std::string_view kAblationArms[] = {"propetl", "only_share", "random_mask", "only_mask_same_bn",
                                                     "only_mask_same_k"};

struct ArmPlan {
  std::string name;
  AttachmentConfig config;
  std::uint64_t bls = 0;
  double deviation = 0.0;  // relative to the propetl BLS
};

namespace detail {

/// Integer x in [lo, hi] whose f(x) is closest to target; f nondecreasing.
template <typename F>
std::uint64_t closest_integer(std::uint64_t lo, std::uint64_t hi, std::uint64_t target, F f) {
  std::uint64_t a = lo, b = hi;
  while (a < b) {  // first x with f(x) >= target
    const std::uint64_t m = a + (b - a) / 2;
    if (f(m) >= target) b = m;
    else a = m + 1;
  }
  if (a > lo) {
    const auto above = f(a), below = f(a - 1);
    const auto da = above > target ? above - target : target - above;
    if (target - below <= da) return a - 1;
  }
  return a;
}

}  // namespace detail

/// Configurations for the ablation arms at a BLS matched to `base`
/// (mode propetl, single task):
///   only_share         bn raised until one plain module spends the mask budget
///   random_mask        same bn and k; masks drawn instead of learned
///   only_mask_same_bn  per-layer modules at the same size, k lowered
///   only_mask_same_k   per-layer modules at the same k, size lowered
/// Throws when an arm cannot land within `tolerance` of the target.
inline std::vector<ArmPlan> plan_ablation(const AttachmentConfig& base, std::span<const std::string> arms,
                                          double tolerance = 0.05) {
  if (base.mode != Mode::Propetl || base.num_tasks != 0) {
    throw ValueError("plan_ablation: base must be a single-task propetl configuration");
  }
  validate(base);
  const std::uint64_t target = bls_for(base);
  const std::uint64_t d = base.d, L = base.num_layers;
  std::vector<ArmPlan> out;
  for (const auto& name : arms) {
    AttachmentConfig c = base;
    if (name == "propetl") {
    } else if (name == "random_mask") {
      c.mode = Mode::RandomMask;
    } else if (name == "only_share") {
      c.mode = Mode::OnlyShare;
      c.size = detail::closest_integer(1, 1u << 20, target, [&](std::uint64_t s) { return bls_vanilla(c.variant, d, s, 1); });
    } else if (name == "only_mask_same_bn") {
      c.mode = Mode::OnlyMask;
      const std::uint64_t n = c.size * d;
      if (n > Sparsity::kMaxDenominator) throw ValueError("plan_ablation: module too large for a rational k");
      const auto kept = detail::closest_integer(1, n, target, [&](std::uint64_t m) {
        return bls_only_mask(c.variant, d, c.size, L, Sparsity(std::uint32_t(m), std::uint32_t(n)));
      });
      c.k = Sparsity(std::uint32_t(kept), std::uint32_t(n));
    } else if (name == "only_mask_same_k") {
      c.mode = Mode::OnlyMask;
      c.size = detail::closest_integer(1, 1u << 20, target, [&](std::uint64_t s) { return bls_only_mask(c.variant, d, s, L, c.k); });
    } else {
      throw ValueError("plan_ablation: unknown arm '" + name + "'");
    }
    ArmPlan p{name, c, bls_for(c), 0.0};
    p.deviation = (double(p.bls) - double(target)) / double(target);
    if (std::abs(p.deviation) > tolerance) {
      std::ostringstream os;
      os << "plan_ablation: arm '" << name << "' cannot match " << target << " bits (best " << p.bls << ", size "
         << c.size << ", off by " << 100.0 * p.deviation << "%)";
      throw ValueError(os.str());
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<ArmPlan> plan_ablation(const AttachmentConfig& base, double tolerance = 0.05) {
  std::vector<std::string> all(std::begin(kAblationArms), std::end(kAblationArms));
  return plan_ablation(base, all, tolerance);
}

struct RunSummary {
  std::string name;
  AttachmentConfig config;
  std::uint64_t bls = 0;
  std::vector<double> accuracies;  // one per seed

  double mean() const { return detail::mean_of(accuracies); }
  /// Sample standard deviation.
  double sd() const {
    if (accuracies.size() < 2) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (const auto x : accuracies) s += (x - m) * (x - m);
    return std::sqrt(s / double(accuracies.size() - 1));
  }
};

/// One training run from `backbone` (copied; fresh head seeded by `seed`),
/// scored on `split`.
inline EvalResult run_once(const BackboneWeights<float>& backbone, const AttachmentConfig& ac, const TaskData& task,
                           TrainConfig cfg, std::uint64_t seed, Split split = Split::Test) {
  auto w = backbone;
  w.reset_heads({task.num_classes}, seed);
  auto a = make_attachment<float>(ac, seed);
  cfg.seed = seed;
  train_single_task(w, a, task, cfg);
  return evaluate(w, &a, task, split, 0, cfg.eval_batch);
}

/// Every configuration trained once per seed.
inline std::vector<RunSummary> run_grid(const BackboneWeights<float>& backbone,
                                        const std::vector<std::pair<std::string, AttachmentConfig>>& configs,
                                        const TaskData& task, const TrainConfig& cfg, std::span<const std::uint64_t> seeds,
                                        const std::function<void(const RunSummary&, std::uint64_t, const EvalResult&)>& on_run = {}) {
  std::vector<RunSummary> out;
  for (const auto& [name, ac] : configs) {
    RunSummary s{name, ac, bls_for(ac), {}};
    for (const auto seed : seeds) {
      const auto r = run_once(backbone, ac, task, cfg, seed);
      s.accuracies.push_back(r.accuracy);
      if (on_run) on_run(s, seed, r);
    }
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<RunSummary> run_ablation(const BackboneWeights<float>& backbone, const std::vector<ArmPlan>& plans,
                                            const TaskData& task, const TrainConfig& cfg,
                                            std::span<const std::uint64_t> seeds) {
  std::vector<std::pair<std::string, AttachmentConfig>> configs;
  for (const auto& p : plans) configs.emplace_back(p.name, p.config);
  return run_grid(backbone, configs, task, cfg, seeds);
}

/// "k=<value>" configurations for a sparsity sweep.
inline std::vector<std::pair<std::string, AttachmentConfig>> sparsity_grid(const AttachmentConfig& base,
                                                                           std::span<const double> ks) {
  std::vector<std::pair<std::string, AttachmentConfig>> out;
  for (const double k : ks) {
    AttachmentConfig c = base;
    c.k = Sparsity::from_double(k);
    std::ostringstream os;
    os << "k=" << k;
    out.emplace_back(os.str(), c);
  }
  return out;
}

/// "size=<value>" configurations for a module-size sweep.
inline std::vector<std::pair<std::string, AttachmentConfig>> size_grid(const AttachmentConfig& base,
                                                                       std::span<const std::size_t> sizes) {
  std::vector<std::pair<std::string, AttachmentConfig>> out;
  for (const auto s : sizes) {
    AttachmentConfig c = base;
    c.size = s;
    validate(c);
    out.emplace_back("size=" + std::to_string(s), c);
  }
  return out;
}

}  // namespace propetl
