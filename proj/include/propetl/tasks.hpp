#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "propetl/backbone.hpp"
#include "propetl/random.hpp"
#include "propetl/tensor.hpp"

namespace propetl {

struct Example {
  std::vector<std::int32_t> tokens;
  std::int32_t label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

enum class Split : std::uint8_t { Train = 0, Valid = 1, Test = 2 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  throw ValueError("unknown split '" + std::string(s) + "'");
}

struct TaskData {
  std::string name;
  std::size_t num_classes = 2;
  std::size_t seq_len = 0;
  std::vector<Example> train, valid, test;

  const std::vector<Example>& split(Split s) const {
    switch (s) {
      case Split::Train: return train;
      case Split::Valid: return valid;
      case Split::Test: return test;
    }
    return train;
  }
};

/// Tasks trained together. `sampling_temperature` is the exponent divisor of
/// the task sampler, unrelated to the task count.
struct TaskSet {
  std::vector<TaskData> tasks;
  double sampling_temperature = 10.0;

  std::vector<std::size_t> num_classes() const {
    std::vector<std::size_t> out;
    for (const auto& t : tasks) out.push_back(t.num_classes);
    return out;
  }
};

/// Every example has the task's length, in-vocabulary tokens and a label
/// below num_classes.
inline void validate(const TaskData& t, std::size_t vocab_size) {
  if (t.num_classes < 2) throw ValueError("task '" + t.name + "': needs at least 2 classes");
  if (t.seq_len == 0) throw ValueError("task '" + t.name + "': seq_len must be positive");
  for (const auto s : {Split::Train, Split::Valid, Split::Test}) {
    const auto& xs = t.split(s);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto& e = xs[i];
      const std::string where = "task '" + t.name + "' " + std::string(to_string(s)) + "[" + std::to_string(i) + "]";
      if (e.tokens.size() != t.seq_len) throw ValueError(where + ": length " + std::to_string(e.tokens.size()));
      if (e.label < 0 || std::size_t(e.label) >= t.num_classes) {
        throw ValueError(where + ": label " + std::to_string(e.label) + " outside " + std::to_string(t.num_classes) +
                         " classes");
      }
      for (const auto id : e.tokens) {
        if (id < 0 || std::size_t(id) >= vocab_size) throw ValueError(where + ": token " + std::to_string(id));
      }
    }
  }
}

/// Rows [begin, begin + n) of a split gathered into a token batch.
inline TokenBatch make_batch(const std::vector<Example>& xs, std::span<const std::size_t> rows,
                             std::vector<std::int32_t>* labels) {
  if (rows.empty()) throw ValueError("make_batch: no rows");
  const std::size_t S = xs.at(rows[0]).tokens.size();
  TokenBatch b{std::vector<std::int32_t>(), rows.size(), S};
  b.ids.reserve(rows.size() * S);
  if (labels) labels->clear();
  for (const auto r : rows) {
    const auto& e = xs.at(r);
    if (e.tokens.size() != S) throw ShapeError("make_batch: ragged sequence lengths");
    b.ids.insert(b.ids.end(), e.tokens.begin(), e.tokens.end());
    if (labels) labels->push_back(e.label);
  }
  return b;
}

// ----------------------------------------------------------------------------
// Synthetic generators
// ----------------------------------------------------------------------------

enum class TaskRule : std::uint8_t { Contains = 0, Parity = 1, CountCompare = 2, Linear = 3 };

inline std::string_view to_string(TaskRule r) {
  switch (r) {
    case TaskRule::Contains: return "contains";
    case TaskRule::Parity: return "parity";
    case TaskRule::CountCompare: return "count_compare";
    case TaskRule::Linear: return "linear";
  }
  return "?";
}

inline TaskRule parse_task_rule(std::string_view s) {
  if (s == "contains") return TaskRule::Contains;
  if (s == "parity") return TaskRule::Parity;
  if (s == "count_compare") return TaskRule::CountCompare;
  if (s == "linear") return TaskRule::Linear;
  throw ValueError("unknown task rule '" + std::string(s) + "'");
}

/// Binary task defined by an exact rule over uniformly random token strings:
///   contains       token a occurs
///   parity         count(a) is odd
///   count_compare  count(a) > count(b); ties are never emitted
///   linear         sum of per-token weights > 0, |mean| >= margin
struct TaskSpec {
  std::string name;
  TaskRule rule = TaskRule::Contains;
  std::size_t vocab_size = 16;
  std::size_t seq_len = 16;
  std::int32_t token_a = 1;
  std::int32_t token_b = 2;
  double margin = 0.1;
  std::size_t n_train = 1000, n_valid = 200, n_test = 200;
  std::uint64_t seed = 0;
};

inline std::vector<double> linear_rule_weights(const TaskSpec& s) {
  Rng rng = Rng::derive(s.seed, "linear-rule");
  std::vector<double> w(s.vocab_size);
  for (auto& x : w) x = rng.normal();
  return w;
}

/// Label under the task's rule, or -1 when the string is excluded (a tie or
/// inside the margin).
inline std::int32_t label_of(const TaskSpec& s, std::span<const std::int32_t> tokens,
                             const std::vector<double>* weights = nullptr) {
  const auto count = [&](std::int32_t t) { return std::count(tokens.begin(), tokens.end(), t); };
  switch (s.rule) {
    case TaskRule::Contains: return count(s.token_a) > 0 ? 1 : 0;
    case TaskRule::Parity: return count(s.token_a) % 2 == 1 ? 1 : 0;
    case TaskRule::CountCompare: {
      const auto a = count(s.token_a), b = count(s.token_b);
      return a == b ? -1 : (a > b ? 1 : 0);
    }
    case TaskRule::Linear: {
      std::vector<double> local;
      if (!weights) local = linear_rule_weights(s);
      const auto& w = weights ? *weights : local;
      double z = 0.0;
      for (const auto t : tokens) z += w.at(std::size_t(t));
      z /= double(tokens.size());
      if (std::abs(z) < s.margin) return -1;
      return z > 0 ? 1 : 0;
    }
  }
  return -1;
}

inline void validate(const TaskSpec& s) {
  const auto in_vocab = [&](std::int32_t t) { return t >= 0 && std::size_t(t) < s.vocab_size; };
  if (s.vocab_size < 2 || s.seq_len == 0) throw ValueError("task spec '" + s.name + "': vocab >= 2 and seq_len > 0");
  if (!in_vocab(s.token_a)) throw ValueError("task spec '" + s.name + "': token_a outside vocabulary");
  if (s.rule == TaskRule::CountCompare && (!in_vocab(s.token_b) || s.token_b == s.token_a)) {
    throw ValueError("task spec '" + s.name + "': token_b must be a different in-vocabulary token");
  }
  if (s.rule == TaskRule::Linear && !(s.margin >= 0.0)) throw ValueError("task spec '" + s.name + "': margin < 0");
  if (s.n_train == 0) throw ValueError("task spec '" + s.name + "': empty training split");
}

/// Class-balanced examples by rejection sampling: a candidate is kept only
/// while its class is under quota.
inline TaskData generate_task(const TaskSpec& s) {
  validate(s);
  const auto weights = linear_rule_weights(s);
  Rng rng = Rng::derive(s.seed, "examples:" + s.name);
  TaskData out;
  out.name = s.name;
  out.num_classes = 2;
  out.seq_len = s.seq_len;
  const auto fill = [&](std::vector<Example>& xs, std::size_t n) {
    std::size_t quota[2] = {n / 2, n - n / 2};
    std::size_t attempts = 0;
    while (xs.size() < n) {
      if (++attempts > 10'000 * (n + 1)) {
        throw ValueError("task spec '" + s.name + "': rule rarely yields one class; cannot balance");
      }
      Example e;
      e.tokens.resize(s.seq_len);
      for (auto& t : e.tokens) t = std::int32_t(rng.below(s.vocab_size));
      e.label = label_of(s, e.tokens, &weights);
      if (e.label < 0 || quota[e.label] == 0) continue;
      --quota[e.label];
      xs.push_back(std::move(e));
    }
  };
  fill(out.train, s.n_train);
  fill(out.valid, s.n_valid);
  fill(out.test, s.n_test);
  return out;
}

/// Four rules over one vocabulary, one seed each.
inline std::vector<TaskSpec> default_suite(std::size_t vocab_size, std::size_t seq_len, std::size_t n_train,
                                           std::uint64_t seed) {
  std::vector<TaskSpec> out;
  const auto base = [&](std::string name, TaskRule r, std::int32_t a, std::int32_t b, std::uint64_t tag) {
    TaskSpec s;
    s.name = std::move(name);
    s.rule = r;
    s.vocab_size = vocab_size;
    s.seq_len = seq_len;
    s.token_a = a;
    s.token_b = b;
    s.n_train = n_train;
    s.n_valid = std::max<std::size_t>(n_train / 5, 2);
    s.n_test = std::max<std::size_t>(n_train / 5, 2);
    s.seed = seed * 16 + tag;
    return s;
  };
  out.push_back(base("contains", TaskRule::Contains, 1, 0, 0));
  out.push_back(base("parity", TaskRule::Parity, 2, 0, 1));
  out.push_back(base("count_compare", TaskRule::CountCompare, 3, 4, 2));
  out.push_back(base("linear", TaskRule::Linear, 0, 0, 3));
  return out;
}

/// Backbone warmup tasks over tokens the default suite does not key on
/// (needs vocab_size >= 10).
inline std::vector<TaskSpec> pretrain_suite(std::size_t vocab_size, std::size_t seq_len, std::size_t n_train,
                                            std::uint64_t seed) {
  if (vocab_size < 10) throw ValueError("pretrain_suite: needs a vocabulary of at least 10 tokens");
  auto out = default_suite(vocab_size, seq_len, n_train, seed);
  const std::int32_t a[] = {5, 6, 7, 9}, b[] = {0, 0, 8, 0};
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].name = "pretrain_" + out[i].name;
    out[i].token_a = a[i];
    out[i].token_b = b[i];
    out[i].n_valid = out[i].n_test = 0;
  }
  return out;
}

/// Two tasks with 10,000 and 100 training examples.
inline std::vector<TaskSpec> imbalanced_suite(std::size_t vocab_size, std::size_t seq_len, std::uint64_t seed) {
  auto suite = default_suite(vocab_size, seq_len, 100, seed);
  std::vector<TaskSpec> out{suite[0], suite[2]};
  out[0].name = "large";
  out[0].n_train = 10'000;
  out[1].name = "small";
  out[1].n_train = 100;
  for (auto& s : out) s.n_valid = s.n_test = 50;
  return out;
}

// ----------------------------------------------------------------------------
// Task sampling
// ----------------------------------------------------------------------------

/// p_t proportional to (N_t / sum N)^(1 / temperature).
inline std::vector<double> sample_task(std::span<const std::size_t> train_sizes, double temperature) {
  if (train_sizes.empty()) throw ValueError("sample_task: no tasks");
  if (!(temperature >= 1.0) || !std::isfinite(temperature)) {
    throw ValueError("sample_task: temperature must be >= 1, got " + std::to_string(temperature));
  }
  double total = 0.0;
  for (const auto n : train_sizes) {
    if (n == 0) throw ValueError("sample_task: task with no training examples");
    total += double(n);
  }
  std::vector<double> p;
  double z = 0.0;
  for (const auto n : train_sizes) z += p.emplace_back(std::pow(double(n) / total, 1.0 / temperature));
  for (auto& x : p) x /= z;
  return p;
}

inline std::vector<double> sample_task(const TaskSet& ts) {
  std::vector<std::size_t> sizes;
  for (const auto& t : ts.tasks) sizes.push_back(t.train.size());
  return sample_task(sizes, ts.sampling_temperature);
}

/// Index drawn from a probability vector.
inline std::size_t draw_categorical(std::span<const double> p, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return p.size() - 1;
}

}  // namespace propetl
