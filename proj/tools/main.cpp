// propetl: train, evaluate, sweep, audit storage and inspect checkpoints.
//
// Exit codes: 0 success, 2 bad configuration, 3 training failure,
// 4 corrupt artifact.

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "propetl/bls.hpp"
#include "propetl/checkpoint.hpp"
#include "propetl/trainer.hpp"
#include "run_spec.hpp"
#include "task_io.hpp"

namespace fs = std::filesystem;
using namespace propetl;
using namespace propetl::cli;
using ojson = nlohmann::ordered_json;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kTraining = 3, kCorrupt = 4 };

// ----------------------------------------------------------------------------
// Run options shared by train / eval / sweep
// ----------------------------------------------------------------------------

struct SpecOptions {
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;  // key, value
};

void add_spec_options(CLI::App* app, SpecOptions& o) {
  app->add_option("--config,-c", o.config, "key = value config file with [sections]");
  app->add_option("--set", o.sets, "override any key: section.key=value (repeatable)");
  for (const auto& k : kKeys) {
    const std::string full = full_name(k);
    app->add_option_function<std::string>(
           flag_for(k), [&o, full](const std::string& v) { o.flags.emplace_back(full, v); },
           std::string(k.help) + " [" + full + "]")
        ->group(k.section)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
}

RawConfig raw_config(const SpecOptions& o) {
  RawConfig raw;
  if (!o.config.empty()) raw.load_file(o.config);
  for (const auto& s : o.sets) raw.set_assignment(s, "--set");
  for (const auto& [full, v] : o.flags) raw.set(full, v, flag_for(*find_key(full)));
  return raw;
}

// ----------------------------------------------------------------------------
// Validation before any side effect
// ----------------------------------------------------------------------------

struct Prepared {
  RawConfig raw;
  RunSpec spec;
  std::vector<TaskData> tasks;                 // selected, in training order
  std::optional<BackboneWeights<float>> loaded;  // from backbone.file
  TaskSet pretrain;
};

std::vector<std::size_t> classes_of(const std::vector<TaskData>& ts) {
  std::vector<std::size_t> out;
  for (const auto& t : ts) out.push_back(t.num_classes);
  return out;
}

/// `multi`: nullopt follows tasks.multi_task.
Prepared prepare(const SpecOptions& o, std::optional<bool> multi = std::nullopt, bool need_backbone_file = false) {
  Prepared p;
  p.raw = raw_config(o);
  p.spec = resolve(p.raw);
  auto& s = p.spec;
  if (multi) s.multi_task = *multi;

  if (!s.backbone_file.empty()) {
    p.loaded = load_backbone(s.backbone_file);
    const auto& lc = p.loaded->config;
    const std::pair<const char*, std::size_t> dims[] = {{"backbone.layers", lc.num_layers}, {"backbone.d", lc.d},
                                                        {"backbone.heads", lc.num_heads},   {"backbone.ffn", lc.ffn_dim},
                                                        {"backbone.vocab", lc.vocab_size},  {"backbone.max_seq", lc.max_seq_len}};
    for (const auto& [key, value] : dims) {
      if (p.raw.is_explicit(key) && p.raw.get(key) != std::to_string(value)) {
        throw ConfigError(p.raw.origin(key) + ": field '" + key + "' = " + p.raw.get(key) + " but " + s.backbone_file +
                          " has " + std::to_string(value));
      }
    }
    s.backbone = lc;
    s.attachment.d = lc.d;
    s.attachment.num_layers = lc.num_layers;
    if (s.seq_len > lc.max_seq_len) throw ConfigError("field 'tasks.seq_len' exceeds the loaded backbone's max_seq");
  } else if (need_backbone_file) {
    throw ConfigError("field 'backbone.file' is required (--backbone PATH)");
  }

  const auto vocab = s.backbone.vocab_size;
  std::vector<TaskData> all;
  if (!s.task_files.empty()) {
    for (const auto& f : s.task_files) all.push_back(read_task(f));
  } else {
    std::vector<TaskSpec> specs;
    try {
      specs = s.suite == "imbalanced" ? imbalanced_suite(vocab, s.seq_len, s.seed)
                                      : default_suite(vocab, s.seq_len, s.n_train, s.seed);
    } catch (const ValueError& e) {
      throw ConfigError(std::string("field 'tasks.suite': ") + e.what());
    }
    for (const auto& sp : specs) all.push_back(generate_task(sp));
  }

  if (s.task_names.empty()) {
    if (s.multi_task) p.tasks = all;
    else p.tasks.push_back(all.front());
  } else {
    for (const auto& name : s.task_names) {
      auto it = std::find_if(all.begin(), all.end(), [&](const TaskData& t) { return t.name == name; });
      if (it == all.end()) {
        std::string avail;
        for (const auto& t : all) avail += (avail.empty() ? "" : ", ") + t.name;
        throw ConfigError("field 'tasks.task': no task '" + name + "' (available: " + avail + ")");
      }
      p.tasks.push_back(*it);
    }
  }
  if (!s.multi_task && p.tasks.size() != 1) {
    throw ConfigError("field 'tasks.task': single-task runs take one task; set tasks.multi_task = true for several");
  }
  for (const auto& t : p.tasks) {
    try {
      validate(t, vocab);
    } catch (const ValueError& e) {
      throw ConfigError(e.what());
    }
    if (t.seq_len > s.backbone.max_seq_len) {
      throw ConfigError("task '" + t.name + "': seq_len " + std::to_string(t.seq_len) + " exceeds backbone.max_seq");
    }
  }
  s.attachment.num_tasks = s.multi_task ? p.tasks.size() : 0;
  s.backbone.num_classes = classes_of(p.tasks);
  try {
    validate(s.attachment);
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }

  if (!p.loaded && s.warmup.steps > 0) {
    try {
      for (const auto& sp : pretrain_suite(vocab, s.seq_len, s.pretrain_examples, s.seed)) {
        p.pretrain.tasks.push_back(generate_task(sp));
      }
    } catch (const ValueError& e) {
      throw ConfigError(std::string("backbone warm-up: ") + e.what() + " (or pass --backbone FILE)");
    }
  }
  if (fs::exists(s.out) && !fs::is_directory(s.out)) {
    throw ConfigError("field 'run.out': '" + s.out + "' exists and is not a directory");
  }
  return p;
}

/// Loaded or freshly warmed-up frozen backbone with heads for the selected tasks.
BackboneWeights<float> obtain_backbone(const Prepared& p) {
  const auto& s = p.spec;
  BackboneWeights<float> w;
  if (p.loaded) {
    w = *p.loaded;
  } else if (s.warmup.steps == 0) {
    w = init_backbone<float>(s.backbone, s.seed);
  } else {
    std::cout << "warming up backbone: " << s.warmup.steps << " steps on " << p.pretrain.tasks.size()
              << " pretraining tasks\n";
    w = warmup_backbone(s.backbone, p.pretrain, s.warmup);
  }
  w.freeze();
  w.reset_heads(classes_of(p.tasks), s.seed);
  return w;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) { return propetl::detail::read_file(path); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

ojson explicit_json(const RawConfig& raw) {
  ojson j = ojson::object();
  for (const auto& k : kKeys)
    if (raw.is_explicit(full_name(k))) j[full_name(k)] = raw.origin(full_name(k));
  return j;
}

ojson eval_json(const std::string& task, Split split, const EvalResult& r) {
  return {{"task", task}, {"split", to_string(split)}, {"accuracy", r.accuracy}, {"loss", r.loss}, {"examples", r.examples}};
}

// ----------------------------------------------------------------------------
// train
// ----------------------------------------------------------------------------

int cmd_train(const SpecOptions& o) {
  const Prepared p = prepare(o);
  const auto& s = p.spec;
  const fs::path out(s.out);
  fs::create_directories(out);

  auto w = obtain_backbone(p);
  save_backbone(w, out / "backbone.ppbb");
  auto a = make_attachment<float>(s.attachment, s.seed);

  MetricsCsv csv((out / "metrics.csv").string());
  auto sink = [&](const MetricRow& r) {
    csv.write(r);
    if (r.split == Split::Valid) {
      std::cout << "step " << r.step << "  " << r.task << "  valid acc " << std::fixed << std::setprecision(4)
                << r.accuracy << "  loss " << r.loss << std::defaultfloat << '\n';
    }
  };

  TrainResult result;
  if (s.multi_task) {
    TaskSet ts;
    ts.tasks = p.tasks;
    ts.sampling_temperature = s.temperature;
    result = train_multi_task(w, a, ts, s.train, sink);
  } else {
    result = train_single_task(w, a, p.tasks.front(), s.train, 0, sink);
  }

  const fs::path ckpt = out / "checkpoint.pptl";
  save_checkpoint(a, ckpt, w.heads);
  const auto bytes = read_bytes(ckpt);
  const auto stored_bits = payload_bits(parse_container(bytes, kCheckpointMagic));

  ojson evals = ojson::array();
  for (std::size_t t = 0; t < p.tasks.size(); ++t) {
    const auto& task = p.tasks[t];
    if (task.test.empty()) continue;
    const auto r = evaluate(w, &a, task, Split::Test, t, s.train.eval_batch);
    evals.push_back(eval_json(task.name, Split::Test, r));
    std::cout << task.name << "  test acc " << std::fixed << std::setprecision(4) << r.accuracy << "  loss "
              << r.loss << std::defaultfloat << '\n';
  }

  ojson task_names = ojson::array();
  for (const auto& t : p.tasks) task_names.push_back(t.name);
  ojson m;
  m["tool"] = "propetl";
  m["command"] = "train";
  m["config"] = p.raw.to_json();
  m["explicit"] = explicit_json(p.raw);
  m["tasks"] = task_names;
  m["artifacts"] = {{"checkpoint", "checkpoint.pptl"}, {"metrics", "metrics.csv"}, {"backbone", "backbone.ppbb"},
                    {"config", "resolved.cfg"}};
  m["bls_bits"] = bls_for(a.config);
  m["payload_bits"] = stored_bits;
  m["best_step"] = result.best_step;
  m["best_valid_accuracy"] = result.best_valid_accuracy;
  m["test"] = evals;
  write_text(out / "manifest.json", m.dump(2) + "\n");
  write_text(out / "resolved.cfg", p.raw.to_text());
  std::cout << "wrote " << ckpt.string() << " (" << stored_bits << " payload bits)\n";
  return kOk;
}

// ----------------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------------

int cmd_eval(const SpecOptions& o, const std::string& checkpoint, const std::string& split_name) {
  Split split;
  try {
    split = parse_split(split_name);
  } catch (const ValueError& e) {
    throw ConfigError(std::string("--split: ") + e.what());
  }
  const auto loaded = load_checkpoint(checkpoint);
  const auto& c = loaded.attachment.config;
  const Prepared p = prepare(o, c.num_tasks > 0, true);
  auto w = *p.loaded;
  if (c.d != w.config.d || c.num_layers != w.config.num_layers) {
    throw ConfigError("checkpoint d/L (" + std::to_string(c.d) + "/" + std::to_string(c.num_layers) +
                      ") do not match the backbone (" + std::to_string(w.config.d) + "/" +
                      std::to_string(w.config.num_layers) + ")");
  }
  if (loaded.heads.size() != p.tasks.size() || (c.num_tasks > 0 && c.num_tasks != p.tasks.size())) {
    throw ConfigError("checkpoint has " + std::to_string(loaded.heads.size()) + " heads for " +
                      std::to_string(p.tasks.size()) + " selected tasks");
  }
  w.heads = loaded.heads;
  auto a = loaded.attachment;
  std::cout << std::left << std::setw(16) << "task" << std::setw(8) << "split" << std::right << std::setw(10)
            << "accuracy" << std::setw(12) << "loss" << std::setw(10) << "examples" << '\n';
  for (std::size_t t = 0; t < p.tasks.size(); ++t) {
    const auto r = evaluate(w, &a, p.tasks[t], split, t, p.spec.train.eval_batch);
    std::cout << std::left << std::setw(16) << p.tasks[t].name << std::setw(8) << to_string(split) << std::right
              << std::fixed << std::setprecision(4) << std::setw(10) << r.accuracy << std::setw(12) << r.loss
              << std::defaultfloat << std::setw(10) << r.examples << '\n';
  }
  return kOk;
}

// ----------------------------------------------------------------------------
// sweep
// ----------------------------------------------------------------------------

std::vector<std::pair<std::string, AttachmentConfig>> sweep_configs(const RunSpec& s) {
  const auto& base = s.attachment;
  const auto fail = [](const std::string& why) -> ConfigError { return ConfigError("field 'run.grid': " + why); };
  if (s.axis == "sparsity") {
    if (!base.has_masks()) throw ConfigError("field 'run.axis': a sparsity sweep needs mode propetl or only_mask");
    std::vector<double> ks;
    for (const auto& g : s.grid.empty() ? std::vector<std::string>{"0.1", "0.3", "0.5", "0.7", "0.9", "1.0"} : s.grid) {
      try {
        std::size_t pos = 0;
        ks.push_back(std::stod(g, &pos));
        if (pos != g.size()) throw std::invalid_argument(g);
        Sparsity::from_double(ks.back());
      } catch (const std::exception&) {
        throw fail("'" + g + "' is not a sparsity in (0, 1]");
      }
    }
    return sparsity_grid(base, ks);
  }
  if (s.axis == "size") {
    std::vector<std::size_t> sizes;
    for (const auto& g : s.grid.empty() ? std::vector<std::string>{"4", "8", "16", "32", "64"} : s.grid) {
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(g, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != g.size() || v == 0 || g.front() == '-') throw fail("'" + g + "' is not a positive size");
      sizes.push_back(static_cast<std::size_t>(v));
    }
    try {
      return size_grid(base, sizes);
    } catch (const ValueError& e) {
      throw fail(e.what());
    }
  }
  std::vector<std::string> arms = s.grid;
  if (arms.empty()) arms.assign(std::begin(kAblationArms), std::end(kAblationArms));
  std::vector<std::pair<std::string, AttachmentConfig>> out;
  try {
    for (const auto& plan : plan_ablation(base, arms)) out.emplace_back(plan.name, plan.config);
  } catch (const ValueError& e) {
    throw fail(e.what());
  }
  return out;
}

int cmd_sweep(const SpecOptions& o) {
  const Prepared p = prepare(o, false);
  const auto& s = p.spec;
  const auto configs = sweep_configs(s);
  const fs::path out(s.out);
  fs::create_directories(out);

  const auto w = obtain_backbone(p);
  const auto& task = p.tasks.front();
  std::ofstream csv(out / "sweep.csv", std::ios::trunc);
  if (!csv) throw Error("cannot write '" + (out / "sweep.csv").string() + "'");
  csv << "# propetl-sweep v1\n" << "kind,point,seed,accuracy,accuracy_sd,loss,bls_bits\n" << std::setprecision(9);

  std::map<std::string, std::vector<double>> losses;
  const auto on_run = [&](const RunSummary& r, std::uint64_t seed, const EvalResult& e) {
    losses[r.name].push_back(e.loss);
    csv << "run," << r.name << ',' << seed << ',' << e.accuracy << ",," << e.loss << ',' << r.bls << '\n';
    csv.flush();
    std::cout << r.name << "  seed " << seed << "  acc " << std::fixed << std::setprecision(4) << e.accuracy
              << std::defaultfloat << '\n';
  };
  const auto summaries = run_grid(w, configs, task, s.train, s.seeds, on_run);

  ojson rows = ojson::array();
  std::cout << '\n' << std::left << std::setw(22) << "point" << std::right << std::setw(20) << "accuracy (mean±sd)"
            << std::setw(14) << "bls bits" << '\n';
  for (const auto& r : summaries) {
    const double mean_loss = propetl::detail::mean_of(losses[r.name]);
    csv << "summary," << r.name << ",," << r.mean() << ',' << r.sd() << ',' << mean_loss << ',' << r.bls << '\n';
    std::ostringstream ms;
    ms << std::fixed << std::setprecision(4) << r.mean() << "±" << r.sd();
    std::cout << std::left << std::setw(22) << r.name << std::right << std::setw(21) << ms.str() << std::setw(14)
              << r.bls << '\n';
    rows.push_back({{"point", r.name}, {"mean", r.mean()}, {"sd", r.sd()}, {"accuracies", r.accuracies}, {"bls_bits", r.bls}});
  }

  ojson m;
  m["tool"] = "propetl";
  m["command"] = "sweep";
  m["config"] = p.raw.to_json();
  m["explicit"] = explicit_json(p.raw);
  m["task"] = task.name;
  m["artifacts"] = {{"sweep", "sweep.csv"}, {"backbone", "backbone.ppbb"}, {"config", "resolved.cfg"}};
  m["summary"] = rows;
  save_backbone(const_cast<BackboneWeights<float>&>(w), out / "backbone.ppbb");
  write_text(out / "manifest.json", m.dump(2) + "\n");
  write_text(out / "resolved.cfg", p.raw.to_text());
  return kOk;
}

// ----------------------------------------------------------------------------
// bls
// ----------------------------------------------------------------------------

struct BlsOptions {
  std::string variant = "adapter", mode = "propetl";
  std::uint64_t d = 0, size = 0, layers = 0, tasks = 0, full_params = 0;
  std::optional<double> k;
  bool literal_prefix = false;
};

int cmd_bls(const BlsOptions& o) {
  Variant v;
  Mode mode;
  try {
    v = parse_variant(o.variant);
    mode = parse_mode(o.mode);
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  if (o.d == 0 || o.size == 0 || o.layers == 0) throw ConfigError("bls: --d, --bn (or --l) and --L must be positive");
  if (mode == Mode::OnlyShare && o.k) throw ConfigError("--k has no meaning with mode only_share");
  if (o.tasks > 0 && mode != Mode::Propetl) throw ConfigError("--T applies to mode propetl only");
  Sparsity k(1, 2);
  if (o.k) {
    try {
      k = Sparsity::from_double(*o.k);
    } catch (const ValueError& e) {
      throw ConfigError(std::string("--k: ") + e.what());
    }
  }

  BlsReport report;
  switch (mode) {
    case Mode::Propetl:
    case Mode::RandomMask: report = bls_report_propetl(v, o.d, o.size, o.layers, o.tasks); break;
    case Mode::OnlyShare: report.groups.push_back({"prototype", module_params(v, o.d, o.size), 32}); break;
    case Mode::OnlyMask: {
      const std::uint32_t bits = (v == Variant::Prefix && o.literal_prefix) ? 1 : 32;
      report.groups.push_back({"pruned modules", bls_only_mask(v, o.d, o.size, o.layers, k, o.literal_prefix) / bits, bits});
      break;
    }
  }
  report.baseline_bits = bls_vanilla(v, o.d, o.size, o.layers);
  report.baseline_name = "vanilla " + std::string(to_string(v));
  if (o.full_params > 0) report.full_model_bits = propetl::detail::checked_mul(o.full_params, 32);
  std::cout << to_string(v) << ' ' << to_string(mode) << "  d=" << o.d << (v == Variant::Prefix ? " l=" : " bn=")
            << o.size << " L=" << o.layers;
  if (o.tasks > 0) std::cout << " T=" << o.tasks;
  if (mode == Mode::OnlyMask) std::cout << " k=" << k.value();
  std::cout << "\n\n" << report.to_text();
  return kOk;
}

// ----------------------------------------------------------------------------
// inspect
// ----------------------------------------------------------------------------

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (const float x : t.values()) s += double(x) * double(x);
  return std::sqrt(s);
}

int cmd_inspect(const std::string& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("inspect: cannot read '" + path + "'");
  const auto bytes = read_bytes(path);
  if (bytes.size() < 4) throw FormatError("'" + path + "': truncated before the magic");
  const bool is_backbone = std::memcmp(bytes.data(), kBackboneMagic, 4) == 0;
  const auto box = parse_container(bytes, is_backbone ? kBackboneMagic : kCheckpointMagic);
  const auto& h = box.header;

  std::cout << "file      " << path << " (" << bytes.size() << " bytes)\n"
            << "kind      " << (is_backbone ? "backbone" : "checkpoint") << " v" << h.version << '\n'
            << "d         " << h.d << '\n'
            << "layers    " << h.layers << '\n';
  if (!is_backbone) {
    std::cout << "variant   " << to_string(h.variant) << '\n'
              << "size      " << h.size << '\n'
              << "tasks     " << h.tasks << '\n'
              << "k         " << h.k.numerator() << '/' << h.k.denominator() << '\n';
  } else {
    std::cout << "heads     " << h.tasks << '\n';
  }

  std::cout << '\n' << std::left << std::setw(28) << "section" << std::setw(8) << "kind" << std::setw(14) << "shape"
            << std::right << std::setw(10) << "bytes" << std::setw(12) << "crc" << std::setw(12) << "norm" << '\n';
  for (const auto& s : box.sections) {
    std::cout << std::left << std::setw(28) << s.name << std::setw(8) << to_string(s.kind) << std::setw(14)
              << (s.shape.empty() ? std::string("-") : shape_str(s.shape)) << std::right << std::setw(10)
              << s.payload.size() << "  0x" << std::hex << std::setw(8) << std::setfill('0') << s.crc << std::dec
              << std::setfill(' ');
    if (s.kind == SectionKind::Tensor) {
      std::cout << std::setw(12) << std::setprecision(6) << l2_norm(propetl::detail::tensor_from(s));
    }
    std::cout << '\n';
  }

  if (is_backbone) {
    decode_backbone(bytes);
    return kOk;
  }
  const auto loaded = decode_checkpoint(bytes);
  const auto& a = loaded.attachment;
  const auto& c = a.config;
  std::cout << "\nmode      " << to_string(c.mode) << '\n' << "payload   " << loaded.payload_bits << " bits\n";
  if (!c.stores_masks()) return kOk;

  const auto targets = a.targets();
  std::cout << '\n' << std::left << std::setw(28) << "mask" << std::right << std::setw(10) << "ones" << std::setw(10)
            << "n" << std::setw(12) << "density" << std::setw(12) << "expected" << '\n';
  const auto row = [&](const std::string& name, const BinaryMask& m, Sparsity k) {
    const auto n = m.numel();
    std::cout << std::left << std::setw(28) << name << std::right << std::setw(10) << m.popcount() << std::setw(10)
              << n << std::fixed << std::setprecision(6) << std::setw(12) << double(m.popcount()) / double(n)
              << std::setw(12) << double(k.ones(n)) / double(n) << std::defaultfloat << '\n';
  };
  for (std::size_t l = 0; l < a.layer_masks.size(); ++l)
    for (std::size_t i = 0; i < targets.size(); ++i)
      row("layer" + std::to_string(l) + "/" + targets[i].name, a.layer_masks[l][i], c.k);
  for (std::size_t t = 0; t < a.task_masks.size(); ++t)
    for (std::size_t i = 0; i < targets.size(); ++i)
      row("task" + std::to_string(t) + "/" + targets[i].name, a.task_masks[t][i], c.task_k);

  if (!a.task_masks.empty()) {
    std::cout << "\nhybrid (" << to_string(c.combine) << ") density per layer x task\n" << std::left << std::setw(8)
              << "layer" << std::right;
    for (std::size_t t = 0; t < a.task_masks.size(); ++t) std::cout << std::setw(10) << ("task" + std::to_string(t));
    std::cout << '\n';
    std::vector<std::vector<double>> per_task;
    for (std::size_t t = 0; t < a.task_masks.size(); ++t) per_task.push_back(mask_densities(a, t));
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      std::cout << std::left << std::setw(8) << l << std::right << std::fixed << std::setprecision(4);
      for (const auto& d : per_task) std::cout << std::setw(10) << d[l];
      std::cout << std::defaultfloat << '\n';
    }
  }
  return kOk;
}

// ----------------------------------------------------------------------------
// gen-tasks
// ----------------------------------------------------------------------------

struct GenOptions {
  std::string suite = "default", out = "tasks";
  std::uint64_t seed = 0;
  std::size_t vocab = 16, seq_len = 16, n_train = 1000;
};

int cmd_gen_tasks(const GenOptions& o) {
  std::vector<TaskSpec> specs;
  try {
    if (o.suite == "default") specs = default_suite(o.vocab, o.seq_len, o.n_train, o.seed);
    else if (o.suite == "imbalanced") specs = imbalanced_suite(o.vocab, o.seq_len, o.seed);
    else if (o.suite == "pretrain") specs = pretrain_suite(o.vocab, o.seq_len, o.n_train, o.seed);
    else throw ValueError("--suite: expected default, imbalanced or pretrain");
    for (const auto& s : specs) validate(s);
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
  fs::create_directories(o.out);
  for (const auto& s : specs) {
    const auto t = generate_task(s);
    const fs::path file = fs::path(o.out) / (t.name + ".json");
    write_task(t, &s, file);
    std::cout << file.string() << "  train " << t.train.size() << "  valid " << t.valid.size() << "  test "
              << t.test.size() << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"propetl: shared prototype PETL with binary masks"};
  app.require_subcommand(1);

  SpecOptions train_o, eval_o, sweep_o;
  auto* train = app.add_subcommand("train", "train one attachment; writes checkpoint, metrics, manifest");
  add_spec_options(train, train_o);

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a task split");
  add_spec_options(eval, eval_o);
  std::string checkpoint, split = "test";
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--split", split, "train | valid | test");

  auto* sweep = app.add_subcommand("sweep", "one run per grid point and seed; mean±sd per point");
  add_spec_options(sweep, sweep_o);

  BlsOptions bo;
  auto* bls_cmd = app.add_subcommand("bls", "bit-level storage report");
  bls_cmd->add_option("--variant", bo.variant, "adapter | lora | prefix");
  bls_cmd->add_option("--mode", bo.mode, "propetl | only_share | only_mask | random_mask");
  bls_cmd->add_option("--d", bo.d, "hidden width")->required();
  auto* bn = bls_cmd->add_option("--bn", bo.size, "bottleneck dimension");
  auto* len = bls_cmd->add_option("--l", bo.size, "prefix length");
  bn->excludes(len);
  bls_cmd->add_option("--L", bo.layers, "layers")->required();
  bls_cmd->add_option("--T", bo.tasks, "tasks (task masks)");
  bls_cmd->add_option("--k", bo.k, "only_mask sparsity");
  bls_cmd->add_option("--full-params", bo.full_params, "full-model parameter count (32-bit)");
  bls_cmd->add_flag("--literal-prefix", bo.literal_prefix, "prefix only_mask without the factor 32");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "dump a checkpoint or backbone file");
  inspect->add_option("path", inspect_path, "file to inspect")->required();

  GenOptions go;
  auto* gen = app.add_subcommand("gen-tasks", "write synthetic task files");
  gen->add_option("--suite", go.suite, "default | imbalanced | pretrain");
  gen->add_option("--seed", go.seed, "generator seed");
  gen->add_option("--out", go.out, "output directory");
  gen->add_option("--vocab", go.vocab, "vocabulary size");
  gen->add_option("--seq-len", go.seq_len, "sequence length");
  gen->add_option("--n-train", go.n_train, "training examples per task");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(train_o);
    if (*eval) return cmd_eval(eval_o, checkpoint, split);
    if (*sweep) return cmd_sweep(sweep_o);
    if (*bls_cmd) {
      if (bo.size == 0 && bn->count() == 0 && len->count() == 0) throw ConfigError("bls: --bn or --l is required");
      return cmd_bls(bo);
    }
    if (*inspect) return cmd_inspect(inspect_path);
    if (*gen) return cmd_gen_tasks(go);
  } catch (const ConfigError& e) {
    std::cerr << "propetl: config error: " << e.what() << '\n';
    return kConfig;
  } catch (const TrainingError& e) {
    std::cerr << "propetl: training failed: " << e.what() << '\n';
    return kTraining;
  } catch (const FormatError& e) {
    std::cerr << "propetl: corrupt artifact: " << e.what() << '\n';
    return kCorrupt;
  } catch (const ValueError& e) {
    std::cerr << "propetl: invalid value: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "propetl: " << e.what() << '\n';
    return 1;
  }
  return kOk;
}
