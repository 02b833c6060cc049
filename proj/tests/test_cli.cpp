#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "propetl/bls.hpp"
#include "propetl/checkpoint.hpp"
#include "propetl/tasks.hpp"

using namespace propetl;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "propetl_cli_test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Result run(const std::string& args, const fs::path& dir) {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = std::string(PROPETL_BIN) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// A backbone small enough for sub-second runs.
const std::string kTiny =
    "--layers 2 --d 16 --heads 2 --ffn 32 --vocab 10 --max-seq 8 --seq-len 8 --warmup-steps 20 "
    "--pretrain-examples 100 --n-train 100 --steps 20 --batch 8 --eval-every 10 ";

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

/// Whitespace-separated fields of every line that starts with `prefix`.
std::vector<std::vector<std::string>> table_lines(const std::string& text, const std::string& prefix) {
  std::vector<std::vector<std::string>> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(prefix, 0) != 0) continue;
    std::istringstream ls(line);
    std::vector<std::string> f;
    std::string w;
    while (ls >> w) f.push_back(w);
    out.push_back(f);
  }
  return out;
}

}  // namespace

// ----------------------------------------------------------------------------
// train
// ----------------------------------------------------------------------------

TEST(CliTrain, ArtifactsAndBitIdenticalRerun) {
  const auto dir = scratch("train");
  const std::string args = "train " + kTiny + "--variant adapter --mode propetl --k 0.5 --seed 7 --task parity --out ";
  const auto a = run(args + (dir / "a").string(), dir);
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = run(args + (dir / "b").string(), dir);
  ASSERT_EQ(b.code, 0) << b.err;
  for (const char* f : {"checkpoint.pptl", "metrics.csv", "manifest.json", "backbone.ppbb", "resolved.cfg"}) {
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  }
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.pptl"), slurp(dir / "b" / "checkpoint.pptl"));
  EXPECT_EQ(slurp(dir / "a" / "backbone.ppbb"), slurp(dir / "b" / "backbone.ppbb"));

  // Every metric except wall time repeats.
  auto ra = csv_rows(dir / "a" / "metrics.csv"), rb = csv_rows(dir / "b" / "metrics.csv");
  ASSERT_EQ(ra.size(), rb.size());
  ASSERT_GT(ra.size(), 2u);
  EXPECT_EQ(ra[0], (std::vector<std::string>{"step", "task", "split", "loss", "accuracy", "mask_density", "wall_ms"}));
  for (std::size_t i = 1; i < ra.size(); ++i) {
    ra[i].pop_back();
    rb[i].pop_back();
    EXPECT_EQ(ra[i], rb[i]) << i;
  }
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv").rfind("# propetl-metrics v1\n", 0), 0u);

  const auto m = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  EXPECT_EQ(m["config"]["attachment"]["k"], "0.5");
  EXPECT_EQ(m["config"]["run"]["seed"], "7");
  EXPECT_EQ(m["explicit"]["attachment.k"], "--k");
  // d = 16, bn = 16, L = 2: 32 (2*16*16 + 16 + 16) + 2*16*16*2.
  EXPECT_EQ(m["bls_bits"], 32u * (512 + 32) + 1024u);
  EXPECT_EQ(m["payload_bits"], m["bls_bits"]);
}

TEST(CliTrain, ResolvedConfigReproducesTheRun) {
  const auto dir = scratch("resolved");
  const auto a = run("train " + kTiny + "--seed 3 --task contains --out " + (dir / "a").string(), dir);
  ASSERT_EQ(a.code, 0) << a.err;
  const auto b = run("--config " + (dir / "a" / "resolved.cfg").string() + " --out " + (dir / "b").string(), dir);
  ASSERT_EQ(b.code, 2) << "a verb is required";
  const auto c = run("train --config " + (dir / "a" / "resolved.cfg").string() + " --out " + (dir / "b").string(), dir);
  ASSERT_EQ(c.code, 0) << c.err;
  EXPECT_EQ(slurp(dir / "a" / "checkpoint.pptl"), slurp(dir / "b" / "checkpoint.pptl"));
}

TEST(CliTrain, OnlyShareWithExplicitKRejectedWithoutSideEffects) {
  const auto dir = scratch("onlyshare");
  const auto r = run("train " + kTiny + "--mode only_share --k 0.5 --out " + (dir / "run").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("attachment.k"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "run"));
  const auto ok = run("train " + kTiny + "--mode only_share --out " + (dir / "run").string(), dir);
  EXPECT_EQ(ok.code, 0) << ok.err;
}

TEST(CliTrain, BadConfigNamesLineAndField) {
  const auto dir = scratch("badcfg");
  {
    std::ofstream f(dir / "bad.cfg");
    f << "# comment\n[train]\nsteps = 10\nlambda_m = fast\n";
  }
  auto r = run("train --config " + (dir / "bad.cfg").string() + " --out " + (dir / "run").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.cfg:4"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("train.lambda_m"), std::string::npos) << r.err;
  {
    std::ofstream f(dir / "unknown.cfg");
    f << "[attachment]\nsparsity = 0.5\n";
  }
  r = run("train --config " + (dir / "unknown.cfg").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown.cfg:2"), std::string::npos) << r.err;
  r = run("train " + kTiny + "--k 1.5 --out " + (dir / "run").string(), dir);
  EXPECT_EQ(r.code, 2);
  r = run("train " + kTiny + "--set attachment.nope=1", dir);
  EXPECT_EQ(r.code, 2);
  r = run("train " + kTiny + "--task nosuchtask --out " + (dir / "run").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("available"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "run"));
}

TEST(CliTrain, DivergenceExitsThree) {
  const auto dir = scratch("diverge");
  const auto r = run("train " + kTiny + "--optimizer sgd --lambda-head 1e38 --out " + (dir / "run").string(), dir);
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("step"), std::string::npos) << r.err;
}

TEST(CliTrain, ZeroMaskRateKeepsSeededTopK) {
  const auto dir = scratch("lm0");
  const auto r = run("train " + kTiny + "--lambda-m 0 --k 0.3 --seed 11 --out " + (dir / "run").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto loaded = load_checkpoint(dir / "run" / "checkpoint.pptl");
  const auto& c = loaded.attachment.config;
  const auto initial = make_attachment<float>(c, 11);
  // Independent oracle: sort indices by |score| descending, lower index first on ties.
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    for (std::size_t i = 0; i < initial.layer_scores[l].size(); ++i) {
      const auto& s = initial.layer_scores[l][i].scores.value;
      std::vector<std::size_t> idx(s.numel());
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](auto x, auto y) { return std::abs(s[x]) > std::abs(s[y]); });
      const auto keep = static_cast<std::size_t>(std::floor(0.3 * double(s.numel()) + 0.5));
      std::vector<std::uint8_t> want(s.numel(), 0);
      for (std::size_t j = 0; j < keep; ++j) want[idx[j]] = 1;
      EXPECT_EQ(loaded.attachment.layer_masks[l][i].bits, want) << l << "/" << i;
    }
  }
}

// ----------------------------------------------------------------------------
// eval / inspect
// ----------------------------------------------------------------------------

TEST(CliEval, MatchesTrainingReport) {
  const auto dir = scratch("eval");
  const auto run_dir = dir / "run";
  ASSERT_EQ(run("train " + kTiny + "--seed 5 --task linear --out " + run_dir.string(), dir).code, 0);
  const auto r = run("eval --config " + (run_dir / "resolved.cfg").string() + " --backbone " +
                         (run_dir / "backbone.ppbb").string() + " --checkpoint " + (run_dir / "checkpoint.pptl").string(),
                     dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = nlohmann::json::parse(slurp(run_dir / "manifest.json"));
  const auto rows = table_lines(r.out, "linear");
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_NEAR(std::stod(rows[0][2]), m["test"][0]["accuracy"].get<double>(), 5e-5);
}

TEST(CliInspect, LayerMaskDensitiesAreExactTopK) {
  const auto dir = scratch("inspect");
  ASSERT_EQ(run("train " + kTiny + "--k 0.3 --size 12 --out " + (dir / "run").string(), dir).code, 0);
  const auto before = slurp(dir / "run" / "checkpoint.pptl");
  const auto r = run("inspect " + (dir / "run" / "checkpoint.pptl").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "run" / "checkpoint.pptl"), before);
  const auto rows = table_lines(r.out, "layer");
  ASSERT_EQ(rows.size(), 5u);  // header + 2 layers x 2 targets
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto ones = std::stoull(rows[i][1]), n = std::stoull(rows[i][2]);
    EXPECT_EQ(n, 16u * 12u);
    EXPECT_EQ(ones, static_cast<unsigned long long>(std::floor(0.3 * double(n) + 0.5)));  // 57.6 -> 58
  }
  EXPECT_NE(r.out.find("proto/w_down"), std::string::npos);
  EXPECT_NE(r.out.find("crc"), std::string::npos);
}

TEST(CliInspect, HybridDensityNearFiftyOnePercentAtInit) {
  const auto dir = scratch("hybrid");
  const auto r0 = run("train " + kTiny +
                          "--multi-task true --k 0.3 --task-k 0.3 --size 64 --lambda-m 0 --steps 1 --out " +
                          (dir / "run").string(),
                      dir);
  ASSERT_EQ(r0.code, 0) << r0.err;
  const auto r = run("inspect " + (dir / "run" / "checkpoint.pptl").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto pos = r.out.find("hybrid (or)");
  ASSERT_NE(pos, std::string::npos) << r.out;
  std::istringstream in(r.out.substr(pos));
  std::string line;
  std::getline(in, line);
  std::getline(in, line);  // column header
  double sum = 0.0;
  std::size_t cells = 0;
  while (std::getline(in, line) && !line.empty()) {
    std::istringstream ls(line);
    std::string layer;
    ls >> layer;
    for (double v; ls >> v; ++cells) sum += v;
  }
  EXPECT_EQ(cells, 2u * 4u);  // 2 layers x 4 default-suite tasks
  // 1 - 0.7^2 = 0.51; each cell averages 2 x 64 x 16 entries.
  EXPECT_NEAR(sum / double(cells), 0.51, 0.02);
}

TEST(CliInspect, CorruptFilesExitFour) {
  const auto dir = scratch("corrupt");
  ASSERT_EQ(run("train " + kTiny + "--out " + (dir / "run").string(), dir).code, 0);
  const auto bytes = slurp(dir / "run" / "checkpoint.pptl");
  {
    std::ofstream f(dir / "trunc.pptl", std::ios::binary);
    f << bytes.substr(0, bytes.size() / 2);
  }
  auto r = run("inspect " + (dir / "trunc.pptl").string(), dir);
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("truncated"), std::string::npos) << r.err;
  {
    auto flipped = bytes;
    flipped[flipped.size() / 2] ^= 0x40;
    std::ofstream f(dir / "flip.pptl", std::ios::binary);
    f << flipped;
  }
  r = run("inspect " + (dir / "flip.pptl").string(), dir);
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("CRC"), std::string::npos) << r.err;
  r = run("inspect " + (dir / "run" / "backbone.ppbb").string(), dir);
  EXPECT_EQ(r.code, 0) << r.err;
}

// ----------------------------------------------------------------------------
// bls
// ----------------------------------------------------------------------------

namespace {

std::uint64_t total_of(const std::string& text) {
  const auto rows = table_lines(text, "total");
  return rows.empty() ? 0 : std::stoull(rows[0][1]);
}

}  // namespace

TEST(CliBls, AdapterBaseReport) {
  const auto dir = scratch("bls");
  const auto r = run("bls --variant adapter --d 768 --bn 64 --L 12 --full-params 125000000", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(total_of(r.out), 4'352'000u);
  EXPECT_NE(r.out.find("0.1088"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("38068224"), std::string::npos) << r.out;
}

TEST(CliBls, LoraAndOnlyMask) {
  const auto dir = scratch("bls2");
  auto r = run("bls --variant lora --d 768 --bn 32 --L 12", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  // 32 * 4 * 32 * 768 + 4 * 32 * 768 * 12
  EXPECT_EQ(total_of(r.out), 32ull * 4 * 32 * 768 + 4ull * 32 * 768 * 12);
  r = run("bls --mode only-mask --k 0.5 --d 768 --bn 64 --L 12", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  // 32 (2 * round(0.5 * 64 * 768) + 64 + 768) * 12
  EXPECT_EQ(total_of(r.out), 32ull * (2 * 24576 + 64 + 768) * 12);
  EXPECT_EQ(run("bls --d 0 --bn 64 --L 12", dir).code, 2);
  EXPECT_EQ(run("bls --d 768 --L 12", dir).code, 2);
  EXPECT_EQ(run("bls --d 768 --bn 64 --L 12 --variant mlp", dir).code, 2);
}

// ----------------------------------------------------------------------------
// sweep
// ----------------------------------------------------------------------------

TEST(CliSweep, SparsityGridBookkeeping) {
  const auto dir = scratch("sweep");
  const auto r = run("sweep " + kTiny + "--steps 4 --seeds 1,2,3,4,5 --out " + (dir / "s").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto text = slurp(dir / "s" / "sweep.csv");
  EXPECT_EQ(text.rfind("# propetl-sweep v1\n", 0), 0u);
  const auto rows = csv_rows(dir / "s" / "sweep.csv");
  std::size_t runs = 0, summaries = 0;
  std::map<std::string, std::vector<double>> acc;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i][0] == "run") ++runs, acc[rows[i][1]].push_back(std::stod(rows[i][3]));
    if (rows[i][0] == "summary") {
      ++summaries;
      const auto& xs = acc[rows[i][1]];
      ASSERT_EQ(xs.size(), 5u);
      const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / 5.0;
      double v = 0.0;
      for (const double x : xs) v += (x - m) * (x - m);
      EXPECT_NEAR(std::stod(rows[i][3]), m, 1e-8);
      EXPECT_NEAR(std::stod(rows[i][4]), std::sqrt(v / 4.0), 1e-8);
    }
  }
  EXPECT_EQ(runs, 30u);
  EXPECT_EQ(summaries, 6u);
}

TEST(CliSweep, SizeGridStorageIncreases) {
  const auto dir = scratch("sweep_size");
  const auto r = run("sweep " + kTiny + "--warmup-steps 0 --steps 2 --seeds 1 --axis size --grid 4,8,16,32 --out " +
                         (dir / "s").string(),
                     dir);
  ASSERT_EQ(r.code, 0) << r.err;
  std::uint64_t prev = 0;
  std::size_t n = 0;
  for (const auto& row : csv_rows(dir / "s" / "sweep.csv")) {
    if (row[0] != "summary") continue;
    const auto bits = std::stoull(row[6]);
    const auto size = std::stoull(row[1].substr(5));
    EXPECT_EQ(bits, bls_propetl(Variant::Adapter, 16, size, 2));
    EXPECT_GT(bits, prev);
    prev = bits;
    ++n;
  }
  EXPECT_EQ(n, 4u);
  EXPECT_EQ(run("sweep " + kTiny + "--axis size --grid 4,zero --out " + (dir / "t").string(), dir).code, 2);
  EXPECT_FALSE(fs::exists(dir / "t"));
}

// ----------------------------------------------------------------------------
// gen-tasks
// ----------------------------------------------------------------------------

TEST(CliGenTasks, DeterministicAndRederivable) {
  const auto dir = scratch("gen");
  ASSERT_EQ(run("gen-tasks --seed 1 --n-train 300 --out " + (dir / "a").string(), dir).code, 0);
  ASSERT_EQ(run("gen-tasks --seed 1 --n-train 300 --out " + (dir / "b").string(), dir).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename()));
    const auto j = nlohmann::json::parse(slurp(e.path()));
    TaskSpec s;
    s.rule = parse_task_rule(j["rule"]["rule"].get<std::string>());
    s.vocab_size = j["rule"]["vocab_size"];
    s.token_a = j["rule"]["token_a"];
    s.token_b = j["rule"]["token_b"];
    s.margin = j["rule"]["margin"];
    s.seed = j["rule"]["seed"];
    for (const char* split : {"train", "valid", "test"}) {
      for (const auto& ex : j[split]) {
        const auto tokens = ex["tokens"].get<std::vector<std::int32_t>>();
        EXPECT_EQ(label_of(s, tokens), ex["label"].get<std::int32_t>());
      }
    }
  }
  EXPECT_EQ(files, 4u);
}

TEST(CliGenTasks, ImbalancedSuiteSizes) {
  const auto dir = scratch("gen_imb");
  ASSERT_EQ(run("gen-tasks --suite imbalanced --seed 2 --out " + dir.string() + "/t", dir).code, 0);
  std::vector<std::size_t> sizes;
  for (const char* name : {"large", "small"}) {
    const auto j = nlohmann::json::parse(slurp(dir / "t" / (std::string(name) + ".json")));
    sizes.push_back(j["train"].size());
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{10'000, 100}));
  const auto p = sample_task(sizes, 10.0);
  EXPECT_NEAR(p[0], 0.6131, 1e-4);
  EXPECT_NEAR(p[1], 0.3869, 1e-4);
  EXPECT_EQ(run("gen-tasks --suite nope --out " + dir.string() + "/u", dir).code, 2);
}

TEST(CliTrain, TaskFilesFromGenTasks) {
  const auto dir = scratch("files");
  ASSERT_EQ(run("gen-tasks --seed 4 --vocab 10 --seq-len 8 --n-train 100 --out " + (dir / "t").string(), dir).code, 0);
  const auto r = run("train " + kTiny + "--tasks " + (dir / "t" / "parity.json").string() + " --out " +
                         (dir / "run").string(),
                     dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = nlohmann::json::parse(slurp(dir / "run" / "manifest.json"));
  EXPECT_EQ(m["tasks"][0], "parity");
  {
    std::ofstream f(dir / "broken.json");
    f << "{\"format\": \"propetl-task v1\", \"name\": ";
  }
  EXPECT_EQ(run("train " + kTiny + "--tasks " + (dir / "broken.json").string(), dir).code, 4);
}
