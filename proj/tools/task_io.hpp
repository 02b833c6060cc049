#pragma once

// Task data as JSON: one file per task.

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "propetl/tasks.hpp"

namespace propetl::cli {

inline constexpr std::string_view kTaskFormat = "propetl-task v1";

inline nlohmann::ordered_json examples_json(const std::vector<Example>& xs) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : xs) arr.push_back({{"tokens", e.tokens}, {"label", e.label}});
  return arr;
}

inline nlohmann::ordered_json task_json(const TaskData& t, const TaskSpec* spec = nullptr) {
  nlohmann::ordered_json j;
  j["format"] = kTaskFormat;
  j["name"] = t.name;
  j["num_classes"] = t.num_classes;
  j["seq_len"] = t.seq_len;
  if (spec) {
    j["rule"] = {{"rule", to_string(spec->rule)},   {"vocab_size", spec->vocab_size},
                 {"token_a", spec->token_a},         {"token_b", spec->token_b},
                 {"margin", spec->margin},           {"seed", spec->seed}};
  }
  j["train"] = examples_json(t.train);
  j["valid"] = examples_json(t.valid);
  j["test"] = examples_json(t.test);
  return j;
}

inline void write_task(const TaskData& t, const TaskSpec* spec, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << task_json(t, spec).dump() << '\n';
}

/// Parses a task file; structural problems are FormatError naming the file.
inline TaskData read_task(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot read task file '" + path.string() + "'");
  const std::string where = "task file '" + path.string() + "'";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kTaskFormat) throw FormatError(where + ": unknown format");
    TaskData t;
    t.name = j.at("name").get<std::string>();
    t.num_classes = j.at("num_classes").get<std::size_t>();
    t.seq_len = j.at("seq_len").get<std::size_t>();
    const auto load = [&](const char* split, std::vector<Example>& xs) {
      for (const auto& e : j.at(split)) {
        xs.push_back({e.at("tokens").get<std::vector<std::int32_t>>(), e.at("label").get<std::int32_t>()});
      }
    };
    load("train", t.train);
    load("valid", t.valid);
    load("test", t.test);
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
}

}  // namespace propetl::cli
