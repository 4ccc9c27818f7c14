#include "wheelleg/metrics_export.hpp"

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "wheelleg/env.hpp"
#include "wheelleg/types.hpp"

namespace wheelleg {
namespace {

using nlohmann::json;

struct Column {
  std::string header;
  json::json_pointer path;
};

std::vector<Column> columns_for(const std::string& what) {
  auto col = [](const std::string& h, const std::string& p) { return Column{h, json::json_pointer(p)}; };
  if (what == "return") {
    return {col("iteration", "/iteration"), col("mean_return", "/mean_return"), col("episodes", "/episodes"),
            col("mean_episode_length", "/mean_episode_length"), col("mean_tracking_error", "/mean_tracking_error"),
            col("fall_rate", "/fall_rate")};
  }
  if (what == "level") return {col("iteration", "/iteration"), col("mean_level", "/mean_level")};
  if (what == "terms") {
    std::vector<Column> cs = {col("iteration", "/iteration")};
    for (const auto& name : kRewardTermNames) cs.push_back(col(std::string(name), "/reward_terms/" + std::string(name)));
    return cs;
  }
  if (what == "losses") {
    return {col("iteration", "/iteration"),       col("policy_loss", "/policy_loss"),
            col("value_loss", "/value_loss"),     col("aux_loss", "/aux_loss"),
            col("entropy", "/entropy"),           col("approx_kl", "/approx_kl"),
            col("clip_fraction", "/clip_fraction"), col("learning_rate", "/learning_rate")};
  }
  if (what == "throughput") {
    return {col("iteration", "/iteration"), col("wall_time", "/wall_time"), col("env_steps", "/env_steps"),
            col("env_steps_per_s", "/env_steps_per_s")};
  }
  throw ArgumentError("unknown export series '" + what + "'");
}

std::string cell(const json& v) {
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  std::ostringstream s;
  s.precision(17);
  s << v.get<double>();
  return s.str();
}

}  // namespace

std::vector<std::string> export_series_names() { return {"return", "level", "terms", "losses", "throughput"}; }

ExportResult export_series(std::istream& metrics, const std::string& what, std::ostream& csv) {
  const std::vector<Column> cols = columns_for(what);
  for (std::size_t i = 0; i < cols.size(); ++i) csv << (i ? "," : "") << cols[i].header;
  csv << '\n';

  ExportResult res;
  std::string line;
  std::vector<std::string> cells;
  while (std::getline(metrics, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = json::parse(line, nullptr, false);
    cells.clear();
    bool ok = !j.is_discarded() && j.is_object();
    for (const Column& c : cols) {
      if (!ok) break;
      if (!j.contains(c.path) || !j.at(c.path).is_primitive() || j.at(c.path).is_null() || j.at(c.path).is_string()) {
        ok = false;
        break;
      }
      cells.push_back(cell(j.at(c.path)));
    }
    if (!ok) {
      ++res.skipped;
      continue;
    }
    for (std::size_t i = 0; i < cells.size(); ++i) csv << (i ? "," : "") << cells[i];
    csv << '\n';
    ++res.rows;
  }
  return res;
}

ExportResult export_cot_comparison(const std::vector<std::string>& report_paths, std::ostream& csv) {
  csv << "label,mean_cost_of_transport,mean_wheel_duty,fall_rate,mean_tracking_error,mean_distance\n";
  ExportResult res;
  for (const std::string& path : report_paths) {
    std::ifstream in(path);
    const json j = in ? json::parse(in, nullptr, false) : json(nullptr);
    if (j.is_discarded() || !j.is_object() || !j.contains("summary")) {
      ++res.skipped;
      continue;
    }
    const json& s = j["summary"];
    try {
      std::string row = std::filesystem::path(path).stem().string();
      for (const char* k :
           {"mean_cost_of_transport", "mean_wheel_duty", "fall_rate", "mean_tracking_error", "mean_distance"}) {
        row += ',' + cell(s.at(k));
      }
      csv << row << '\n';
      ++res.rows;
    } catch (const json::exception&) {
      ++res.skipped;
    }
  }
  return res;
}

}  // namespace wheelleg
