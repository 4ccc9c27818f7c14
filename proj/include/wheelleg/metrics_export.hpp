#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace wheelleg {

/// Series names accepted by export_series.
std::vector<std::string> export_series_names();

struct ExportResult {
  int rows = 0;
  int skipped = 0;  // malformed or incomplete lines
};

/// Reads a metrics JSON-lines stream and writes one CSV (header first) for
/// `what`: return, level, terms, losses or throughput. Blank lines are
/// ignored; anything else that fails to parse or lacks a column is skipped
/// and counted.
ExportResult export_series(std::istream& metrics, const std::string& what, std::ostream& csv);

/// One CSV row per eval report JSON file: label, CoT, wheel duty, fall rate,
/// tracking error, distance. Used to compare e.g. wheels-on vs wheels-locked.
ExportResult export_cot_comparison(const std::vector<std::string>& report_paths, std::ostream& csv);

}  // namespace wheelleg
