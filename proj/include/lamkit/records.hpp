#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace lamkit {

// One measurement from one run. Files hold one JSON object per line with
// exactly these fields; step is -1 for summary metrics that have no
// training-step axis.
struct RunRecord {
  std::string method;
  std::string task;
  int64_t seed = 0;
  std::string metric;
  double value = 0.0;
  int64_t step = -1;
};

std::string record_line(const RunRecord& r);
RunRecord parse_record_line(const std::string& line);

// Whole-file replacement through a temp file, so concurrent readers and
// resumed sweeps never see half a file.
void write_records(const std::filesystem::path& path, const std::vector<RunRecord>& records);
std::vector<RunRecord> read_records(const std::filesystem::path& path);

// Expands a pattern whose filename part may contain '*' wildcards and reads
// every matching record file, in sorted path order.
std::vector<RunRecord> read_record_glob(const std::string& pattern);

// Renders summary tables and SVG plots into out_dir: an IQM/CI table per
// (method, metric), bar charts for terminal metrics, probe curves over
// steps, and probe-ratio curves for method pairs that differ only in the
// -dist/-clean suffix. Output bytes depend only on the records.
void write_report(const std::vector<RunRecord>& records, const std::filesystem::path& out_dir);

}  // namespace lamkit
