#include "lamkit/records.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "lamkit/array.hpp"
#include "lamkit/errors.hpp"
#include "lamkit/stats.hpp"

namespace lamkit {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string record_line(const RunRecord& r) {
  ordered_json j;
  j["method"] = r.method;
  j["task"] = r.task;
  j["seed"] = r.seed;
  j["metric"] = r.metric;
  j["value"] = r.value;
  j["step"] = r.step;
  return j.dump();
}

RunRecord parse_record_line(const std::string& line) {
  try {
    const ordered_json j = ordered_json::parse(line);
    RunRecord r;
    r.method = j.at("method").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.seed = j.at("seed").get<int64_t>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.step = j.at("step").get<int64_t>();
    return r;
  } catch (const ordered_json::exception& e) {
    throw ParseError(std::string("malformed run record: ") + e.what());
  }
}

void write_records(const fs::path& path, const std::vector<RunRecord>& records) {
  std::string text;
  for (const RunRecord& r : records) text += record_line(r) + "\n";
  atomic_write_text(path, text);
}

std::vector<RunRecord> read_records(const fs::path& path) {
  const std::string text = read_text_file(path);
  std::vector<RunRecord> out;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    out.push_back(parse_record_line(line));
  }
  return out;
}

namespace {

bool glob_match(const std::string& pat, const std::string& s, size_t pi = 0, size_t si = 0) {
  while (pi < pat.size() && pat[pi] != '*') {
    if (si >= s.size() || pat[pi] != s[si]) return false;
    ++pi;
    ++si;
  }
  if (pi == pat.size()) return si == s.size();
  for (size_t k = si; k <= s.size(); ++k)
    if (glob_match(pat, s, pi + 1, k)) return true;
  return false;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string coord(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

const char* kPalette[] = {"#3465a4", "#cc0000", "#4e9a06", "#f57900",
                          "#75507b", "#0693a8", "#8f5902", "#2e3436"};

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> pts;
};

std::string line_chart_svg(const std::string& title, const std::vector<Series>& series,
                           const std::string& y_label) {
  const double w = 640, h = 360, ml = 64, mr = 150, mt = 36, mb = 40;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const Series& s : series)
    for (const auto& [x, y] : s.pts) {
      if (first) {
        xmin = xmax = x;
        ymin = ymax = y;
        first = false;
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  ymin = std::min(ymin, 0.0);
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"360\" "
                    "font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"640\" height=\"360\" fill=\"white\"/>\n";
  svg += "<text x=\"" + coord(ml) + "\" y=\"20\" font-size=\"14\">" + xml_escape(title) +
         "</text>\n";
  svg += "<line x1=\"" + coord(ml) + "\" y1=\"" + coord(h - mb) + "\" x2=\"" + coord(w - mr) +
         "\" y2=\"" + coord(h - mb) + "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + coord(ml) + "\" y1=\"" + coord(mt) + "\" x2=\"" + coord(ml) +
         "\" y2=\"" + coord(h - mb) + "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = ymin + (ymax - ymin) * i / 4.0;
    svg += "<text x=\"" + coord(ml - 6) + "\" y=\"" + coord(py(yv) + 4) +
           "\" text-anchor=\"end\">" + fmt(yv) + "</text>\n";
    const double xv = xmin + (xmax - xmin) * i / 4.0;
    svg += "<text x=\"" + coord(px(xv)) + "\" y=\"" + coord(h - mb + 16) +
           "\" text-anchor=\"middle\">" + fmt(xv) + "</text>\n";
  }
  svg += "<text x=\"14\" y=\"" + coord((mt + h - mb) / 2) + "\" transform=\"rotate(-90 14 " +
         coord((mt + h - mb) / 2) + ")\" text-anchor=\"middle\">" + xml_escape(y_label) +
         "</text>\n";
  size_t ci = 0;
  for (const Series& s : series) {
    const char* color = kPalette[ci % (sizeof kPalette / sizeof *kPalette)];
    std::string pts;
    for (const auto& [x, y] : s.pts) {
      if (!pts.empty()) pts += ' ';
      pts += coord(px(x)) + "," + coord(py(y));
    }
    svg += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\"/>\n";
    const double ly = mt + 16.0 * static_cast<double>(ci);
    svg += "<line x1=\"" + coord(w - mr + 8) + "\" y1=\"" + coord(ly) + "\" x2=\"" +
           coord(w - mr + 28) + "\" y2=\"" + coord(ly) + "\" stroke=\"" + color +
           "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + coord(w - mr + 32) + "\" y=\"" + coord(ly + 4) + "\">" +
           xml_escape(s.label) + "</text>\n";
    ++ci;
  }
  svg += "</svg>\n";
  return svg;
}

struct BarItem {
  std::string label;
  double point, lo, hi;
};

std::string bar_chart_svg(const std::string& title, const std::vector<BarItem>& items) {
  const double w = 640, ml = 170, mr = 40, mt = 36, row = 30;
  const double h = mt + row * static_cast<double>(items.size()) + 40;
  double vmax = 0;
  for (const BarItem& b : items) vmax = std::max(vmax, b.hi);
  if (vmax <= 0) vmax = 1;
  auto px = [&](double v) { return ml + v / vmax * (w - ml - mr); };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"" +
                    coord(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"640\" height=\"" + coord(h) + "\" fill=\"white\"/>\n";
  svg += "<text x=\"12\" y=\"20\" font-size=\"14\">" + xml_escape(title) + "</text>\n";
  size_t i = 0;
  for (const BarItem& b : items) {
    const double y = mt + row * static_cast<double>(i);
    const char* color = kPalette[i % (sizeof kPalette / sizeof *kPalette)];
    svg += "<text x=\"" + coord(ml - 8) + "\" y=\"" + coord(y + row / 2 + 4) +
           "\" text-anchor=\"end\">" + xml_escape(b.label) + "</text>\n";
    svg += "<rect x=\"" + coord(ml) + "\" y=\"" + coord(y + 6) + "\" width=\"" +
           coord(std::max(0.0, px(b.point) - ml)) + "\" height=\"" + coord(row - 12) +
           "\" fill=\"" + color + "\"/>\n";
    svg += "<line x1=\"" + coord(px(b.lo)) + "\" y1=\"" + coord(y + row / 2) + "\" x2=\"" +
           coord(px(b.hi)) + "\" y2=\"" + coord(y + row / 2) + "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + coord(px(b.hi) + 6) + "\" y=\"" + coord(y + row / 2 + 4) + "\">" +
           fmt(b.point) + "</text>\n";
    ++i;
  }
  const double ax = mt + row * static_cast<double>(items.size());
  svg += "<line x1=\"" + coord(ml) + "\" y1=\"" + coord(mt) + "\" x2=\"" + coord(ml) +
         "\" y2=\"" + coord(ax) + "\" stroke=\"black\"/>\n";
  svg += "</svg>\n";
  return svg;
}

}  // namespace

std::vector<RunRecord> read_record_glob(const std::string& pattern) {
  const fs::path pat(pattern);
  std::vector<fs::path> files{pat.root_path().empty() ? fs::path(".") : pat.root_path()};
  bool saw_wildcard = false;
  for (const fs::path& part : pat.relative_path()) {
    const std::string piece = part.string();
    std::vector<fs::path> next;
    if (piece.find('*') == std::string::npos) {
      for (const fs::path& base : files) next.push_back(base / piece);
    } else {
      saw_wildcard = true;
      for (const fs::path& base : files) {
        if (!fs::is_directory(base)) continue;
        for (const auto& e : fs::directory_iterator(base))
          if (glob_match(piece, e.path().filename().string())) next.push_back(e.path());
      }
    }
    files = std::move(next);
  }
  if (saw_wildcard) {
    std::erase_if(files, [](const fs::path& p) { return !fs::is_regular_file(p); });
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw Error("no records match pattern: " + pattern);
  std::vector<RunRecord> out;
  for (const fs::path& f : files) {
    std::vector<RunRecord> part = read_records(f);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

void write_report(const std::vector<RunRecord>& records, const fs::path& out_dir) {
  if (records.empty()) throw Error("no run records to report");
  fs::create_directories(out_dir);

  // Terminal metrics (no step axis), grouped for stratified aggregation.
  std::map<std::pair<std::string, std::string>, std::map<std::string, std::vector<double>>> summary;
  // Probe trajectories per method, averaged over seeds at each step.
  std::map<std::string, std::map<int64_t, std::pair<double, int64_t>>> curves;
  for (const RunRecord& r : records) {
    if (r.step < 0) {
      summary[{r.metric, r.method}][r.task].push_back(r.value);
    } else if (r.metric == "probe_mse") {
      auto& slot = curves[r.method][r.step];
      slot.first += r.value;
      slot.second += 1;
    }
  }

  std::string csv = "metric,method,n,iqm,lo,hi\n";
  std::string txt;
  std::map<std::string, std::vector<BarItem>> bars;
  for (const auto& [key, by_task] : summary) {
    const auto& [metric, method] = key;
    ScoreMatrix m;
    size_t n = 0;
    for (const auto& [task, vals] : by_task) {
      m.tasks.push_back(task);
      m.values.push_back(vals);
      n += vals.size();
    }
    const AggregateReport agg = stratified_bootstrap_ci(m);
    csv += metric + "," + method + "," + std::to_string(n) + "," + fmt(agg.point) + "," +
           fmt(agg.lo) + "," + fmt(agg.hi) + "\n";
    char line[256];
    std::snprintf(line, sizeof line, "%-28s %-28s n=%-4zu iqm=%-10s ci=[%s, %s]\n",
                  metric.c_str(), method.c_str(), n, fmt(agg.point).c_str(), fmt(agg.lo).c_str(),
                  fmt(agg.hi).c_str());
    txt += line;
    bars[metric].push_back({method, agg.point, agg.lo, agg.hi});
  }
  atomic_write_text(out_dir / "summary.csv", csv);
  atomic_write_text(out_dir / "summary.txt", txt);
  for (const auto& [metric, items] : bars)
    atomic_write_text(out_dir / ("bars_" + metric + ".svg"),
                      bar_chart_svg(metric + " (iqm, 95% ci)", items));

  if (!curves.empty()) {
    std::vector<Series> series;
    for (const auto& [method, by_step] : curves) {
      Series s;
      s.label = method;
      for (const auto& [step, acc] : by_step)
        s.pts.emplace_back(static_cast<double>(step), acc.first / static_cast<double>(acc.second));
      series.push_back(std::move(s));
    }
    atomic_write_text(out_dir / "probe_curves.svg",
                      line_chart_svg("probe mse over steps", series, "probe mse"));

    // Degradation curves for -dist/-clean method pairs.
    std::vector<Series> ratios;
    for (const auto& [method, by_step] : curves) {
      const size_t pos = method.rfind("-dist");
      if (pos == std::string::npos || pos + 5 != method.size()) continue;
      const auto clean = curves.find(method.substr(0, pos) + "-clean");
      if (clean == curves.end()) continue;
      Series s;
      s.label = method.substr(0, pos);
      for (const auto& [step, acc] : by_step) {
        const auto other = clean->second.find(step);
        if (other == clean->second.end()) continue;
        const double denom = other->second.first / static_cast<double>(other->second.second);
        if (denom <= 0) continue;
        const double num = acc.first / static_cast<double>(acc.second);
        s.pts.emplace_back(static_cast<double>(step), num / denom);
      }
      if (!s.pts.empty()) ratios.push_back(std::move(s));
    }
    if (!ratios.empty())
      atomic_write_text(out_dir / "probe_ratio.svg",
                        line_chart_svg("probe ratio (dist / clean)", ratios, "ratio"));
  }
}

}  // namespace lamkit
