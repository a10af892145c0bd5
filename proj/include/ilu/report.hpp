#pragma once

// Renders a bundle into SVG charts and a text summary. Every number is
// re-derived from the bundle CSVs; trajectories come from metrics.csv.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "ilu/error.hpp"
#include "ilu/metrics.hpp"

namespace ilu {

class ReportError : public Error {
 public:
  using Error::Error;
};

struct CsvTable {
  std::filesystem::path path;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ReportError(path.filename().string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

/// Lines starting with '#' are comments.
inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ReportError("missing CSV: " + path.string());
  CsvTable t;
  t.path = path;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    auto cells = detail::split_csv_line(line);
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size()) {
      throw ReportError(fmt::format("{}: line {} has {} cells, expected {}", path.filename().string(), n,
                                    cells.size(), t.header.size()));
    }
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw ReportError("empty CSV: " + path.string());
  return t;
}

namespace detail {

inline std::optional<double> parse_cell(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ReportError("not a number: '" + s + "'");
  }
}

struct RunSeries {
  std::map<std::size_t, EpochRecord> epochs;        // fine-tuning phases
  std::optional<double> final_fq, final_utility;    // last evaluation row
  std::size_t last_step = 0;
};

/// Per run_id series rebuilt from metrics.csv.
inline std::map<std::string, RunSeries> index_metrics(const CsvTable& m) {
  const auto c_run = m.col("run_id"), c_step = m.col("step_or_epoch"),
             c_fq = m.col("fq"), c_fa = m.col("fa"), c_util = m.col("utility"), c_env = m.col("env");
  std::map<std::string, RunSeries> out;
  for (const auto& r : m.rows) {
    if (!r[c_env].empty()) continue;
    auto& s = out[r[c_run]];
    const auto step = static_cast<std::size_t>(std::stoull(r[c_step]));
    const auto fq = parse_cell(r[c_fq]);
    const auto fa = parse_cell(r[c_fa]);
    if (fq && fa) s.epochs[step] = {step, *fq, *fa};
    if (fq && step >= s.last_step) {
      s.last_step = step;
      s.final_fq = fq;
      s.final_utility = parse_cell(r[c_util]);
    }
  }
  return out;
}

inline Trajectory to_trajectory(const RunSeries& s, const std::string& run_id) {
  Trajectory t;
  for (const auto& [e, rec] : s.epochs) t.records.push_back(rec);
  if (t.records.empty()) throw ReportError("metrics.csv has no trajectory for " + run_id);
  t.validate();
  return t;
}

struct Stat {
  std::vector<double> xs;
  void add(double v) { xs.push_back(v); }
  double mean() const {
    double s = 0;
    for (double x : xs) s += x;
    return xs.empty() ? NAN : s / static_cast<double>(xs.size());
  }
  double sd() const {
    if (xs.size() < 2) return 0.0;
    const double m = mean();
    double s = 0;
    for (double x : xs) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(xs.size() - 1));
  }
  std::string str() const { return xs.empty() ? "-" : fmt::format("{:.3f} ({:.3f})", mean(), sd()); }
};

// ---- SVG primitives ------------------------------------------------------

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                 "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return colors[i % 10];
}

inline std::string esc(const std::string& s) {
  std::string o;
  for (char ch : s) {
    if (ch == '<') o += "&lt;";
    else if (ch == '>') o += "&gt;";
    else if (ch == '&') o += "&amp;";
    else o += ch;
  }
  return o;
}

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
  bool dashed = false;
};

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series, bool log_x = false) {
  const double W = 640, H = 400, L = 60, R = 190, T = 40, B = 50;
  double x0 = 1e300, x1 = -1e300;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      const double xv = log_x ? std::log10(x) : x;
      x0 = std::min(x0, xv);
      x1 = std::max(x1, xv);
    }
  }
  if (!(x1 > x0)) {
    x0 -= 1;
    x1 += 1;
  }
  auto px = [&](double x) { return L + ((log_x ? std::log10(x) : x) - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return T + (1.0 - y) * (H - T - B); };
  std::string o = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" font-family=\"sans-serif\" "
      "font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H);
  o += fmt::format("<text x=\"{:.1f}\" y=\"20\" font-size=\"13\">{}</text>\n", L, esc(title));
  for (int k = 0; k <= 4; ++k) {
    const double y = k / 4.0;
    o += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#ddd\"/>\n", L, py(y),
                     W - R, py(y));
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.2f}</text>\n", L - 6, py(y) + 4, y);
  }
  std::set<double> xticks;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) xticks.insert(x);
  }
  for (double x : xticks) {
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{:g}</text>\n", px(x), H - B + 16, x);
  }
  o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", (L + W - R) / 2, H - 12,
                   esc(xlabel));
  o += fmt::format("<text x=\"14\" y=\"{:.1f}\" transform=\"rotate(-90 14 {:.1f})\" text-anchor=\"middle\">{}</text>\n",
                   (T + H - B) / 2, (T + H - B) / 2, esc(ylabel));
  o += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"none\" stroke=\"#333\"/>\n",
                   L, T, W - L - R, H - T - B);
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    std::string pts;
    for (auto [x, y] : s.points) pts += fmt::format("{:.1f},{:.1f} ", px(x), py(y));
    o += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.6\"{} points=\"{}\"/>\n", palette(i / 2),
                     s.dashed ? " stroke-dasharray=\"5,3\"" : "", pts);
    const double ly = T + 14.0 * static_cast<double>(i);
    o += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"{}\"{}/>\n", W - R + 10, ly,
                     W - R + 30, ly, palette(i / 2), s.dashed ? " stroke-dasharray=\"5,3\"" : "");
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", W - R + 34, ly + 4, esc(s.name));
  }
  o += "</svg>\n";
  return o;
}

inline std::string heatmap_svg(const std::string& title, const std::vector<std::string>& rows,
                               const std::vector<std::string>& cols,
                               const std::vector<std::vector<std::optional<double>>>& v) {
  const double cw = 90, ch = 28, L = 150, T = 50;
  const double W = L + cw * static_cast<double>(cols.size()) + 20, H = T + ch * static_cast<double>(rows.size()) + 20;
  std::string o = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" font-family=\"sans-serif\" "
      "font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H);
  o += fmt::format("<text x=\"10\" y=\"20\" font-size=\"13\">{}</text>\n", esc(title));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n",
                     L + cw * (static_cast<double>(j) + 0.5), T - 8, esc(cols[j]));
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double y = T + ch * static_cast<double>(i);
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{}</text>\n", L - 8, y + ch / 2 + 4,
                     esc(rows[i]));
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const auto val = v[i][j];
      const double t = val ? std::clamp(*val, 0.0, 1.0) : 0.0;
      const int shade = static_cast<int>(std::lround(255 - 170 * t));
      const std::string fill = val ? fmt::format("rgb({},{},255)", shade, shade) : "#eee";
      const double x = L + cw * static_cast<double>(j);
      o += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\" stroke=\"white\"/>\n",
                       x, y, cw, ch, fill);
      o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", x + cw / 2, y + ch / 2 + 4,
                       val ? fmt::format("{:.2f}", *val) : "-");
    }
  }
  o += "</svg>\n";
  return o;
}

struct Labeled {
  std::string name;
  double x = 0, y = 0;
};

inline std::string scatter_svg(const std::string& title, const std::string& note, const std::vector<Labeled>& pts) {
  const double W = 560, H = 460, M = 50;
  double lim = 1e-12;
  for (const auto& p : pts) lim = std::max({lim, std::abs(p.x), std::abs(p.y)});
  lim *= 1.15;
  auto px = [&](double x) { return M + (x + lim) / (2 * lim) * (W - 2 * M); };
  auto py = [&](double y) { return H - M - (y + lim) / (2 * lim) * (H - 2 * M); };
  std::string o = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" font-family=\"sans-serif\" "
      "font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H);
  o += fmt::format("<text x=\"10\" y=\"20\" font-size=\"13\">{}</text>\n", esc(title));
  o += fmt::format("<text x=\"10\" y=\"36\" fill=\"#555\">{}</text>\n", esc(note));
  o += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#bbb\"/>\n", px(-lim), py(0),
                   px(lim), py(0));
  o += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#bbb\"/>\n", px(0), py(-lim),
                   px(0), py(lim));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i];
    o += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"{}\" stroke-opacity=\"0.5\"/>\n",
                     px(0), py(0), px(p.x), py(p.y), palette(i));
    o += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"4\" fill=\"{}\"/>\n", px(p.x), py(p.y), palette(i));
    o += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", px(p.x) + 6, py(p.y) - 6, esc(p.name));
  }
  o += "</svg>\n";
  return o;
}

inline std::string approach(const std::string& method, const std::string& variant) {
  if (method == "Original") return "Original";
  return variant == "base" ? method : method + "+ILU(" + variant + ")";
}

}  // namespace detail

/// Files the report writes, relative to <bundle>/report, with their contents.
using ReportFiles = std::map<std::string, std::string>;

inline ReportFiles build_report(const std::filesystem::path& bundle) {
  namespace fs = std::filesystem;
  using detail::Stat;
  if (!fs::is_directory(bundle)) throw ReportError("bundle directory not found: " + bundle.string());
  const auto metrics = read_csv(bundle / "metrics.csv");
  const auto attacks = read_csv(bundle / "attacks.csv");
  const auto unlearn = read_csv(bundle / "unlearn.csv");
  const auto relearn = read_csv(bundle / "relearn.csv");
  const auto taskvec = read_csv(bundle / "taskvec.csv");
  if (metrics.rows.empty() || attacks.rows.empty()) throw ReportError("bundle has no runs: " + bundle.string());
  const auto series = detail::index_metrics(metrics);
  auto find_series = [&](const std::string& id) -> const detail::RunSeries& {
    auto it = series.find(id);
    if (it == series.end()) throw ReportError("metrics.csv has no rows for run " + id);
    return it->second;
  };

  ReportFiles files;
  std::vector<std::string> approaches, tasks;
  std::set<std::string> seeds_seen;
  auto remember = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };

  // approach -> task -> stats
  std::map<std::string, std::map<std::string, Stat>> ra, fa, fq_after;
  std::map<std::string, Stat> fq0, util, relearn_drop;
  // (seed, task) -> chart series
  std::map<std::pair<std::string, std::string>, std::vector<detail::Series>> charts;
  const auto a_run = attacks.col("run_id"), a_seed = attacks.col("seed"), a_m = attacks.col("method"),
             a_v = attacks.col("variant"), a_task = attacks.col("task");
  for (const auto& row : attacks.rows) {
    const auto name = detail::approach(row[a_m], row[a_v]);
    remember(approaches, name);
    remember(tasks, row[a_task]);
    seeds_seen.insert(row[a_seed]);
    const auto traj = detail::to_trajectory(find_series(row[a_run]), row[a_run]);
    const auto r = robust_accuracy(traj);
    if (r) ra[name][row[a_task]].add(*r);
    fa[name][row[a_task]].add(traj.records.back().fa);
    fq_after[name][row[a_task]].add(traj.records.back().fq);
    detail::Series fqs{name + " FQ", {}, false}, fas{name + " FA", {}, true};
    for (const auto& e : traj.records) {
      fqs.points.emplace_back(static_cast<double>(e.epoch), e.fq);
      fas.points.emplace_back(static_cast<double>(e.epoch), e.fa);
    }
    auto& ch = charts[{row[a_seed], row[a_task]}];
    ch.push_back(std::move(fqs));
    ch.push_back(std::move(fas));
  }
  // Pre-attack FQ and utility: the Original from its pretraining run, cells
  // from the final unlearning evaluation.
  for (const auto& s : seeds_seen) {
    auto it = series.find("seed_" + s + "/original");
    if (it != series.end() && it->second.final_fq) {
      fq0["Original"].add(*it->second.final_fq);
      if (it->second.final_utility) util["Original"].add(*it->second.final_utility);
    }
  }
  const auto u_run = unlearn.col("run_id"), u_m = unlearn.col("method"), u_v = unlearn.col("variant");
  for (const auto& row : unlearn.rows) {
    const auto& s = find_series(row[u_run]);
    const auto name = detail::approach(row[u_m], row[u_v]);
    if (s.final_fq) fq0[name].add(*s.final_fq);
    if (s.final_utility) util[name].add(*s.final_utility);
  }
  const auto r_run = relearn.col("run_id"), r_m = relearn.col("method"), r_v = relearn.col("variant");
  for (const auto& row : relearn.rows) {
    const auto traj = detail::to_trajectory(find_series(row[r_run]), row[r_run]);
    relearn_drop[detail::approach(row[r_m], row[r_v])].add(traj.records.front().fq - traj.records.back().fq);
  }

  for (const auto& [key, ser] : charts) {
    files[fmt::format("attack_seed{}_{}.svg", key.first, key.second)] =
        detail::line_chart(fmt::format("Fine-tuning on {} (seed {}): FQ solid, FA dashed", key.second, key.first),
                           "epoch", "fraction", ser);
  }

  // Heatmap: mean FQ before fine-tuning and after the attack on each task.
  std::vector<std::string> hrows, hcols{"no_finetune"};
  for (const auto& t : tasks) hcols.push_back(t);
  std::vector<std::vector<std::optional<double>>> hv;
  for (const auto& a : approaches) {
    if (a == "Original") continue;
    hrows.push_back(a);
    std::vector<std::optional<double>> row;
    row.push_back(fq0.count(a) ? std::optional<double>(fq0[a].mean()) : std::nullopt);
    for (const auto& t : tasks) {
      row.push_back(fq_after[a].count(t) ? std::optional<double>(fq_after[a][t].mean()) : std::nullopt);
    }
    hv.push_back(row);
  }
  files["heatmap.svg"] = detail::heatmap_svg("Forget quality after fine-tuning (mean over seeds)", hrows, hcols, hv);

  // Task-vector plane of the first seed.
  if (!seeds_seen.empty()) {
    const std::string first = *std::min_element(seeds_seen.begin(), seeds_seen.end(), [](const auto& a, const auto& b) {
      return std::stoull(a) < std::stoull(b);
    });
    std::vector<detail::Labeled> pts;
    for (const auto& e : fs::directory_iterator(bundle / "taskvec")) {
      const auto name = e.path().filename().string();
      const std::string prefix = "seed_" + first + "_";
      if (name.rfind(prefix, 0) != 0 || name.find("_projection.csv") == std::string::npos) continue;
      const auto slug = name.substr(prefix.size(), name.size() - prefix.size() - 15);
      const auto p = read_csv(e.path());
      const auto c_v = p.col("vector"), c_x = p.col("x"), c_y = p.col("y");
      for (const auto& row : p.rows) {
        const double x = *detail::parse_cell(row[c_x]), y = *detail::parse_cell(row[c_y]);
        if (row[c_v] == "finetune") {
          pts.push_back({slug + " finetune", x, y});
        } else if (row[c_v] == "unlearn") {
          pts.push_back({slug + " unlearn", x, y});
        } else {
          pts.push_back({slug + " unlearn+finetune", x, y});
        }
      }
    }
    std::sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    if (!pts.empty()) {
      files["taskvec.svg"] = detail::scatter_svg(
          "Task vectors, seed " + first, "plane per approach: e1 = its unlearning direction, e2 = fine-tuning", pts);
    }
  }

  // Lambda sweep.
  if (fs::exists(bundle / "sweep.csv")) {
    const auto sw = read_csv(bundle / "sweep.csv");
    const auto s_run = sw.col("run_id"), s_l = sw.col("lambda"), s_task = sw.col("task");
    std::map<std::string, std::map<double, std::pair<Stat, Stat>>> by_task;
    for (const auto& row : sw.rows) {
      if (row[s_task].empty()) continue;
      const auto traj = detail::to_trajectory(find_series(row[s_run]), row[s_run]);
      auto& cell = by_task[row[s_task]][*detail::parse_cell(row[s_l])];
      cell.first.add(traj.records.front().fq);
      cell.second.add(traj.records.back().fq);
    }
    std::vector<detail::Series> ser;
    for (const auto& [task, pts] : by_task) {
      detail::Series before{"FQ before attack (" + task + ")", {}, true}, after{"FQ after attack (" + task + ")", {}, false};
      for (const auto& [l, st] : pts) {
        before.points.emplace_back(l, st.first.mean());
        after.points.emplace_back(l, st.second.mean());
      }
      ser.push_back(after);
      ser.push_back(before);
    }
    bool positive = true;
    for (const auto& s : ser) {
      for (auto [x, y] : s.points) positive = positive && x > 0;
    }
    if (!ser.empty()) {
      files["lambda_sweep.svg"] = detail::line_chart("Invariance weight sweep", "lambda", "forget quality", ser, positive);
    }
  }

  // Text summary.
  std::string txt;
  txt += "ILU lab summary\n";
  txt += "Utility = accuracy on the held-out retain split (toy-scale stand-in for MMLU).\n";
  txt += fmt::format("Values are mean (sd) over {} seed(s); RA and FA are recomputed from metrics.csv.\n\n",
                     seeds_seen.size());
  std::string head = fmt::format("{:<20} {:>15} {:>15}", "approach", "FQ", "utility");
  for (const auto& t : tasks) head += fmt::format(" {:>15} {:>15}", t + " RA", t + " FA");
  head += fmt::format(" {:>15}\n", "relearn drop");
  txt += head;
  txt += std::string(head.size() - 1, '-') + "\n";
  for (const auto& a : approaches) {
    std::string line = fmt::format("{:<20} {:>15} {:>15}", a, fq0[a].str(), util[a].str());
    for (const auto& t : tasks) line += fmt::format(" {:>15} {:>15}", ra[a][t].str(), fa[a][t].str());
    line += fmt::format(" {:>15}\n", relearn_drop.count(a) ? relearn_drop[a].str() : "-");
    txt += line;
  }
  if (!taskvec.rows.empty()) {
    txt += "\nTask-vector cosines (mean over seeds)\n";
    const auto t_m = taskvec.col("method"), t_v = taskvec.col("variant"), t_a = taskvec.col("cos_u_ft"),
               t_b = taskvec.col("cos_uft_u");
    std::map<std::string, std::pair<Stat, Stat>> cs;
    std::vector<std::string> order;
    for (const auto& row : taskvec.rows) {
      const auto name = detail::approach(row[t_m], row[t_v]);
      remember(order, name);
      if (auto v = detail::parse_cell(row[t_a])) cs[name].first.add(*v);
      if (auto v = detail::parse_cell(row[t_b])) cs[name].second.add(*v);
    }
    txt += fmt::format("{:<20} {:>18} {:>22}\n", "approach", "cos(unlearn, ft)", "cos(post-ft, unlearn)");
    for (const auto& n : order) {
      txt += fmt::format("{:<20} {:>18} {:>22}\n", n, cs[n].first.str(), cs[n].second.str());
    }
  }
  files["summary.txt"] = txt;
  return files;
}

/// Build everything in memory first so that a failure leaves no partial files.
inline std::vector<std::filesystem::path> write_report(const std::filesystem::path& bundle) {
  const auto files = build_report(bundle);
  const auto dir = bundle / "report";
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> out;
  for (const auto& [name, text] : files) {
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    f << text;
    out.push_back(dir / name);
  }
  return out;
}

}  // namespace ilu
