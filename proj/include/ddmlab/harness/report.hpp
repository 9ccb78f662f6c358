#pragma once

// `ddmlab report`: reads <run>/experiments/<preset>/*.csv and writes
// <run>/report/report.md plus one SVG per plot.

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ddmlab/harness/io.hpp"
#include "ddmlab/harness/svg.hpp"

namespace ddmlab::harness {

inline fs::path experiments_dir(const fs::path& run) { return run / "experiments"; }
inline fs::path report_dir(const fs::path& run) { return run / "report"; }

// Tables with more rows than this are per-sample dumps and stay out of the markdown.
inline constexpr std::size_t kMarkdownRowLimit = 40;

inline std::string markdown_table(const CsvData& t) {
  std::string s = "|";
  for (const auto& c : t.columns) s += " " + c + " |";
  s += "\n|";
  for (std::size_t j = 0; j < t.columns.size(); ++j) s += " --- |";
  s += "\n";
  for (const auto& r : t.rows) {
    s += "|";
    for (const auto& c : r) {
      // Long shortest-round-trip numbers are trimmed for reading.
      char* end = nullptr;
      const double v = std::strtod(c.c_str(), &end);
      std::string shown = c;
      if (!c.empty() && end && *end == '\0' && c.find('.') != std::string::npos) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4g", v);
        shown = buf;
      }
      s += " " + shown + " |";
    }
    s += "\n";
  }
  return s;
}

struct Plot {
  std::string file;
  std::string svg;
};

/// Rows grouped by the value of `key`, in first-appearance order.
inline std::vector<svg::Series> series_by(const CsvData& t, const std::string& key, const std::string& x, const std::string& y) {
  std::vector<svg::Series> out;
  const auto keys = t.strings(key);
  const auto xs = t.numbers(x), ys = t.numbers(y);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& s) { return s.label == keys[i]; });
    if (it == out.end()) {
      out.push_back({keys[i], {}, {}});
      it = out.end() - 1;
    }
    it->x.push_back(xs[i]);
    it->y.push_back(ys[i]);
  }
  return out;
}

inline bool has(const CsvData& t, std::initializer_list<const char*> cols) {
  if (t.rows.empty()) return false;
  for (const char* c : cols)
    if (t.column(c) < 0) return false;
  return true;
}

inline Plot bar_plot(const std::string& file, const std::string& title, const CsvData& t, const std::string& label_col, const std::string& value_col) {
  svg::Chart c{title, label_col, value_col};
  return {file, svg::bar_chart(c, t.strings(label_col), t.numbers(value_col))};
}

/// Plots for one preset from its tables.
inline std::vector<Plot> preset_plots(const std::string& preset, const std::map<std::string, CsvData>& tables) {
  std::vector<Plot> out;
  auto table = [&](const std::string& n) -> const CsvData* {
    auto it = tables.find(n);
    return it == tables.end() ? nullptr : &it->second;
  };
  const CsvData* summary = table("summary");
  const CsvData* samples = table("samples");
  if (preset == "dissociation" && summary && has(*summary, {"policy", "dref_mean", "nll"})) {
    out.push_back(bar_plot("dissociation_dref.svg", "Mean refinement distance per policy", *summary, "policy", "dref_mean"));
    out.push_back(bar_plot("dissociation_nll.svg", "Mixture NLL per policy", *summary, "policy", "nll"));
  } else if (preset == "refinement" && summary && has(*summary, {"policy", "dref_mean"})) {
    out.push_back(bar_plot("refinement_dref.svg", "Mean refinement distance per policy", *summary, "policy", "dref_mean"));
    if (samples && has(*samples, {"policy", "leff", "dref"}))
      out.push_back({"refinement_scatter.svg", svg::scatter_chart({"Spectral-norm proxy vs refinement distance", "leff", "dref", 640, 400, true},
                                                                  series_by(*samples, "policy", "leff", "dref"))});
  } else if (preset == "disagreement" && summary && has(*summary, {"quartile", "distance_mean"})) {
    out.push_back(bar_plot("disagreement_quartiles.svg", "Distance to Top-2 endpoint by disagreement quartile", *summary, "quartile", "distance_mean"));
  } else if (preset == "cluster-rank" && summary && has(*summary, {"policy", "mean_rank"})) {
    out.push_back(bar_plot("cluster_rank.svg", "Mean cluster rank of selected experts", *summary, "policy", "mean_rank"));
  } else if (preset == "leff-trace" && table("trace") && has(*table("trace"), {"policy", "t", "cumulative_iqr"})) {
    out.push_back({"leff_trace.svg", svg::line_chart({"Cumulative IQR of the Jacobian spectral norm", "t", "cumulative IQR"},
                                                     series_by(*table("trace"), "policy", "t", "cumulative_iqr"))});
  } else if (preset == "temp-sweep" && summary && has(*summary, {"T", "entropy", "dref_mean"})) {
    svg::Series ent{"entropy", summary->numbers("T"), summary->numbers("entropy")};
    svg::Series dref{"dref_mean", summary->numbers("T"), summary->numbers("dref_mean")};
    out.push_back({"temp_sweep_entropy.svg", svg::line_chart({"Routing entropy vs temperature", "T", "entropy (nats)"}, {ent})});
    out.push_back({"temp_sweep_dref.svg", svg::line_chart({"Refinement distance vs temperature", "T", "dref"}, {dref})});
  } else if (preset == "topp-sweep" && summary && has(*summary, {"p", "dref_mean"})) {
    svg::Series dref{"dref_mean", summary->numbers("p"), summary->numbers("dref_mean")};
    out.push_back({"topp_sweep_dref.svg", svg::line_chart({"Refinement distance vs nucleus mass", "p", "dref"}, {dref})});
  } else if (preset == "convergence" && summary && has(*summary, {"policy", "N", "exceed_fraction"})) {
    out.push_back({"convergence.svg", svg::line_chart({"Exceedance fraction vs steps", "N", "fraction above epsilon"},
                                                      series_by(*summary, "policy", "N", "exceed_fraction"))});
  } else if (preset == "leff-consistency" && summary && has(*summary, {"policy", "N", "leff_mean"})) {
    out.push_back({"leff_consistency.svg", svg::line_chart({"Spectral-norm proxy vs steps", "N", "mean leff"}, series_by(*summary, "policy", "N", "leff_mean"))});
  } else if (preset == "decomposition" && table("profile") && has(*table("profile"), {"policy", "t", "router_term_mean"})) {
    out.push_back({"decomposition_router.svg", svg::line_chart({"Router-term spectral norm along the path", "t", "router term"},
                                                               series_by(*table("profile"), "policy", "t", "router_term_mean"))});
    out.push_back({"decomposition_expert.svg", svg::line_chart({"Expert-term spectral norm along the path", "t", "expert term"},
                                                               series_by(*table("profile"), "policy", "t", "expert_term_mean"))});
  } else if (preset == "counterfactual" && summary && has(*summary, {"condition", "dref_mean"})) {
    out.push_back(bar_plot("counterfactual_dref.svg", "Refinement distance under routing interventions", *summary, "condition", "dref_mean"));
  } else if (preset == "local-error" && summary && has(*summary, {"policy", "eps_h"})) {
    out.push_back(bar_plot("local_error.svg", "Mean local truncation error per policy", *summary, "policy", "eps_h"));
  } else if (preset == "switching" && samples && has(*samples, {"policy", "s_eff", "dref"})) {
    out.push_back({"switching_scatter.svg", svg::scatter_chart({"Switching score vs refinement distance", "S_eff", "dref", 640, 400, true},
                                                               series_by(*samples, "policy", "s_eff", "dref"))});
  } else if (preset == "expert-quality" && summary && has(*summary, {"status", "mean_deg"})) {
    out.push_back(bar_plot("expert_quality.svg", "Angular deviation from the blended velocity", *summary, "status", "mean_deg"));
  }
  return out;
}

struct ReportSummary {
  int presets = 0;
  int plots = 0;
  bool empty = true;
};

inline ReportSummary write_report(const fs::path& run) {
  ReportSummary rs;
  std::string md = "# ddmlab report\n\n";
  std::vector<fs::path> dirs;
  if (fs::exists(experiments_dir(run)))
    for (const auto& de : fs::directory_iterator(experiments_dir(run)))
      if (de.is_directory()) dirs.push_back(de.path());
  std::sort(dirs.begin(), dirs.end());

  for (const auto& dir : dirs) {
    const std::string preset = dir.filename().string();
    std::map<std::string, CsvData> tables;
    std::vector<fs::path> files;
    for (const auto& de : fs::directory_iterator(dir))
      if (de.is_regular_file() && de.path().extension() == ".csv") files.push_back(de.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      auto t = parse_csv(read_file(f));
      if (!t.rows.empty()) tables[f.stem().string()] = std::move(t);
    }
    md += "## " + preset + "\n\n";
    if (tables.empty()) {
      md += "_No metrics found in experiments/" + preset + "; run `ddmlab experiment " + preset + "` to fill this section._\n\n";
      continue;
    }
    rs.empty = false;
    ++rs.presets;
    // summary first, then the remaining small tables by name
    std::vector<std::string> order;
    if (tables.count("summary")) order.push_back("summary");
    for (const auto& [name, t] : tables)
      if (name != "summary") order.push_back(name);
    for (const auto& name : order) {
      const auto& t = tables.at(name);
      if (t.rows.size() > kMarkdownRowLimit) {
        md += "`" + name + ".csv`: " + std::to_string(t.rows.size()) + " rows (not shown).\n\n";
        continue;
      }
      if (name != "summary") md += "**" + name + "**\n\n";
      md += markdown_table(t) + "\n";
    }
    for (const auto& p : preset_plots(preset, tables)) {
      write_file(report_dir(run) / p.file, p.svg);
      md += "![" + p.file + "](" + p.file + ")\n\n";
      ++rs.plots;
    }
  }
  if (rs.empty) md += "No experiment metrics were found under " + experiments_dir(run).string() + ". Run `ddmlab experiment <name>` first.\n";
  write_file(report_dir(run) / "report.md", md);
  return rs;
}

}  // namespace ddmlab::harness
