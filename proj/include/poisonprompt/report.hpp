#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "poisonprompt/harness.hpp"

namespace poisonprompt {

enum class ReportFormat { json, markdown, plots };

/// Rows = prompt kinds, columns = datasets, each cell ACC / ASR in percent.
struct ResultTable {
  std::vector<std::string> prompts;
  std::vector<std::string> datasets;
  std::map<std::pair<std::string, std::string>, std::pair<double, double>> cells;

  void add(const std::string& prompt, const std::string& dataset, double acc, double asr) {
    if (std::find(prompts.begin(), prompts.end(), prompt) == prompts.end()) prompts.push_back(prompt);
    if (std::find(datasets.begin(), datasets.end(), dataset) == datasets.end()) datasets.push_back(dataset);
    cells[{prompt, dataset}] = {acc, asr};
  }
};

inline std::string markdown_table(const ResultTable& t) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << "| Prompt |";
  for (const auto& d : t.datasets) out << " " << d << " ACC | " << d << " ASR |";
  out << "\n|---|";
  for (std::size_t i = 0; i < t.datasets.size(); ++i) out << "---|---|";
  out << "\n";
  for (const auto& p : t.prompts) {
    out << "| " << p << " |";
    for (const auto& d : t.datasets) {
      auto it = t.cells.find({p, d});
      if (it == t.cells.end()) out << " - | - |";
      else out << " " << 100 * it->second.first << " | " << 100 * it->second.second << " |";
    }
    out << "\n";
  }
  return out.str();
}

namespace detail {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

/// Minimal static line chart.
inline std::string svg_line_chart(const std::string& title, const std::string& x_label, const Series& s) {
  const double w = 480, h = 320, left = 60, right = 20, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!s.x.empty()) {
    x0 = *std::min_element(s.x.begin(), s.x.end());
    x1 = *std::max_element(s.x.begin(), s.x.end());
    y0 = std::min(0.0, *std::min_element(s.y.begin(), s.y.end()));
    y1 = *std::max_element(s.y.begin(), s.y.end());
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  auto py = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };
  std::ostringstream o;
  o << std::setprecision(6);
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
    << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << w / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label
    << "</text>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << py(y1) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << y1
    << "</text>\n";
  o << "<text x=\"" << left - 6 << "\" y=\"" << py(y0) + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << y0
    << "</text>\n";
  o << "<text x=\"" << px(x0) << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\" font-size=\"11\">" << x0
    << "</text>\n";
  o << "<text x=\"" << px(x1) << "\" y=\"" << h - bottom + 16 << "\" text-anchor=\"middle\" font-size=\"11\">" << x1
    << "</text>\n";
  o << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < s.x.size(); ++i) o << px(s.x[i]) << "," << py(s.y[i]) << " ";
  o << "\"/>\n";
  for (std::size_t i = 0; i < s.x.size(); ++i)
    o << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"steelblue\"/>\n";
  o << "</svg>\n";
  return o.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

inline std::vector<Series> epoch_series(const AttackReport& r) {
  std::vector<Series> out{{"prompt_loss", {}, {}}, {"backdoor_loss", {}, {}}, {"clean_accuracy", {}, {}}, {"asr", {}, {}}};
  for (const auto& e : r.epochs) {
    const double vals[4] = {e.prompt_loss, e.backdoor_loss, e.clean_accuracy, e.asr};
    for (int i = 0; i < 4; ++i) {
      out[static_cast<std::size_t>(i)].x.push_back(e.epoch);
      out[static_cast<std::size_t>(i)].y.push_back(vals[i]);
    }
  }
  return out;
}

inline std::vector<std::filesystem::path> write_plots(const std::vector<Series>& series, const std::string& x_label,
                                                      const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& s : series) {
    const auto path = dir / (s.name + ".svg");
    write_text(path, svg_line_chart(s.name, x_label, s));
    out.push_back(path);
  }
  return out;
}

}  // namespace detail

inline ResultTable result_table(const AttackReport& r, const std::string& dataset = "synthetic") {
  ResultTable t;
  t.add(enum_name(r.config.prompt_kind), dataset, r.test_accuracy, r.test_asr);
  return t;
}

/// Writes `report` into `dir` as report.json, report.md, or one SVG per
/// epoch metric under plots/. Returns the files written.
inline std::vector<std::filesystem::path> emit_report(const AttackReport& report, const std::filesystem::path& dir,
                                                      ReportFormat format) {
  switch (format) {
    case ReportFormat::json:
      detail::write_text(dir / "report.json", to_json(report).dump(2) + "\n");
      return {dir / "report.json"};
    case ReportFormat::markdown: {
      std::ostringstream md;
      md << "# Attack report\n\n" << markdown_table(result_table(report)) << "\n";
      md << std::fixed << std::setprecision(4);
      md << "| Epoch | L_p | L_b | ACC (dev) | ASR (selection) | Trigger |\n|---|---|---|---|---|---|\n";
      for (const auto& e : report.epochs) {
        md << "| " << e.epoch << " | " << e.prompt_loss << " | " << e.backdoor_loss << " | " << e.clean_accuracy
           << " | " << e.asr << " |";
        for (TokenId t : e.trigger) md << " " << t;
        md << " |\n";
      }
      md << "\nTarget tokens:";
      for (const auto& s : report.target_rendered) md << " " << s;
      md << "\n\nTrigger:";
      for (const auto& s : report.trigger_rendered) md << " " << s;
      md << "\n";
      if (report.aborted) md << "\nAborted: " << report.abort_reason << "\n";
      detail::write_text(dir / "report.md", md.str());
      return {dir / "report.md"};
    }
    case ReportFormat::plots: return detail::write_plots(detail::epoch_series(report), "epoch", dir / "plots");
  }
  return {};
}

inline std::vector<std::filesystem::path> emit_report(const SweepReport& report, const std::filesystem::path& dir,
                                                      ReportFormat format) {
  switch (format) {
    case ReportFormat::json:
      detail::write_text(dir / "sweep.json", to_json(report).dump(2) + "\n");
      return {dir / "sweep.json"};
    case ReportFormat::markdown: {
      std::ostringstream md;
      md << std::fixed << std::setprecision(2);
      md << "# Trigger-size sweep\n\n| N | ACC | ASR |\n|---|---|---|\n";
      for (const auto& r : report.rows) md << "| " << r.trigger_length << " | " << 100 * r.accuracy << " | " << 100 * r.asr << " |\n";
      detail::write_text(dir / "sweep.md", md.str());
      return {dir / "sweep.md"};
    }
    case ReportFormat::plots: {
      detail::Series acc{"sweep_accuracy", {}, {}}, asr_s{"sweep_asr", {}, {}};
      for (const auto& r : report.rows) {
        acc.x.push_back(static_cast<double>(r.trigger_length));
        acc.y.push_back(r.accuracy);
        asr_s.x.push_back(static_cast<double>(r.trigger_length));
        asr_s.y.push_back(r.asr);
      }
      return detail::write_plots({acc, asr_s}, "trigger length", dir / "plots");
    }
  }
  return {};
}

inline std::vector<std::filesystem::path> emit_report(const FidelityReport& report, const std::filesystem::path& dir,
                                                      ReportFormat format) {
  switch (format) {
    case ReportFormat::json:
      detail::write_text(dir / "fidelity.json", to_json(report).dump(2) + "\n");
      return {dir / "fidelity.json"};
    case ReportFormat::markdown: {
      std::ostringstream md;
      md << std::fixed << std::setprecision(2);
      md << "# Fidelity\n\n| Seed | Clean ACC | Backdoored ACC | Backdoored ASR |\n|---|---|---|---|\n";
      for (std::size_t i = 0; i < report.seeds.size(); ++i)
        md << "| " << report.seeds[i] << " | " << 100 * report.clean_runs[i].test_accuracy << " | "
           << 100 * report.backdoored_runs[i].test_accuracy << " | " << 100 * report.backdoored_runs[i].test_asr << " |\n";
      md << "| mean | " << 100 * report.clean_accuracy << " | " << 100 * report.backdoored_accuracy << " | "
         << 100 * report.backdoored_asr << " |\n\nACC drop: " << 100 * report.accuracy_drop << " points\n";
      detail::write_text(dir / "fidelity.md", md.str());
      return {dir / "fidelity.md"};
    }
    case ReportFormat::plots: {
      detail::Series clean{"fidelity_clean_accuracy", {}, {}}, back{"fidelity_backdoored_accuracy", {}, {}};
      for (std::size_t i = 0; i < report.seeds.size(); ++i) {
        clean.x.push_back(static_cast<double>(i));
        clean.y.push_back(report.clean_runs[i].test_accuracy);
        back.x.push_back(static_cast<double>(i));
        back.y.push_back(report.backdoored_runs[i].test_accuracy);
      }
      return detail::write_plots({clean, back}, "seed index", dir / "plots");
    }
  }
  return {};
}

}  // namespace poisonprompt
