#include "xmodal/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "xmodal/error.hpp"

namespace xmodal {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// A simple line/scatter panel. `x_log2` puts x on a log2 axis.
class Panel {
 public:
  Panel(double x, double y, double w, double h) : x_(x), y_(y), w_(w), h_(h) {}

  void fit(const std::vector<Series>& series, bool x_log2) {
    x_log2_ = x_log2;
    for (const auto& s : series) {
      for (auto [px, py] : s.points) {
        const double tx = tx_(px);
        xmin_ = std::min(xmin_, tx);
        xmax_ = std::max(xmax_, tx);
        ymin_ = std::min(ymin_, py);
        ymax_ = std::max(ymax_, py);
      }
    }
    if (!(xmin_ <= xmax_)) xmin_ = 0, xmax_ = 1;
    if (!(ymin_ <= ymax_)) ymin_ = 0, ymax_ = 1;
    if (xmax_ - xmin_ < 1e-12) xmin_ -= 0.5, xmax_ += 0.5;
    if (ymax_ - ymin_ < 1e-12) ymin_ -= 0.5, ymax_ += 0.5;
    const double pad = 0.05 * (ymax_ - ymin_);
    ymin_ -= pad;
    ymax_ += pad;
  }

  double px(double v) const { return x_ + (tx_(v) - xmin_) / (xmax_ - xmin_) * w_; }
  double py(double v) const { return y_ + h_ - (v - ymin_) / (ymax_ - ymin_) * h_; }

  void axes(std::ostringstream& svg, const std::string& xlabel, const std::string& ylabel,
            const std::vector<double>& xticks) const {
    svg << "<rect x=\"" << x_ << "\" y=\"" << y_ << "\" width=\"" << w_ << "\" height=\"" << h_
        << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double v = ymin_ + (ymax_ - ymin_) * i / 4.0;
      svg << "<text x=\"" << x_ - 6 << "\" y=\"" << py(v) + 4 << "\" font-size=\"10\" text-anchor=\"end\">"
          << fmt(v, 3) << "</text>\n";
    }
    for (double t : xticks) {
      svg << "<text x=\"" << px(t) << "\" y=\"" << y_ + h_ + 14 << "\" font-size=\"10\" text-anchor=\"middle\">"
          << fmt(t, 6) << "</text>\n";
    }
    svg << "<text x=\"" << x_ + w_ / 2 << "\" y=\"" << y_ + h_ + 30 << "\" font-size=\"11\" text-anchor=\"middle\">"
        << escape(xlabel) << "</text>\n";
    svg << "<text x=\"" << x_ - 44 << "\" y=\"" << y_ + h_ / 2 << "\" font-size=\"11\" text-anchor=\"middle\" "
        << "transform=\"rotate(-90 " << x_ - 44 << ' ' << y_ + h_ / 2 << ")\">" << escape(ylabel) << "</text>\n";
  }

 private:
  double tx_(double v) const { return x_log2_ ? std::log2(std::max(v, 1e-12)) : v; }

  double x_, y_, w_, h_;
  bool x_log2_ = false;
  double xmin_ = std::numeric_limits<double>::infinity(), xmax_ = -std::numeric_limits<double>::infinity();
  double ymin_ = std::numeric_limits<double>::infinity(), ymax_ = -std::numeric_limits<double>::infinity();
};

std::string svg_open(int w, int h, const std::string& title) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
    << ' ' << h << "\" font-family=\"sans-serif\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << w / 2 << "\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">" << escape(title)
    << "</text>\n";
  return s.str();
}

const nlohmann::json* last_of(const std::vector<nlohmann::json>& records, const std::string& split) {
  const nlohmann::json* out = nullptr;
  for (const auto& r : records) {
    if (r.value("split", "") == split) out = &r;
  }
  return out;
}

nlohmann::json metrics_of(const nlohmann::json& eval_record) {
  const auto& m = eval_record.at("metrics");
  nlohmann::json out = {{"image_to_recipe", m.at("image_to_recipe").at("mean")},
                        {"recipe_to_image", m.at("recipe_to_image").at("mean")},
                        {"step", eval_record.value("step", 0)},
                        {"epoch", eval_record.value("epoch", 0)}};
  if (m.contains("fid")) out["fid"] = m["fid"];
  return out;
}

std::string flag(const nlohmann::json& config, const char* key) {
  if (!config.contains(key)) return "";
  return config[key].is_string() ? config[key].get<std::string>() : config[key].dump();
}

bool is_sweep(const nlohmann::json& j) { return j.is_object() && j.contains("rows") && j.contains("steps"); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) fail(ErrorKind::io, "cli", "report", "cannot write " + path.string());
}

}  // namespace

std::string loss_curves_svg(const RunLog& log, const std::string& title) {
  static const std::vector<std::string> terms = {"l_total", "l_ret", "l_rec", "l_ma", "l_trans_r", "l_trans_i"};
  std::vector<Series> series;
  for (const auto& term : terms) {
    Series s{term, {}};
    bool nonzero = false;
    for (const auto& r : log.records_of("step")) {
      if (r.value("kind", "") != "paired") continue;
      const double v = r.at("losses").value(term, 0.0);
      nonzero = nonzero || v != 0.0;
      s.points.emplace_back(r.at("step").get<double>(), v);
    }
    // Disabled terms are identically zero; leave them off the plot.
    if (nonzero) series.push_back(std::move(s));
  }
  const int W = 760, H = 420;
  std::ostringstream svg;
  svg << svg_open(W, H, title);
  Panel panel(70, 40, 520, 320);
  panel.fit(series, false);
  double max_step = 0;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) max_step = std::max(max_step, x);
  }
  panel.axes(svg, "paired step", "loss", {0, max_step / 2, max_step});
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kPalette[k % std::size(kPalette)];
    svg << "<polyline class=\"curve\" data-term=\"" << series[k].name << "\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.2\" points=\"";
    for (auto [x, y] : series[k].points) svg << fmt(panel.px(x), 6) << ',' << fmt(panel.py(y), 6) << ' ';
    svg << "\"/>\n";
    svg << "<text x=\"610\" y=\"" << 60 + 18 * k << "\" font-size=\"11\" fill=\"" << color << "\">"
        << series[k].name << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string batch_size_plot_svg(const SweepReport& sweep) {
  Series medR{"medR", {}}, r1{"R@1", {}};
  std::vector<double> ticks;
  for (const auto& row : sweep.rows) {
    if (!row.ok) continue;
    const auto b = static_cast<double>(row.batch_size);
    medR.points.emplace_back(b, row.image_to_recipe.medR);
    r1.points.emplace_back(b, row.image_to_recipe.r1);
    ticks.push_back(b);
  }
  const int W = 860, H = 400;
  std::ostringstream svg;
  svg << svg_open(W, H, "Retrieval vs batch size (image-to-recipe, " + std::to_string(sweep.steps) + " steps)");
  auto draw = [&](Panel& panel, const Series& s, const char* cls, const char* color, const std::string& ylabel) {
    panel.fit({s}, true);
    panel.axes(svg, "batch size", ylabel, ticks);
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-dasharray=\"4 3\" points=\"";
    for (auto [x, y] : s.points) svg << fmt(panel.px(x), 6) << ',' << fmt(panel.py(y), 6) << ' ';
    svg << "\"/>\n";
    for (auto [x, y] : s.points) {
      svg << "<circle class=\"point " << cls << "\" data-batch-size=\"" << x << "\" data-value=\"" << fmt(y, 8)
          << "\" cx=\"" << fmt(panel.px(x), 6) << "\" cy=\"" << fmt(panel.py(y), 6) << "\" r=\"4\" fill=\"" << color
          << "\"/>\n";
    }
  };
  Panel left(70, 40, 320, 290), right(500, 40, 320, 290);
  draw(left, medR, "medR", kPalette[0], "medR (lower is better)");
  draw(right, r1, "r1", kPalette[1], "R@1 % (higher is better)");
  svg << "</svg>\n";
  return svg.str();
}

nlohmann::json run_summary(const RunLog& log) {
  nlohmann::json out = nlohmann::json::object();
  auto headers = log.records_of("header");
  if (!headers.empty()) {
    out["config_fingerprint"] = headers.front().value("fingerprint", "");
    const auto& config = headers.front().at("config");
    nlohmann::json flags;
    for (const char* k : {"use_rec", "use_ma", "use_trans_r", "use_trans_i", "use_recipe_only"}) {
      flags[k] = flag(config, k) == "true";
    }
    out["flags"] = flags;
    out["batch_size"] = std::stoll(flag(config, "batch_size"));
    out["seed"] = std::stoull(flag(config, "seed"));
  }
  std::int64_t paired = 0, recipe_only = 0;
  const nlohmann::json* last_paired = nullptr;
  auto steps = log.records_of("step");
  for (const auto& r : steps) {
    if (r.value("kind", "") == "paired") {
      ++paired;
      last_paired = &r;
    } else {
      ++recipe_only;
    }
  }
  out["paired_steps"] = paired;
  out["recipe_only_steps"] = recipe_only;
  if (last_paired != nullptr) out["final_losses"] = last_paired->at("losses");

  auto evals = log.records_of("eval");
  const nlohmann::json* best = nullptr;
  for (const auto& r : evals) {
    if (r.value("split", "") != "val") continue;
    const auto& m = r.at("metrics").at("image_to_recipe").at("mean");
    if (best == nullptr) {
      best = &r;
      continue;
    }
    const auto& b = best->at("metrics").at("image_to_recipe").at("mean");
    const double medR = m.at("medR").get<double>(), best_medR = b.at("medR").get<double>();
    if (medR < best_medR || (medR == best_medR && m.at("r1").get<double>() > b.at("r1").get<double>())) best = &r;
  }
  if (best != nullptr) out["best_validation"] = metrics_of(*best);
  if (const auto* test = last_of(evals, "test")) out["test"] = metrics_of(*test);
  auto footers = log.records_of("footer");
  if (!footers.empty()) out["wall_s"] = footers.back().value("wall_s", 0.0);
  return out;
}

namespace {

// Test metrics when present, otherwise the best validation metrics.
const nlohmann::json* headline(const nlohmann::json& summary) {
  if (summary.contains("test")) return &summary["test"];
  if (summary.contains("best_validation")) return &summary["best_validation"];
  return nullptr;
}

std::vector<std::string> ablation_cells(const AblationRow& row) {
  std::vector<std::string> cells = {row.name};
  const auto flags = row.summary.value("flags", nlohmann::json::object());
  for (const char* k : {"use_rec", "use_ma", "use_trans_r", "use_trans_i", "use_recipe_only"}) {
    cells.push_back(flags.value(k, false) ? "1" : "0");
  }
  const auto* m = headline(row.summary);
  for (const char* dir : {"image_to_recipe", "recipe_to_image"}) {
    for (const char* key : {"medR", "r1", "r5", "r10"}) {
      cells.push_back(m != nullptr ? fmt(m->at(dir).at(key).get<double>(), 6) : "");
    }
  }
  return cells;
}

}  // namespace

std::string ablation_table_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << kAblationColumns << '\n';
  for (const auto& row : rows) {
    auto cells = ablation_cells(row);
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  }
  return out.str();
}

std::string ablation_table_markdown(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  std::string header = kAblationColumns;
  std::replace(header.begin(), header.end(), ',', '|');
  out << '|' << header << "|\n|";
  for (std::size_t i = 0, n = std::count(header.begin(), header.end(), '|') + 1; i < n; ++i) out << "---|";
  out << '\n';
  for (const auto& row : rows) {
    out << '|';
    for (auto& cell : ablation_cells(row)) {
      out << cell << '|';
    }
    out << '\n';
  }
  return out.str();
}

ReportOutputs write_report(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out_dir) {
  if (inputs.empty()) fail(ErrorKind::config, "cli", "report", "at least one run log or sweep report is required");
  std::filesystem::create_directories(out_dir);
  ReportOutputs result;
  result.summary = {{"runs", nlohmann::json::array()}, {"sweeps", nlohmann::json::array()}};
  std::vector<AblationRow> ablation;
  std::map<std::string, int> used_names;
  auto unique_name = [&](const std::filesystem::path& p) {
    auto stem = p.stem().string();
    const int n = used_names[stem]++;
    return n == 0 ? stem : stem + "_" + std::to_string(n);
  };

  for (const auto& path : inputs) {
    if (!std::filesystem::is_regular_file(path)) {
      fail(ErrorKind::config, "cli", "report", "cannot read " + path.string());
    }
    // A sweep report is a single JSON document; anything else must be a RunLog.
    nlohmann::json doc;
    {
      std::ifstream in(path);
      doc = nlohmann::json::parse(in, nullptr, false);
    }
    const auto name = unique_name(path);
    if (!doc.is_discarded() && is_sweep(doc)) {
      SweepReport sweep;
      try {
        sweep = SweepReport::from_json(doc);
      } catch (const Error& e) {
        fail(ErrorKind::config, "cli", "report", path.string() + ": " + e.detail());
      }
      const auto file = out_dir / ("batch_size_" + name + ".svg");
      write_text(file, batch_size_plot_svg(sweep));
      result.files.push_back(file);
      result.summary["sweeps"].push_back({{"name", name}, {"plot", file.filename().string()}, {"report", doc}});
      continue;
    }
    RunLog log;
    try {
      log = RunLog::read(path);
    } catch (const Error& e) {
      fail(ErrorKind::config, "cli", "report", path.string() + ": " + e.detail());
    }
    if (log.records_of("header").empty()) {
      fail(ErrorKind::config, "cli", "report", path.string() + " is neither a run log nor a sweep report");
    }
    const auto file = out_dir / ("loss_curves_" + name + ".svg");
    write_text(file, loss_curves_svg(log, name));
    result.files.push_back(file);
    auto summary = run_summary(log);
    summary["name"] = name;
    summary["loss_curves"] = file.filename().string();
    result.summary["runs"].push_back(summary);
    ablation.push_back({name, summary});
  }

  if (ablation.size() >= 2) {
    write_text(out_dir / "ablation.csv", ablation_table_csv(ablation));
    write_text(out_dir / "ablation.md", ablation_table_markdown(ablation));
    result.files.push_back(out_dir / "ablation.csv");
    result.files.push_back(out_dir / "ablation.md");
  }
  write_text(out_dir / "summary.json", result.summary.dump(2) + "\n");
  result.files.push_back(out_dir / "summary.json");
  return result;
}

}  // namespace xmodal
