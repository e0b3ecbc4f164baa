#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xmodal/trainer.hpp"

namespace xmodal {

// Loss curves of the paired steps (one polyline per term) as a static SVG.
std::string loss_curves_svg(const RunLog& log, const std::string& title);

// medR and R@1 (image-to-recipe) against batch size; one marker per
// successful sweep row and panel.
std::string batch_size_plot_svg(const SweepReport& sweep);

// Final-evaluation summary of a run: config fingerprint, flags, step counts,
// last losses, best validation and last test metrics.
nlohmann::json run_summary(const RunLog& log);

struct AblationRow {
  std::string name;
  nlohmann::json summary;  // run_summary
};

inline constexpr const char* kAblationColumns =
    "run,use_rec,use_ma,use_trans_r,use_trans_i,use_recipe_only,medR_i2r,r1_i2r,r5_i2r,r10_i2r,medR_r2i,r1_r2i,"
    "r5_r2i,r10_r2i";

std::string ablation_table_csv(const std::vector<AblationRow>& rows);
std::string ablation_table_markdown(const std::vector<AblationRow>& rows);

struct ReportOutputs {
  std::vector<std::filesystem::path> files;
  nlohmann::json summary;
};

// Inputs are RunLogs (JSON lines) or sweep reports (JSON with "rows"). Emits
// loss_curves_<name>.svg per log, batch_size_<name>.svg per sweep, an
// ablation table when there are two or more logs, and summary.json.
// Unreadable inputs raise config errors.
ReportOutputs write_report(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out_dir);

}  // namespace xmodal
