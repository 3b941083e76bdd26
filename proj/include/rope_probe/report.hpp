#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rope_probe/dimension_analysis.hpp"
#include "rope_probe/head_score.hpp"
#include "rope_probe/utility_mask.hpp"

// CSV dimension columns are 1-based canonical indices.
namespace rope_probe::report {

std::string format_double(double value);

std::string magnitude_csv(const std::vector<MagnitudeRow>& rows);
// The n_removed = 0 baseline is shared by both sides and written once, with
// side "none".
std::string ablation_csv(const std::vector<AblationRow>& rows);
// Body rows of ablation_csv, each prefixed with `prefix`.
std::string ablation_rows(const std::vector<AblationRow>& rows, std::string_view prefix);
std::string loss_curve_csv(const std::vector<double>& epoch_losses);
std::string l1_csv(const std::vector<double>& norms);
std::string head_score_csv(const std::vector<HeadScore>& scores);

struct HeadUtility {
  int layer = 0;
  int head = 0;
  UtilityMask mask;
};
std::string utility_csv(const std::vector<HeadUtility>& heads);

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

// Self-contained SVG line chart, one polyline per series.
std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace rope_probe::report
