#include "rope_probe/report.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <fstream>

#include "rope_probe/errors.hpp"

namespace rope_probe::report {

std::string format_double(double value) { return fmt::format("{:.17g}", value); }

std::string magnitude_csv(const std::vector<MagnitudeRow>& rows) {
  std::string out = "dim,mean_abs_q,mean_abs_k,rms_q,rms_k\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{}\n", r.dim + 1, format_double(r.mean_abs_q), format_double(r.mean_abs_k),
                       format_double(r.rms_q), format_double(r.rms_k));
  }
  return out;
}

std::string ablation_rows(const std::vector<AblationRow>& rows, std::string_view prefix) {
  std::string out;
  bool baseline_done = false;
  for (const auto& r : rows) {
    if (r.removed == 0) {
      if (baseline_done) continue;
      baseline_done = true;
    }
    out += fmt::format("{}{},{},{}\n", prefix, r.removed == 0 ? "none" : to_string(r.side), r.removed,
                       format_double(r.eval_loss));
  }
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  return "side,n_removed,eval_loss\n" + ablation_rows(rows, "");
}

std::string loss_curve_csv(const std::vector<double>& epoch_losses) {
  std::string out = "epoch,mean_loss\n";
  for (std::size_t e = 0; e < epoch_losses.size(); ++e) {
    out += fmt::format("{},{}\n", e + 1, format_double(epoch_losses[e]));
  }
  return out;
}

std::string l1_csv(const std::vector<double>& norms) {
  std::string out = "dim,l1_row_norm\n";
  for (std::size_t d = 0; d < norms.size(); ++d) out += fmt::format("{},{}\n", d + 1, format_double(norms[d]));
  return out;
}

std::string head_score_csv(const std::vector<HeadScore>& scores) {
  std::string out = "layer,head,score,is_retrieval\n";
  for (const auto& s : scores) {
    out += fmt::format("{},{},{},{}\n", s.layer, s.head, format_double(s.score), s.is_retrieval ? "true" : "false");
  }
  return out;
}

std::string utility_csv(const std::vector<HeadUtility>& heads) {
  std::string out = "layer,head,dim,utility\n";
  for (const auto& h : heads) {
    const auto scores = utility_scores(h.mask);
    for (std::size_t d = 0; d < scores.size(); ++d) {
      out += fmt::format("{},{},{},{}\n", h.layer, h.head, d + 1, format_double(scores[d]));
    }
  }
  return out;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

}  // namespace

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series) {
  constexpr double width = 640, height = 400, left = 70, right = 20, top = 40, bottom = 60;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!any) {
        x0 = x1 = s.x[i];
        y0 = y1 = s.y[i];
        any = true;
      }
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pw = width - left - right;
  const double ph = height - top - bottom;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::string svg = fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{3}</text>\n",
      width, height, width / 2, xml_escape(title));
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", left, top + ph, left + pw);
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", left, top, top + ph);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
                     left + pw / 2, height - 15, xml_escape(x_label));
  svg += fmt::format(
      "<text x=\"15\" y=\"{0}\" transform=\"rotate(-90 15 {0})\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      "font-size=\"12\">{1}</text>\n",
      top + ph / 2, xml_escape(y_label));
  for (int t = 0; t <= 4; ++t) {
    const double fx = x0 + (x1 - x0) * t / 4.0;
    const double fy = y0 + (y1 - y0) * t / 4.0;
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{:.3g}</text>\n",
                       px(fx), top + ph + 15, fx);
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{:.3g}</text>\n",
                       left - 5, py(fy) + 3, fy);
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    std::string points;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      points += fmt::format("{}{:.2f},{:.2f}", i == 0 ? "" : " ", px(s.x[i]), py(s.y[i]));
    }
    svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", color, points);
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{}</text>\n",
                       left + pw - 150, top + 15 + 14.0 * k, color, xml_escape(s.label));
  }
  svg += "</svg>\n";
  return svg;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out << text;
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

}  // namespace rope_probe::report
