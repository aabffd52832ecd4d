#include "xmil/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace xmil::report {

namespace {

const char* kFont = "font-family=\"sans-serif\"";

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void open_svg(std::ostringstream& out, double w, double h) {
  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt(w) << "\" height=\"" << fmt(h)
      << "\" viewBox=\"0 0 " << fmt(w) << ' ' << fmt(h) << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

void text(std::ostringstream& out, double x, double y, const std::string& s, int size = 11,
          const char* anchor = "middle") {
  out << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" " << kFont << " font-size=\"" << size
      << "\" text-anchor=\"" << anchor << "\">" << xml_escape(s) << "</text>\n";
}

std::pair<double, double> range_of(const std::vector<double>& v) {
  double lo = 0.0, hi = 0.0;
  bool first = true;
  for (double x : v) {
    if (!std::isfinite(x)) continue;
    if (first) {
      lo = hi = x;
      first = false;
    }
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  return {lo, hi};
}

// Diverging blue-white-red for r in [-1, 1].
std::string effect_color(double r) {
  const double t = std::clamp(r, -1.0, 1.0);
  int red, green, blue;
  if (t >= 0) {
    red = 255;
    green = static_cast<int>(255 * (1 - t));
    blue = static_cast<int>(255 * (1 - t));
  } else {
    red = static_cast<int>(255 * (1 + t));
    green = static_cast<int>(255 * (1 + t));
    blue = 255;
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", red, green, blue);
  return buf;
}

}  // namespace

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string curves_svg(const std::string& bag_id, const std::vector<CurveSet>& curves) {
  const double pw = 220, ph = 160, margin = 40;
  const std::size_t cols = std::min<std::size_t>(4, std::max<std::size_t>(1, curves.size()));
  const std::size_t rows = (curves.size() + cols - 1) / cols;
  const double w = cols * (pw + margin) + margin, h = rows * (ph + margin) + margin + 30;
  std::vector<double> all;
  for (const auto& c : curves) {
    all.insert(all.end(), c.ascending.begin(), c.ascending.end());
    all.insert(all.end(), c.descending.begin(), c.descending.end());
  }
  const auto [lo, hi] = range_of(all);
  std::ostringstream out;
  open_svg(out, w, h);
  text(out, w / 2, 20, "Perturbation curves, bag " + bag_id, 14);
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const double x0 = margin + (i % cols) * (pw + margin), y0 = 40 + (i / cols) * (ph + margin);
    out << "<g class=\"panel\">\n";
    out << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(y0) << "\" width=\"" << fmt(pw) << "\" height=\"" << fmt(ph)
        << "\" fill=\"none\" stroke=\"#888\"/>\n";
    text(out, x0 + pw / 2, y0 - 5, curves[i].method);
    auto poly = [&](const std::vector<double>& v, const char* color) {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t m = 0; m < v.size(); ++m) {
        const double x = x0 + pw * static_cast<double>(m) / static_cast<double>(std::max<std::size_t>(1, v.size() - 1));
        const double y = y0 + ph - ph * (v[m] - lo) / (hi - lo);
        out << fmt(x) << ',' << fmt(y) << ' ';
      }
      out << "\"/>\n";
    };
    poly(curves[i].ascending, "#1f77b4");
    poly(curves[i].descending, "#d62728");
    text(out, x0, y0 + ph + 14, "0", 9, "start");
    text(out, x0 + pw, y0 + ph + 14, "100", 9, "end");
    out << "</g>\n";
  }
  text(out, w - 10, h - 8, "blue: ascending, red: descending; y in [" + fmt3(lo) + ", " + fmt3(hi) + "]", 10, "end");
  out << "</svg>\n";
  return out.str();
}

std::string srg_strip_svg(const std::vector<std::string>& methods, const std::vector<std::vector<double>>& srg) {
  const double col = 90, ph = 300, margin = 60;
  const double w = margin * 2 + col * methods.size(), h = ph + 100;
  std::vector<double> all;
  for (const auto& row : srg) all.insert(all.end(), row.begin(), row.end());
  const auto [lo, hi] = range_of(all);
  auto ymap = [&](double v) { return 40 + ph - ph * (v - lo) / (hi - lo); };
  std::ostringstream out;
  open_svg(out, w, h);
  text(out, w / 2, 20, "SRG per bag", 14);
  if (lo < 0 && hi > 0) {
    out << "<line x1=\"" << fmt(margin) << "\" x2=\"" << fmt(w - margin) << "\" y1=\"" << fmt(ymap(0)) << "\" y2=\""
        << fmt(ymap(0)) << "\" stroke=\"#aaa\" stroke-dasharray=\"4 3\"/>\n";
  }
  text(out, margin - 8, ymap(hi) + 4, fmt3(hi), 9, "end");
  text(out, margin - 8, ymap(lo) + 4, fmt3(lo), 9, "end");
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const double cx = margin + col * (m + 0.5);
    std::vector<double> column;
    for (std::size_t b = 0; b < srg.size(); ++b) {
      const double v = srg[b][m];
      column.push_back(v);
      const double jitter = (static_cast<double>((b * 2654435761u) % 1000) / 1000.0 - 0.5) * col * 0.5;
      out << "<circle cx=\"" << fmt(cx + jitter) << "\" cy=\"" << fmt(ymap(v))
          << "\" r=\"2.5\" fill=\"#1f77b4\" fill-opacity=\"0.5\"/>\n";
    }
    if (!column.empty()) {
      std::sort(column.begin(), column.end());
      const std::size_t k = column.size() / 2;
      const double med = column.size() % 2 ? column[k] : 0.5 * (column[k - 1] + column[k]);
      out << "<line x1=\"" << fmt(cx - col * 0.35) << "\" x2=\"" << fmt(cx + col * 0.35) << "\" y1=\"" << fmt(ymap(med))
          << "\" y2=\"" << fmt(ymap(med)) << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
    }
    text(out, cx, h - 40, methods[m]);
  }
  out << "</svg>\n";
  return out.str();
}

std::string effect_matrix_svg(const ComparisonTable& table) {
  const std::size_t m = table.methods.size();
  const double cell = 60, left = 100, top = 60;
  const double w = left + cell * m + 40, h = top + cell * m + 80;
  std::ostringstream out;
  open_svg(out, w, h);
  text(out, w / 2, 20, "Pairwise effect sizes (row vs column)", 14);
  for (std::size_t i = 0; i < m; ++i) {
    text(out, left - 6, top + cell * (i + 0.5) + 4, table.methods[i], 11, "end");
    text(out, left + cell * (i + 0.5), top - 8, table.methods[i]);
    for (std::size_t j = 0; j < m; ++j) {
      const double x = left + cell * j, y = top + cell * i;
      const bool diag = i == j;
      const double r = diag ? 0.0 : table.effect(table.methods[i], table.methods[j]);
      out << "<rect class=\"cell\" x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(cell)
          << "\" height=\"" << fmt(cell) << "\" fill=\"" << (diag ? std::string("#eeeeee") : effect_color(r))
          << "\" stroke=\"white\"/>\n";
      if (diag) continue;
      const double cx = x + cell / 2, cy = y + cell / 2 - 6;
      switch (magnitude_class(r)) {
        case Magnitude::Strong:
          out << "<polygon points=\"" << fmt(cx) << ',' << fmt(cy - 6) << ' ' << fmt(cx - 6) << ',' << fmt(cy + 5) << ' '
              << fmt(cx + 6) << ',' << fmt(cy + 5) << "\" fill=\"black\"/>\n";
          break;
        case Magnitude::WeakModerate:
          out << "<rect x=\"" << fmt(cx - 4) << "\" y=\"" << fmt(cy - 4) << "\" width=\"8\" height=\"8\" fill=\"black\"/>\n";
          break;
        case Magnitude::Negligible:
          out << "<circle cx=\"" << fmt(cx) << "\" cy=\"" << fmt(cy) << "\" r=\"3\" fill=\"none\" stroke=\"black\"/>\n";
          break;
      }
      const bool sig = table.pair(table.methods[i], table.methods[j]).significant;
      text(out, cx, y + cell - 10, fmt(r) + (sig ? "*" : ""), 10);
    }
  }
  text(out, left, h - 30, "triangle: |r| > 0.5, square: 0.2-0.5, circle: < 0.2; * FDR-adjusted p < alpha", 10, "start");
  out << "</svg>\n";
  return out.str();
}

std::string mrs_bar_svg(const std::vector<std::string>& methods, const std::vector<double>& mrs) {
  const double bar = 26, left = 100, top = 40, plot_w = 300;
  const double w = left + plot_w + 80, h = top + bar * methods.size() + 50;
  const double max_rank = std::max<double>(1.0, static_cast<double>(methods.size()));
  std::ostringstream out;
  open_svg(out, w, h);
  text(out, w / 2, 20, "Mean Rank Score (lower is better)", 14);
  for (std::size_t i = 0; i < methods.size(); ++i) {
    const double y = top + bar * i;
    const double len = plot_w * mrs[i] / max_rank;
    out << "<rect class=\"bar\" x=\"" << fmt(left) << "\" y=\"" << fmt(y + 3) << "\" width=\"" << fmt(len)
        << "\" height=\"" << fmt(bar - 6) << "\" fill=\"#4c78a8\"/>\n";
    text(out, left - 6, y + bar / 2 + 4, methods[i], 11, "end");
    text(out, left + len + 6, y + bar / 2 + 4, fmt(mrs[i]), 10, "start");
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace xmil::report
