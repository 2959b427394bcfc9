#include "offrl/eval/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace offrl::eval {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
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

void write_file(const std::filesystem::path& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << body;
  if (!out.flush()) throw std::runtime_error("write failed: " + path.string());
}

constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 160, kTop = 40, kBottom = 50;
const char* const kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string color(std::size_t i) { return kColors[i % (sizeof kColors / sizeof kColors[0])]; }

struct Range {
  double lo = 0, hi = 1;
  void pad() {
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

std::string svg_open(const std::string& title) {
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << xml_escape(title)
    << "</text>\n";
  return o.str();
}

std::string axes(const Range& y) {
  std::ostringstream o;
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  o << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = y.lo + (y.hi - y.lo) * i / 4.0;
    const double py = y0 - (y0 - y1) * i / 4.0;
    o << "<text x=\"" << x0 - 6 << "\" y=\"" << py + 4 << "\" text-anchor=\"end\">" << num(v).substr(0, 5)
      << "</text>\n";
  }
  return o.str();
}

std::string legend(const std::vector<Series>& series) {
  std::ostringstream o;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 10 + 18.0 * static_cast<double>(i);
    o << "<rect x=\"" << kWidth - kRight + 12 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\""
      << color(i) << "\"/>\n<text x=\"" << kWidth - kRight + 28 << "\" y=\"" << y << "\">"
      << xml_escape(series[i].name) << "</text>\n";
  }
  return o.str();
}

}  // namespace

std::string generation_csv(const std::vector<GenerationReport>& rows) {
  std::string s = "method,seed,fraction,contexts,click,token_f1,bleu,perplexity\n";
  for (const auto& r : rows) {
    s += r.method + "," + std::to_string(r.seed) + "," + num(r.fraction) + "," + std::to_string(r.contexts) + "," +
         num(r.click) + "," + num(r.token_f1) + "," + num(r.bleu) + "," + num(r.perplexity) + "\n";
  }
  return s;
}

std::string histogram_csv(const std::vector<GenerationReport>& rows) {
  std::string s = "method,seed,bin_lo,bin_hi,mass\n";
  for (const auto& r : rows) {
    for (int b = 0; b < kHistogramBins; ++b) {
      s += r.method + "," + std::to_string(r.seed) + "," + num(static_cast<double>(b) / kHistogramBins) + "," +
           num(static_cast<double>(b + 1) / kHistogramBins) + "," + num(r.histogram[static_cast<std::size_t>(b)]) +
           "\n";
    }
  }
  return s;
}

std::string topk_csv(const std::vector<GenerationReport>& rows) {
  std::string s = "method,seed,k,reward\n";
  for (const auto& r : rows) {
    for (std::size_t k = 0; k < r.topk.size(); ++k) {
      s += r.method + "," + std::to_string(r.seed) + "," + std::to_string(k + 1) + "," + num(r.topk[k]) + "\n";
    }
  }
  return s;
}

std::string ranker_csv(const std::vector<RankReport>& rows) {
  std::string s = "method,seed,mean_reward,candidates_hash\n";
  for (const auto& r : rows) {
    s += r.method + "," + std::to_string(r.seed) + "," + num(r.mean_reward) + "," + r.candidates_hash + "\n";
  }
  return s;
}

std::string ablation_csv(const std::vector<AblationPoint>& rows) {
  std::string s = "method,param,value,records\n";
  for (const auto& r : rows) {
    s += r.method + "," + num(r.param) + "," + num(r.value) + "," + std::to_string(r.records) + "\n";
  }
  return s;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  Range xr{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  Range yr = xr;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("series '" + s.name + "' has mismatched x and y");
    for (double v : s.x) xr = {std::min(xr.lo, v), std::max(xr.hi, v)};
    for (double v : s.y) {
      if (std::isfinite(v)) yr = {std::min(yr.lo, v), std::max(yr.hi, v)};
    }
  }
  if (!std::isfinite(xr.lo)) xr = {0, 1};
  if (!std::isfinite(yr.lo)) yr = {0, 1};
  xr.pad();
  yr.pad();
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  auto px = [&](double v) { return x0 + (v - xr.lo) / (xr.hi - xr.lo) * (x1 - x0); };
  auto py = [&](double v) { return y0 - (v - yr.lo) / (yr.hi - yr.lo) * (y0 - y1); };

  std::ostringstream o;
  o << svg_open(title) << axes(yr);
  std::set<double> ticks;
  for (const auto& s : series) ticks.insert(s.x.begin(), s.x.end());
  if (ticks.size() <= 12) {
    for (double t : ticks) {
      o << "<text x=\"" << px(t) << "\" y=\"" << y0 + 16 << "\" text-anchor=\"middle\">" << num(t).substr(0, 5)
        << "</text>\n";
    }
  }
  o << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
    << xml_escape(x_label) << "</text>\n";
  o << "<text x=\"16\" y=\"" << (y0 + y1) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (y0 + y1) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    std::string pts;
    for (std::size_t k = 0; k < series[i].x.size(); ++k) {
      if (!std::isfinite(series[i].y[k])) continue;
      pts += num(px(series[i].x[k])) + "," + num(py(series[i].y[k])) + " ";
      o << "<circle cx=\"" << px(series[i].x[k]) << "\" cy=\"" << py(series[i].y[k]) << "\" r=\"3\" fill=\""
        << color(i) << "\"/>\n";
    }
    o << "<polyline fill=\"none\" stroke=\"" << color(i) << "\" stroke-width=\"2\" points=\"" << pts << "\"/>\n";
  }
  o << legend(series) << "</svg>\n";
  return o.str();
}

std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& series) {
  Range yr{0.0, 0.0};
  for (const auto& s : series) {
    if (s.y.size() != categories.size()) throw std::invalid_argument("series '" + s.name + "' does not match the categories");
    for (double v : s.y) {
      if (std::isfinite(v)) yr = {std::min(yr.lo, v), std::max(yr.hi, v)};
    }
  }
  yr.pad();
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  auto py = [&](double v) { return y0 - (v - yr.lo) / (yr.hi - yr.lo) * (y0 - y1); };
  const double group = categories.empty() ? 0.0 : (x1 - x0) / static_cast<double>(categories.size());
  const double bar = series.empty() ? 0.0 : group * 0.8 / static_cast<double>(series.size());

  std::ostringstream o;
  o << svg_open(title) << axes(yr);
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double gx = x0 + group * static_cast<double>(c);
    o << "<text x=\"" << gx + group / 2 << "\" y=\"" << y0 + 16 << "\" text-anchor=\"middle\">"
      << xml_escape(categories[c]) << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
      const double v = series[i].y[c];
      if (!std::isfinite(v)) continue;
      const double top = py(std::max(v, 0.0)), base = py(std::min(v, 0.0));
      o << "<rect x=\"" << gx + group * 0.1 + bar * static_cast<double>(i) << "\" y=\"" << top << "\" width=\"" << bar
        << "\" height=\"" << base - top << "\" fill=\"" << color(i) << "\"/>\n";
    }
  }
  o << legend(series) << "</svg>\n";
  return o.str();
}

std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create report directory " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& body) {
    write_file(dir / name, body);
    written.push_back(dir / name);
  };

  if (!report.generation.empty()) {
    put("generation.csv", generation_csv(report.generation));
    put("histogram.csv", histogram_csv(report.generation));
    put("topk.csv", topk_csv(report.generation));

    // Plots average over seeds per method, in first-seen method order.
    std::vector<std::string> methods;
    for (const auto& g : report.generation) {
      if (std::find(methods.begin(), methods.end(), g.method) == methods.end()) methods.push_back(g.method);
    }
    std::vector<Series> hist, topk;
    Series click{"click", {}, {}};
    for (const auto& m : methods) {
      Series h{m, {}, std::vector<double>(kHistogramBins, 0.0)};
      Series t{m, {}, {}};
      double clicks = 0.0;
      int count = 0;
      for (const auto& g : report.generation) {
        if (g.method != m) continue;
        ++count;
        clicks += g.click;
        for (int b = 0; b < kHistogramBins; ++b) h.y[static_cast<std::size_t>(b)] += g.histogram[static_cast<std::size_t>(b)];
        if (t.y.size() < g.topk.size()) t.y.resize(g.topk.size(), 0.0);
        for (std::size_t k = 0; k < g.topk.size(); ++k) t.y[k] += g.topk[k];
      }
      for (auto& v : h.y) v /= count;
      for (auto& v : t.y) v /= count;
      for (int b = 0; b < kHistogramBins; ++b) h.x.push_back((b + 0.5) / kHistogramBins);
      for (std::size_t k = 0; k < t.y.size(); ++k) t.x.push_back(static_cast<double>(k + 1));
      click.y.push_back(clicks / count);
      hist.push_back(std::move(h));
      if (!t.y.empty()) topk.push_back(std::move(t));
    }
    put("click.svg", bar_chart_svg("Greedy click rate", methods, {click}));
    put("histogram.svg", line_chart_svg("Similarity histogram", "similarity", "mass", hist));
    if (!topk.empty()) put("topk.svg", line_chart_svg("Best-of-k reward", "k", "reward", topk));
  }

  if (!report.ranker.empty()) {
    put("ranker.csv", ranker_csv(report.ranker));
    std::vector<std::string> methods;
    for (const auto& r : report.ranker) {
      if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    }
    Series s{"mean reward", {}, {}};
    for (const auto& m : methods) {
      double total = 0.0;
      int count = 0;
      for (const auto& r : report.ranker) {
        if (r.method == m) {
          total += r.mean_reward;
          ++count;
        }
      }
      s.y.push_back(total / count);
    }
    put("ranker.svg", bar_chart_svg("Ranker reward", methods, {s}));
  }

  for (const auto& [name, points] : report.ablations) {
    put("ablation_" + name + ".csv", ablation_csv(points));
    std::vector<Series> series;
    for (const auto& p : points) {
      auto it = std::find_if(series.begin(), series.end(), [&](const Series& s) { return s.name == p.method; });
      if (it == series.end()) {
        series.push_back({p.method, {}, {}});
        it = series.end() - 1;
      }
      it->x.push_back(p.param);
      it->y.push_back(p.value);
    }
    put("ablation_" + name + ".svg", line_chart_svg("Ablation: " + name, name, "greedy reward", series));
  }
  return written;
}

}  // namespace offrl::eval
