#pragma once

// CSV and SVG emission for evaluation reports.
//
// CSV schemas (one header row, fixed column order, numbers with 6 decimals):
//   generation.csv  method,seed,fraction,contexts,click,token_f1,bleu,perplexity
//   histogram.csv   method,seed,bin_lo,bin_hi,mass
//   topk.csv        method,seed,k,reward
//   ranker.csv      method,seed,mean_reward,candidates_hash
//   ablation_<name>.csv  method,param,value,records

#include "offrl/eval/eval.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace offrl::eval {

struct Report {
  std::vector<GenerationReport> generation;
  std::vector<RankReport> ranker;
  std::map<std::string, std::vector<AblationPoint>> ablations;  // name -> curve
};

/// Writes the CSV files and one SVG plot per figure into `dir` (created if
/// missing). Identical reports give identical bytes. Returns the files written.
std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& dir);

std::string generation_csv(const std::vector<GenerationReport>& rows);
std::string histogram_csv(const std::vector<GenerationReport>& rows);
std::string topk_csv(const std::vector<GenerationReport>& rows);
std::string ranker_csv(const std::vector<RankReport>& rows);
std::string ablation_csv(const std::vector<AblationPoint>& rows);

/// Minimal line chart: one polyline per series.
struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);
/// Grouped bar chart over shared categories.
std::string bar_chart_svg(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& series);

}  // namespace offrl::eval
