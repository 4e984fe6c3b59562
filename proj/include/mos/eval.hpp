#pragma once

// Clustering accuracy under the optimal label permutation, base/novel and
// ambiguity-quadrant breakdowns, and backbone feature deviation statistics.

#include "mos/autodiff.hpp"
#include "mos/core_data.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace mos {

/// Minimum-cost perfect matching on a square matrix. result[row] = column.
/// Among all optimal assignments the lexicographically smallest one (by the
/// row-ordered column sequence) is returned. Throws std::invalid_argument on
/// a non-square or non-finite input.
std::vector<int> assignment_solve(const Mat& cost);

/// Sum of cost(i, assignment[i]) in row order.
double assignment_cost(const Mat& cost, std::span<const int> assignment);

struct QuadrantStat {
  double acc = 0.0;
  int count = 0;
};

struct EvalReport {
  double acc_all = 0.0;
  double acc_base = 0.0;
  double acc_novel = 0.0;
  int n_all = 0;
  int n_base = 0;
  int n_novel = 0;
  std::map<Quadrant, QuadrantStat> quadrant_acc;  // empty buckets are absent
  std::vector<int> matching;                      // predicted cluster -> ground-truth class
  int epoch = -1;
};

/// Accuracy of `y_pred` under the single matching G found over all rows;
/// base/novel scores restrict that same matched indicator by ground truth.
/// `num_classes` <= 0 infers K from the labels.
EvalReport cluster_acc(std::span<const int> y_true, std::span<const int> y_pred, const std::set<int>& base_classes,
                       int num_classes = 0);

/// Per-quadrant mean of 1(y_true == G(y_pred)). Rows without a quadrant are
/// skipped; throws DataError when no row has one.
std::map<Quadrant, QuadrantStat> quadrant_report(std::span<const int> y_true, std::span<const int> y_pred,
                                                 std::span<const std::optional<Quadrant>> quadrants,
                                                 std::span<const int> matching);

struct DeviationStats {
  double mean_dev = 0.0;
  double l1_dev = 0.0;
  long step = 0;
  int epoch = 0;
};

DeviationStats feature_deviation(const Mat& v_x, const Mat& v_o);

/// Rows of a deviation log (`epoch,step,mean_dev,l1_dev`).
std::vector<DeviationStats> read_deviation_log(const std::filesystem::path& path);
void write_deviation_log(const std::filesystem::path& path, std::span<const DeviationStats> rows);

struct DeviationSummary {
  double initial_l1 = 0.0;
  double final_l1 = 0.0;
  bool l1_increased = false;
  double mean_dev_min = 0.0;
  double mean_dev_max = 0.0;
  [[nodiscard]] double mean_dev_range() const { return mean_dev_max - mean_dev_min; }
  /// Range width in units of the initial l1_dev (0 when that is 0).
  double range_over_initial_l1 = 0.0;
};

/// Throws DataError on an empty log.
DeviationSummary summarize_deviation(std::span<const DeviationStats> rows);
std::string format_deviation_summary(const DeviationSummary& summary);

/// `id,label,z_0,...,z_{p-1}`; values printed with round-trip precision.
void write_embeddings_csv(const std::filesystem::path& path, std::span<const std::string> ids,
                          std::span<const int> labels, const Mat& z);

std::string eval_report_json(const EvalReport& report, int indent = 2);
void write_eval_report(const std::filesystem::path& path, const EvalReport& report);

/// Human-readable All/Base/Novel line plus one line per present quadrant.
std::string format_eval_report(const EvalReport& report);

}  // namespace mos
