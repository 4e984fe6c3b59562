#include "mos/eval.hpp"

#include "mos/errors.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mos {

namespace {

struct HungarianResult {
  std::vector<int> row_to_col;
  std::vector<double> u;  // row potentials
  std::vector<double> v;  // column potentials
};

// Shortest augmenting path Hungarian method; potentials satisfy
// u[i] + v[j] <= c(i, j) with equality on the returned matching.
HungarianResult hungarian(const Mat& c) {
  const int n = static_cast<int>(c.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  HungarianResult out;
  out.row_to_col.assign(n, -1);
  for (int j = 1; j <= n; ++j) out.row_to_col[p[j] - 1] = j - 1;
  out.u.assign(u.begin() + 1, u.end());
  out.v.assign(v.begin() + 1, v.end());
  return out;
}

// Alternating path search in the tight graph: can free row `r` reach free
// column `target` while only re-routing rows that are not yet fixed?
bool augment(int r, int target, const std::vector<std::vector<char>>& tight, std::vector<int>& row_to_col,
             std::vector<int>& col_to_row, const std::vector<char>& fixed, std::vector<char>& seen) {
  const int n = static_cast<int>(row_to_col.size());
  for (int j = 0; j < n; ++j) {
    if (!tight[r][j] || seen[j]) continue;
    seen[j] = 1;
    const int owner = col_to_row[j];
    if (j == target && owner < 0) {
      row_to_col[r] = j;
      col_to_row[j] = r;
      return true;
    }
    if (owner < 0 || fixed[owner]) continue;
    if (augment(owner, target, tight, row_to_col, col_to_row, fixed, seen)) {
      row_to_col[r] = j;
      col_to_row[j] = r;
      return true;
    }
  }
  return false;
}

}  // namespace

std::vector<int> assignment_solve(const Mat& cost) {
  if (cost.rows() != cost.cols()) throw std::invalid_argument("assignment_solve: cost matrix must be square");
  if (!cost.allFinite()) throw std::invalid_argument("assignment_solve: cost matrix has non-finite entries");
  const int n = static_cast<int>(cost.rows());
  if (n == 0) return {};

  // Every optimal assignment uses only edges that are tight under an optimal
  // dual, so the lexicographic choice can be made greedily inside that graph.
  const HungarianResult h = hungarian(cost);
  const double tol = 1e-9 * (1.0 + cost.cwiseAbs().maxCoeff());
  std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) tight[i][j] = std::abs(cost(i, j) - h.u[i] - h.v[j]) <= tol ? 1 : 0;
  }
  std::vector<int> row_to_col = h.row_to_col;
  std::vector<int> col_to_row(n);
  for (int i = 0; i < n; ++i) col_to_row[row_to_col[i]] = i;
  std::vector<char> fixed(n, 0);
  std::vector<char> seen(n);

  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (!tight[i][j] || (col_to_row[j] >= 0 && fixed[col_to_row[j]])) continue;
      if (row_to_col[i] == j) break;
      // Move row i onto column j and re-route the row displaced from j to
      // the column i leaves behind.
      const std::vector<int> save_r2c = row_to_col;
      const std::vector<int> save_c2r = col_to_row;
      const int displaced = col_to_row[j];
      const int freed = row_to_col[i];
      row_to_col[i] = j;
      col_to_row[j] = i;
      col_to_row[freed] = -1;
      row_to_col[displaced] = -1;
      fixed[i] = 1;
      std::fill(seen.begin(), seen.end(), 0);
      if (augment(displaced, freed, tight, row_to_col, col_to_row, fixed, seen)) break;
      row_to_col = save_r2c;
      col_to_row = save_c2r;
      fixed[i] = 0;
    }
    fixed[i] = 1;
  }
  return row_to_col;
}

double assignment_cost(const Mat& cost, std::span<const int> assignment) {
  double total = 0.0;
  for (std::size_t i = 0; i < assignment.size(); ++i) total += cost(static_cast<Eigen::Index>(i), assignment[i]);
  return total;
}

EvalReport cluster_acc(std::span<const int> y_true, std::span<const int> y_pred, const std::set<int>& base_classes,
                       int num_classes) {
  if (y_true.size() != y_pred.size()) throw std::invalid_argument("cluster_acc: label lists differ in length");
  int k = num_classes;
  if (k <= 0) {
    for (int y : y_true) k = std::max(k, y + 1);
    for (int y : y_pred) k = std::max(k, y + 1);
  }
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] < 0 || y_true[i] >= k || y_pred[i] < 0 || y_pred[i] >= k) {
      throw std::out_of_range("cluster_acc: label outside [0, K)");
    }
  }
  EvalReport r;
  r.n_all = static_cast<int>(y_true.size());
  if (k == 0) return r;
  Mat counts = Mat::Zero(k, k);  // predicted x true
  for (std::size_t i = 0; i < y_true.size(); ++i) counts(y_pred[i], y_true[i]) += 1.0;
  r.matching = assignment_solve(-counts);

  long hit_all = 0, hit_base = 0, hit_novel = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const bool hit = r.matching[y_pred[i]] == y_true[i];
    const bool base = base_classes.contains(y_true[i]);
    hit_all += hit;
    if (base) {
      ++r.n_base;
      hit_base += hit;
    } else {
      ++r.n_novel;
      hit_novel += hit;
    }
  }
  if (r.n_all > 0) r.acc_all = static_cast<double>(hit_all) / r.n_all;
  if (r.n_base > 0) r.acc_base = static_cast<double>(hit_base) / r.n_base;
  if (r.n_novel > 0) r.acc_novel = static_cast<double>(hit_novel) / r.n_novel;
  return r;
}

std::map<Quadrant, QuadrantStat> quadrant_report(std::span<const int> y_true, std::span<const int> y_pred,
                                                 std::span<const std::optional<Quadrant>> quadrants,
                                                 std::span<const int> matching) {
  if (y_true.size() != y_pred.size() || y_true.size() != quadrants.size()) {
    throw std::invalid_argument("quadrant_report: inputs differ in length");
  }
  std::map<Quadrant, long> hits;
  std::map<Quadrant, QuadrantStat> out;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (!quadrants[i]) continue;
    if (y_pred[i] < 0 || static_cast<std::size_t>(y_pred[i]) >= matching.size()) {
      throw std::out_of_range("quadrant_report: prediction outside the matching");
    }
    ++out[*quadrants[i]].count;
    hits[*quadrants[i]] += matching[y_pred[i]] == y_true[i];
  }
  if (out.empty()) throw DataError("quadrant_report: no instance carries a quadrant label");
  for (auto& [q, stat] : out) stat.acc = static_cast<double>(hits[q]) / stat.count;
  return out;
}

DeviationStats feature_deviation(const Mat& v_x, const Mat& v_o) {
  if (v_x.rows() != v_o.rows() || v_x.cols() != v_o.cols()) throw std::invalid_argument("feature_deviation: shape mismatch");
  DeviationStats s;
  if (v_x.size() == 0) return s;
  const Mat diff = v_x - v_o;
  s.mean_dev = diff.mean();
  s.l1_dev = (diff.cwiseAbs().rowwise().sum() / static_cast<double>(diff.cols())).mean();
  return s;
}

void write_embeddings_csv(const std::filesystem::path& path, std::span<const std::string> ids,
                          std::span<const int> labels, const Mat& z) {
  if (ids.size() != labels.size() || static_cast<Eigen::Index>(ids.size()) != z.rows()) {
    throw std::invalid_argument("write_embeddings_csv: row counts differ");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "id,label";
  for (Eigen::Index j = 0; j < z.cols(); ++j) out << ",z_" << j;
  out << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    out << ids[i] << ',' << labels[i];
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", z(i, j));
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<DeviationStats> read_deviation_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open deviation log " + path.string());
  std::vector<DeviationStats> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line.rfind("epoch,step,mean_dev,l1_dev", 0) != 0) throw ParseError("unexpected deviation log header", 1);
      continue;
    }
    if (line.empty()) continue;
    DeviationStats d;
    char extra = 0;
    if (std::sscanf(line.c_str(), "%d,%ld,%lf,%lf%c", &d.epoch, &d.step, &d.mean_dev, &d.l1_dev, &extra) != 4) {
      throw ParseError("malformed deviation row", line_no);
    }
    rows.push_back(d);
  }
  return rows;
}

void write_deviation_log(const std::filesystem::path& path, std::span<const DeviationStats> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "epoch,step,mean_dev,l1_dev\n";
  char buf[96];
  for (const DeviationStats& d : rows) {
    std::snprintf(buf, sizeof buf, "%d,%ld,%.17g,%.17g\n", d.epoch, d.step, d.mean_dev, d.l1_dev);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path.string());
}

DeviationSummary summarize_deviation(std::span<const DeviationStats> rows) {
  if (rows.empty()) throw DataError("deviation log has no rows");
  DeviationSummary s;
  s.initial_l1 = rows.front().l1_dev;
  s.final_l1 = rows.back().l1_dev;
  s.l1_increased = s.final_l1 > s.initial_l1;
  s.mean_dev_min = s.mean_dev_max = rows.front().mean_dev;
  for (const DeviationStats& d : rows) {
    s.mean_dev_min = std::min(s.mean_dev_min, d.mean_dev);
    s.mean_dev_max = std::max(s.mean_dev_max, d.mean_dev);
  }
  s.range_over_initial_l1 = s.initial_l1 > 0.0 ? s.mean_dev_range() / s.initial_l1 : 0.0;
  return s;
}

std::string format_deviation_summary(const DeviationSummary& s) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "l1_dev initial %.6g final %.6g increased %s; mean_dev range [%.6g, %.6g] width %.6g "
                "(%.4g x initial l1_dev)",
                s.initial_l1, s.final_l1, s.l1_increased ? "true" : "false", s.mean_dev_min, s.mean_dev_max,
                s.mean_dev_range(), s.range_over_initial_l1);
  return buf;
}

std::string eval_report_json(const EvalReport& report, int indent) {
  nlohmann::ordered_json j;
  j["epoch"] = report.epoch;
  j["acc_all"] = report.acc_all;
  j["acc_base"] = report.n_base > 0 ? nlohmann::ordered_json(report.acc_base) : nlohmann::ordered_json();
  j["acc_novel"] = report.n_novel > 0 ? nlohmann::ordered_json(report.acc_novel) : nlohmann::ordered_json();
  j["n_all"] = report.n_all;
  j["n_base"] = report.n_base;
  j["n_novel"] = report.n_novel;
  nlohmann::ordered_json quads = nlohmann::ordered_json::object();
  for (const auto& [q, stat] : report.quadrant_acc) quads[to_string(q)] = {{"acc", stat.acc}, {"n", stat.count}};
  j["quadrant_acc"] = quads;
  j["matching"] = report.matching;
  return j.dump(indent);
}

void write_eval_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << eval_report_json(report) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::string format_eval_report(const EvalReport& report) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "All %.4f  Base %.4f (n=%d)  Novel %.4f (n=%d)  [N=%d]\n", report.acc_all,
                report.acc_base, report.n_base, report.acc_novel, report.n_novel, report.n_all);
  os << buf;
  for (const auto& [q, stat] : report.quadrant_acc) {
    std::snprintf(buf, sizeof buf, "  %-26s %.4f (n=%d)\n", to_string(q), stat.acc, stat.count);
    os << buf;
  }
  return os.str();
}

}  // namespace mos
