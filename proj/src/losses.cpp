#include "mos/losses.hpp"

#include "mos/errors.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

namespace mos {

namespace {

std::atomic<long> g_supcon_degenerate{0};

// Row-wise log-softmax.
Mat log_softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

}  // namespace

void Hyperparams::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0,1]");
  if (!(lambda_origin >= 0.0) || !(lambda_object >= 0.0)) throw ConfigError("branch weights must be >= 0");
  for (double t : {tau_u, tau_c, tau_s, tau_t, warmup.start, warmup.end}) {
    if (!(t > 0.0)) throw ConfigError("temperatures must be strictly positive");
  }
  if (!(me_weight >= 0.0)) throw ConfigError("me_weight must be >= 0");
  if (warmup.epochs < 0) throw ConfigError("warmup epochs must be >= 0");
}

SupConValue sup_con_loss(const Mat& z, std::span<const int> labels, double tau) {
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) throw std::invalid_argument("sup_con_loss: label count");
  if (!(tau > 0.0)) throw std::invalid_argument("sup_con_loss: tau must be positive");
  const Eigen::Index n = z.rows();
  SupConValue out;
  out.grad = Mat::Zero(z.rows(), z.cols());
  if (n < 2) {
    out.degenerate = true;
    ++g_supcon_degenerate;
    return out;
  }
  const Mat sim = (z * z.transpose()) / tau;
  Mat coef = Mat::Zero(n, n);  // d loss / d sim(i, j)
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int positives = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i && labels[j] == labels[i]) ++positives;
    }
    if (positives == 0) continue;
    ++out.valid_anchors;
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) m = std::max(m, sim(i, j));
    }
    double denom = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) denom += std::exp(sim(i, j) - m);
    }
    const double lse = m + std::log(denom);
    double li = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      const double soft = std::exp(sim(i, j) - lse);
      const bool pos = labels[j] == labels[i];
      if (pos) li -= (sim(i, j) - lse) / positives;
      coef(i, j) = soft - (pos ? 1.0 / positives : 0.0);
    }
    total += li;
  }
  if (out.valid_anchors == 0) {
    out.degenerate = true;
    ++g_supcon_degenerate;
    return out;
  }
  const double inv = 1.0 / out.valid_anchors;
  out.value = total * inv;
  coef *= inv;
  out.grad = ((coef + coef.transpose()) * z) / tau;
  return out;
}

long sup_con_degenerate_count() { return g_supcon_degenerate.load(); }

PairLossValue info_nce_loss(const Mat& z1, const Mat& z2, double tau) {
  if (z1.rows() != z2.rows() || z1.cols() != z2.cols()) throw std::invalid_argument("info_nce_loss: view shapes differ");
  if (z1.rows() < 2) throw std::invalid_argument("info_nce_loss: needs a batch of at least 2 (no negatives)");
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce_loss: tau must be positive");
  const Eigen::Index b = z1.rows();
  const Mat s = (z1 * z2.transpose()) / tau;
  const Mat ls12 = log_softmax_rows(s);
  const Mat ls21 = log_softmax_rows(s.transpose());
  PairLossValue out;
  out.value = -0.5 * (ls12.diagonal().mean() + ls21.diagonal().mean());
  const Mat eye = Mat::Identity(b, b);
  const Mat d12 = (ls12.array().exp().matrix() - eye) / static_cast<double>(b);
  const Mat d21 = (ls21.array().exp().matrix() - eye) / static_cast<double>(b);
  const Mat ds = 0.5 * (d12 + d21.transpose());  // d loss / d s
  out.grad_a = (ds * z2) / tau;
  out.grad_b = (ds.transpose() * z1) / tau;
  return out;
}

LossValue sup_cls_loss(const Mat& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) throw std::invalid_argument("sup_cls_loss: label count");
  LossValue out;
  out.grad = Mat::Zero(logits.rows(), logits.cols());
  if (logits.rows() == 0) return out;
  const Mat ls = log_softmax_rows(logits);
  const double inv = 1.0 / static_cast<double>(logits.rows());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const int y = labels[r];
    if (y < 0 || y >= logits.cols()) throw std::out_of_range("sup_cls_loss: label outside [0, K)");
    out.value -= ls(r, y) * inv;
    out.grad.row(r) = ls.row(r).array().exp() * inv;
    out.grad(r, y) -= inv;
  }
  return out;
}

LossValue self_distill_loss(const Mat& student, const Mat& teacher, int views, double tau_s, double tau_t,
                            double me_weight) {
  if (!(tau_s > 0.0) || !(tau_t > 0.0)) throw std::invalid_argument("self_distill_loss: temperatures must be positive");
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols()) {
    throw std::invalid_argument("self_distill_loss: student/teacher shapes differ");
  }
  if (views < 2 || student.rows() % views != 0) throw std::invalid_argument("self_distill_loss: bad view count");
  const Eigen::Index n = student.rows();
  const Eigen::Index b = n / views;
  const Mat log_p = log_softmax_rows(student / tau_s);
  const Mat p = log_p.array().exp();
  const Mat q = log_softmax_rows(teacher / tau_t).array().exp();
  const double pairs = static_cast<double>(views) * (views - 1);

  LossValue out;
  out.grad = Mat::Zero(n, student.cols());
  const double ce_scale = 1.0 / (pairs * static_cast<double>(b));
  for (int a = 0; a < views; ++a) {
    for (int t = 0; t < views; ++t) {
      if (a == t) continue;
      const auto pa = p.middleRows(a * b, b);
      const auto lpa = log_p.middleRows(a * b, b);
      const auto qt = q.middleRows(t * b, b);
      out.value -= ce_scale * (qt.array() * lpa.array()).sum();
      out.grad.middleRows(a * b, b) += (ce_scale / tau_s) * (pa - qt);
    }
  }

  if (me_weight != 0.0) {
    const RowVec mean_p = p.colwise().mean();
    const RowVec log_mean = mean_p.array().max(1e-300).log();
    const double entropy = -(mean_p.array() * log_mean.array()).sum();
    out.value -= me_weight * entropy;
    const RowVec gk = -(log_mean.array() + 1.0);  // dH / d mean_p
    const double inv = 1.0 / (static_cast<double>(n) * tau_s);
    for (Eigen::Index r = 0; r < n; ++r) {
      const double dotp = p.row(r).dot(gk);
      const RowVec dh = inv * (p.row(r).array() * (gk.array() - dotp));
      out.grad.row(r) -= me_weight * dh;
    }
  }
  return out;
}

double branch_loss(const BranchParts& parts, double lambda) {
  return (1.0 - lambda) * (parts.un_nce + parts.un_cls) + lambda * (parts.sup_nce + parts.sup_cls);
}

double total_loss(double origin, double object, double lambda_origin, double lambda_object) {
  return lambda_origin * origin + lambda_object * object;
}

namespace ad {

Var sup_con(Var z, std::span<const int> labels, double tau) {
  SupConValue r = sup_con_loss(z.value(), labels, tau);
  return scalar_function({z}, r.value, {std::move(r.grad)});
}

Var info_nce(Var z1, Var z2, double tau) {
  PairLossValue r = info_nce_loss(z1.value(), z2.value(), tau);
  return scalar_function({z1, z2}, r.value, {std::move(r.grad_a), std::move(r.grad_b)});
}

Var sup_cls(Var logits, std::span<const int> labels) {
  LossValue r = sup_cls_loss(logits.value(), labels);
  return scalar_function({logits}, r.value, {std::move(r.grad)});
}

Var self_distill(Var student, Var teacher, int views, double tau_s, double tau_t, double me_weight) {
  LossValue r = self_distill_loss(student.value(), teacher.value(), views, tau_s, tau_t, me_weight);
  return scalar_function({student}, r.value, {std::move(r.grad)});
}

Var gather_rows(Var x, std::span<const int> rows) {
  std::vector<int> idx(rows.begin(), rows.end());
  Mat out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.rows()) throw std::out_of_range("gather_rows: index");
    out.row(static_cast<Eigen::Index>(i)) = x.value().row(idx[i]);
  }
  const Eigen::Index rows_in = x.rows();
  return x.tape().record(std::move(out), {x}, [x, idx, rows_in](Tape& t, const Mat& g) {
    Mat dx = Mat::Zero(rows_in, g.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(x, dx);
  });
}

BranchParts BranchTerms::values() const {
  return {un_nce.scalar(), un_cls.scalar(), sup_nce.scalar(), sup_cls.scalar()};
}

BranchTerms branch_terms(Var z, Var cosine, std::span<const int> labels, std::span<const char> labeled,
                         const Hyperparams& hp, double tau_t, const Mat* fixed_teacher) {
  const auto b = static_cast<Eigen::Index>(labels.size());
  if (labeled.size() != labels.size() || z.rows() != 2 * b || cosine.rows() != 2 * b) {
    throw std::invalid_argument("branch_terms: expected two stacked views of the batch");
  }
  Tape& tape = z.tape();
  BranchTerms terms;
  terms.un_nce = info_nce(slice_rows(z, 0, b), slice_rows(z, b, b), hp.tau_u);
  const Var teacher = fixed_teacher != nullptr ? tape.constant(*fixed_teacher) : tape.detach(cosine);
  terms.un_cls = self_distill(cosine, teacher, 2, hp.tau_s, tau_t, hp.me_weight);

  std::vector<int> rows;
  std::vector<int> row_labels;
  for (int view = 0; view < 2; ++view) {
    for (Eigen::Index i = 0; i < b; ++i) {
      if (labeled[i] != 0) {
        rows.push_back(static_cast<int>(view * b + i));
        row_labels.push_back(labels[i]);
      }
    }
  }
  if (rows.empty()) {
    terms.sup_nce = tape.constant(Mat::Zero(1, 1));
    terms.sup_cls = tape.constant(Mat::Zero(1, 1));
  } else {
    terms.sup_nce = sup_con(gather_rows(z, rows), row_labels, hp.tau_c);
    terms.sup_cls = sup_cls(scale(gather_rows(cosine, rows), 1.0 / hp.tau_s), row_labels);
  }
  return terms;
}

Var branch_loss(const BranchTerms& terms, double lambda) {
  return weighted_sum({{1.0 - lambda, terms.un_nce},
                       {1.0 - lambda, terms.un_cls},
                       {lambda, terms.sup_nce},
                       {lambda, terms.sup_cls}});
}

}  // namespace ad
}  // namespace mos
