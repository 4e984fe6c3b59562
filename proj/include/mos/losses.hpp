#pragma once

// Per-branch GCD objective: supervised/unsupervised contrastive terms,
// supervised cross-entropy and teacher-student self-distillation, combined
// per branch as (1-lambda)(un_nce + un_cls) + lambda(sup_nce + sup_cls) and
// across branches as lambda_origin * L_origin + lambda_object * L_object.
//
// Each loss returns its value and the analytic gradient with respect to the
// differentiable input; the ad:: wrappers splice them into a Tape.

#include "mos/autodiff.hpp"

#include <span>

namespace mos {

struct TauWarmup {
  double start = 0.04;
  double end = 0.07;
  int epochs = 20;  // 0 disables the ramp
};

struct Hyperparams {
  double lambda = 0.35;        // supervised share inside a branch
  double lambda_origin = 1.0;  // branch weights
  double lambda_object = 1.0;
  double tau_u = 0.07;  // unsupervised contrastive
  double tau_c = 1.0;   // supervised contrastive
  double tau_s = 0.1;   // student
  double tau_t = 0.07;  // teacher (after warm-up)
  double me_weight = 1.0;
  TauWarmup warmup;

  /// Throws ConfigError on a non-positive temperature or lambda outside [0,1].
  void validate() const;
};

struct LossValue {
  double value = 0.0;
  Mat grad;
};

struct PairLossValue {
  double value = 0.0;
  Mat grad_a;
  Mat grad_b;
};

struct SupConValue : LossValue {
  int valid_anchors = 0;
  bool degenerate = false;  // no anchor had a positive; value defined as 0
};

/// Supervised contrastive loss over rows of `z` (assumed unit norm). For
/// anchor i with positives P(i) (same label, other index):
///   L_i = -1/|P(i)| sum_p log( exp(z_i.z_p/tau) / sum_{a != i} exp(z_i.z_a/tau) )
/// averaged over anchors with |P(i)| > 0.
SupConValue sup_con_loss(const Mat& z, std::span<const int> labels, double tau);

/// Number of sup_con_loss calls that found no positive pair at all.
long sup_con_degenerate_count();

/// Symmetric cross-view InfoNCE: mean of CE(z1 z2^T / tau, diag) and
/// CE(z2 z1^T / tau, diag). Needs at least two rows.
PairLossValue info_nce_loss(const Mat& z1, const Mat& z2, double tau);

/// Mean softmax cross-entropy.
LossValue sup_cls_loss(const Mat& logits, std::span<const int> labels);

/// Cross-view teacher-student cross-entropy. `student` and `teacher` stack
/// `views` equally sized blocks of rows. Student distribution
/// softmax(student/tau_s), teacher softmax(teacher/tau_t); every pair of
/// distinct views contributes, averaged. Subtracts me_weight * H(mean student
/// prediction). Gradient is with respect to the student only.
LossValue self_distill_loss(const Mat& student, const Mat& teacher, int views, double tau_s, double tau_t,
                            double me_weight);

struct BranchParts {
  double un_nce = 0.0;
  double un_cls = 0.0;
  double sup_nce = 0.0;
  double sup_cls = 0.0;
};

double branch_loss(const BranchParts& parts, double lambda);
double total_loss(double origin, double object, double lambda_origin, double lambda_object);

namespace ad {

Var sup_con(Var z, std::span<const int> labels, double tau);
Var info_nce(Var z1, Var z2, double tau);
Var sup_cls(Var logits, std::span<const int> labels);
/// The teacher is detached before use.
Var self_distill(Var student, Var teacher, int views, double tau_s, double tau_t, double me_weight);

/// Selects rows by index (with repetition allowed).
Var gather_rows(Var x, std::span<const int> rows);

struct BranchTerms {
  Var un_nce;
  Var un_cls;
  Var sup_nce;
  Var sup_cls;

  [[nodiscard]] BranchParts values() const;
};

/// All four terms for one branch. `z` and `cosine` stack two augmented views
/// (rows [view1; view2]); `labels`/`labeled` describe the B images of a view.
/// Supervised terms use labeled rows only and are 0 without any; unsupervised
/// terms use every row. The teacher is detach(cosine) unless `fixed_teacher`
/// is given (used to check gradients against finite differences).
BranchTerms branch_terms(Var z, Var cosine, std::span<const int> labels, std::span<const char> labeled,
                         const Hyperparams& hp, double tau_t, const Mat* fixed_teacher = nullptr);

Var branch_loss(const BranchTerms& terms, double lambda);

}  // namespace ad
}  // namespace mos
