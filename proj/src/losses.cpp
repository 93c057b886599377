#include "increcap/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace icap::losses {

namespace {

constexpr double kMaskNegative = -1e30;

Tensor as_row(const Tensor& t) {
  if (t.ndim() == 1) return reshape(t, {1, static_cast<int>(t.size())});
  if (t.ndim() == 2) return t;
  throw std::invalid_argument("expected a vector or matrix of logits");
}

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite value");
}

void check_unit_rows(const Tensor& m, const char* what, double tol = 1e-6) {
  const int r = m.rows(), c = m.cols();
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      const double v = m.data()[static_cast<std::size_t>(i) * c + j];
      s += v * v;
    }
    if (std::abs(std::sqrt(s) - 1.0) > tol)
      throw std::invalid_argument(std::string(what) + ": row not unit-norm");
  }
}

}  // namespace

SmoothedTarget label_smooth(int target_index, int num_classes, double epsilon) {
  if (num_classes < 2) throw std::invalid_argument("label_smooth: K must be >= 2");
  if (target_index < 0 || target_index >= num_classes)
    throw std::invalid_argument("label_smooth: target index out of range");
  if (epsilon < 0.0 || epsilon >= 1.0)
    throw std::invalid_argument("label_smooth: epsilon must be in [0,1)");
  SmoothedTarget t;
  t.epsilon = epsilon;
  t.num_classes = num_classes;
  t.probs.assign(num_classes, epsilon / num_classes);
  t.probs[target_index] = 1.0 - epsilon + epsilon / num_classes;
  return t;
}

Tensor ce_with_ls(const Tensor& logits, int target_index, double epsilon) {
  Tensor row = as_row(logits);
  if (row.rows() != 1) throw std::invalid_argument("ce_with_ls: expected a single logit vector");
  return ce_with_ls_batch(row, {target_index}, epsilon);
}

Tensor ce_with_ls_batch(const Tensor& logits, const std::vector<int>& targets,
                        double epsilon) {
  check_finite(logits, "ce_with_ls");
  const int n = logits.rows(), k = logits.cols();
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("ce_with_ls: target count mismatch");
  for (int t : targets) (void)label_smooth(t, k, epsilon);  // validates range and eps
  Tensor logp = log_softmax_rows(logits);
  // -sum T_LS log P = -(1-eps) logP[t] - eps/K sum_k logP[k]
  Tensor picked = gather_rowwise(logp, targets);
  Tensor loss = scale(sum_all(picked), -(1.0 - epsilon) / n);
  if (epsilon > 0.0)
    loss = add(loss, scale(sum_all(logp), -epsilon / (static_cast<double>(k) * n)));
  return loss;
}

Tensor supcon_loss(const ContrastiveBatch& batch) {
  const Tensor& z = batch.embeddings;
  if (z.ndim() != 2 || z.rows() < 2)
    throw std::invalid_argument("supcon_loss: need at least 2 embedding rows");
  if (static_cast<int>(batch.labels.size()) != z.rows())
    throw std::invalid_argument("supcon_loss: label count mismatch");
  if (batch.temperature <= 0.0)
    throw std::invalid_argument("supcon_loss: temperature must be positive");
  check_unit_rows(z, "supcon_loss");

  const int n = z.rows();
  Tensor sim = scale(matmul_nt(z, z), 1.0 / batch.temperature);
  // exclude self-similarity from every softmax denominator
  std::vector<double> diag(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) diag[static_cast<std::size_t>(i) * n + i] = kMaskNegative;
  Tensor masked = add(sim, Tensor::from_data({n, n}, std::move(diag)));
  Tensor logp = log_softmax_rows(masked);

  std::vector<double> weights(static_cast<std::size_t>(n) * n, 0.0);
  bool any_positive = false;
  for (int i = 0; i < n; ++i) {
    int positives = 0;
    for (int j = 0; j < n; ++j)
      if (j != i && batch.labels[j] == batch.labels[i]) ++positives;
    if (positives == 0) continue;  // anchor excluded
    any_positive = true;
    for (int j = 0; j < n; ++j)
      if (j != i && batch.labels[j] == batch.labels[i])
        weights[static_cast<std::size_t>(i) * n + j] = -1.0 / positives;
  }
  if (!any_positive) return Tensor::zeros({1});
  return sum_all(mul(logp, Tensor::from_data({n, n}, std::move(weights))));
}

Tensor logit_distill_loss(const DistillPair& pair) {
  Tensor s = as_row(pair.student_logits);
  Tensor t = as_row(pair.teacher_logits);
  return logit_distill_loss_batch(s, t, pair.temperature);
}

Tensor logit_distill_loss_batch(const Tensor& student_logits,
                                const Tensor& teacher_logits, double temperature) {
  if (student_logits.shape() != teacher_logits.shape())
    throw std::invalid_argument("logit_distill_loss: logit shape mismatch");
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("logit_distill_loss: temperature must be finite and positive");
  const int n = student_logits.rows();
  Tensor soft_teacher =
      softmax_rows(scale(teacher_logits.detach(), 1.0 / temperature));
  Tensor logp = log_softmax_rows(scale(student_logits, 1.0 / temperature));
  return scale(sum_all(mul(soft_teacher.detach(), logp)), -1.0 / n);
}

namespace {

// InfoNCE alignment of student rows against the teacher rows of the same
// view: positive is the same-index teacher row, negatives the rest.
Tensor alignment(const Tensor& teacher, const Tensor& student, double temperature) {
  const int n = teacher.rows();
  Tensor sim = scale(matmul_nt(student, teacher.detach()), 1.0 / temperature);
  Tensor logp = log_softmax_rows(sim);
  std::vector<int> diag_ids(n);
  for (int i = 0; i < n; ++i) diag_ids[i] = i;
  return neg(sum_all(gather_rowwise(logp, diag_ids)));
}

}  // namespace

Tensor feature_distill_loss(const Tensor& student_v1, const Tensor& student_v2,
                            const Tensor& teacher_v1, const Tensor& teacher_v2,
                            double temperature) {
  if (student_v1.shape() != student_v2.shape() ||
      student_v1.shape() != teacher_v1.shape() ||
      student_v1.shape() != teacher_v2.shape())
    throw std::invalid_argument("feature_distill_loss: shape mismatch");
  if (temperature <= 0.0)
    throw std::invalid_argument("feature_distill_loss: temperature must be positive");
  check_unit_rows(student_v1, "feature_distill_loss");
  check_unit_rows(student_v2, "feature_distill_loss");
  check_unit_rows(teacher_v1, "feature_distill_loss");
  check_unit_rows(teacher_v2, "feature_distill_loss");
  Tensor a1 = alignment(teacher_v1, student_v1, temperature);
  Tensor a2 = alignment(teacher_v2, student_v2, temperature);
  return scale(add(a1, a2), 0.5);
}

Tensor ci_total_loss(const Tensor& ce_term, const Tensor& distill_term,
                     double lambda_old) {
  if (lambda_old < 0.0 || lambda_old > 1.0)
    throw std::invalid_argument("ci_total_loss: lambda must be in [0,1]");
  return add(scale(ce_term, 1.0 - lambda_old), scale(distill_term, lambda_old));
}

double ci_total_loss(double ce_term, double distill_term, double lambda_old) {
  if (lambda_old < 0.0 || lambda_old > 1.0)
    throw std::invalid_argument("ci_total_loss: lambda must be in [0,1]");
  if (!std::isfinite(ce_term) || !std::isfinite(distill_term))
    throw std::invalid_argument("ci_total_loss: non-finite term");
  return (1.0 - lambda_old) * ce_term + lambda_old * distill_term;
}

}  // namespace icap::losses
