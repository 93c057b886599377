#pragma once
// Training objectives for both stages: label-smoothed cross-entropy, the
// supervised contrastive loss, softened-logit distillation, and the
// teacher/student feature-alignment distillation used by the incremental
// procedure. All return scalar graph tensors; gradients come from backward().

#include <vector>

#include "increcap/tensor.hpp"

namespace icap::losses {

struct SmoothedTarget {
  std::vector<double> probs;
  double epsilon = 0.0;
  int num_classes = 0;
};

// One-hot target at target_index smoothed to (1-eps)+eps/K / eps/K.
SmoothedTarget label_smooth(int target_index, int num_classes, double epsilon);

// -sum_k T_LS[k] log softmax(logits)[k]; logits is {K} or {1,K}.
Tensor ce_with_ls(const Tensor& logits, int target_index, double epsilon);

// Mean over rows of the per-row smoothed CE; logits {n,K}.
Tensor ce_with_ls_batch(const Tensor& logits, const std::vector<int>& targets,
                        double epsilon);

struct ContrastiveBatch {
  Tensor embeddings;        // {2N, d}, unit-norm rows
  std::vector<int> labels;  // length 2N
  double temperature = 0.07;
};

// Supervised contrastive loss over the batch. Anchors without any positive
// are excluded from the outer sum.
Tensor supcon_loss(const ContrastiveBatch& batch);

struct DistillPair {
  Tensor student_logits;  // {K} or {1,K}
  Tensor teacher_logits;  // same shape, treated as constant
  double temperature = 3.0;
};

// -sum_k softmax(teacher/D)[k] log softmax(student/D)[k]
Tensor logit_distill_loss(const DistillPair& pair);

// Batched form: student/teacher {n,K}, mean over rows.
Tensor logit_distill_loss_batch(const Tensor& student_logits,
                                const Tensor& teacher_logits, double temperature);

// Contrastive alignment of student rows to same-index teacher rows, averaged
// over the two augmented views. Teacher rows carry no gradient.
Tensor feature_distill_loss(const Tensor& student_v1, const Tensor& student_v2,
                            const Tensor& teacher_v1, const Tensor& teacher_v2,
                            double temperature);

// (1-lambda_old) * ce + lambda_old * distill
Tensor ci_total_loss(const Tensor& ce_term, const Tensor& distill_term,
                     double lambda_old);
double ci_total_loss(double ce_term, double distill_term, double lambda_old);

}  // namespace icap::losses
