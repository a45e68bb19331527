#pragma once

// Out-of-distribution batch distillation. The teacher's OOD score is squashed
// by a learnable sigmoid into the pair h~ = (c, 1 - c); the student maps its
// softmax output through H to h^ on the same 2-simplex; the two are aligned
// with the batch-wise identity loss over all (seen and generated) rows.

#include <cmath>
#include <string>
#include <vector>

#include "d3gzsl/error.hpp"
#include "d3gzsl/id2sd.hpp"
#include "d3gzsl/nn.hpp"
#include "d3gzsl/tensor.hpp"

namespace d3gzsl {

enum class OodMethod { msp, energy };

inline std::string to_string(OodMethod m) { return m == OodMethod::msp ? "msp" : "energy"; }

inline OodMethod parse_ood_method(const std::string& s) {
  if (s == "msp") return OodMethod::msp;
  if (s == "energy") return OodMethod::energy;
  throw ParameterError("unknown OOD method '" + s + "' (expected msp or energy)");
}

struct OodScorer {
  OodMethod method = OodMethod::msp;
  double temperature = 1.0;

  void validate() const {
    if (!(temperature > 0.0)) throw ParameterError("energy temperature must be > 0");
  }
};

// Raw score per row, shape [n]:
//   msp:    max_k softmax(f)_k, in [1/S, 1]
//   energy: E(f) = -T log sum_k exp(f_k / T)
inline Tensor ood_score(const OodScorer& scorer, const Tensor& teacher_logits) {
  scorer.validate();
  Tensor f = teacher_logits.detach();
  Tensor s;
  if (scorer.method == OodMethod::msp) s = max_rows(softmax_rows(f));
  else s = scale(logsumexp_rows(scale(f, 1.0 / scorer.temperature)), -scorer.temperature);
  return reshape(s, {f.rows()});
}

// Score oriented so that larger means more in-distribution: msp as is, and
// the negative energy T log sum exp(f / T) for the energy method.
inline Tensor id_score(const OodScorer& scorer, const Tensor& teacher_logits) {
  Tensor s = ood_score(scorer, teacher_logits);
  return scorer.method == OodMethod::energy ? scale(s, -1.0) : s;
}

// c = sigmoid(alpha * s + beta) with alpha = softplus(raw_alpha) > 0.
class LearnableSigmoid {
 public:
  explicit LearnableSigmoid(double alpha = 1.0, double beta = 0.0)
      : raw_alpha_(Tensor::scalar(std::log(std::expm1(alpha)))), beta_(Tensor::scalar(beta)) {
    if (!(alpha > 0.0)) throw ParameterError("sigmoid slope must be > 0");
    raw_alpha_.set_requires_grad(true);
    beta_.set_requires_grad(true);
  }

  Tensor alpha() const { return softplus(raw_alpha_); }
  double alpha_value() const { return detail::stable_softplus(raw_alpha_.item()); }
  double beta_value() const { return beta_.item(); }

  // scores [n] -> c [n, 1]
  Tensor operator()(const Tensor& scores) const {
    Tensor s = reshape(scores.detach(), {scores.numel(), 1});
    return sigmoid(add(mul(s, alpha()), beta_));
  }

  std::vector<Tensor> parameters() const { return {raw_alpha_, beta_}; }
  std::vector<NamedTensor> named_parameters() const { return {{"eps.raw_alpha", raw_alpha_}, {"eps.beta", beta_}}; }

 private:
  Tensor raw_alpha_;
  Tensor beta_;
};

// h~ rows (c, 1 - c), shape [n, 2].
inline Tensor confidence(const LearnableSigmoid& eps, const Tensor& scores) {
  Tensor c = eps(scores);
  return concat_cols({c, 1.0 - c});
}

// H: student softmax over S+U classes -> 2 logits -> 2-way softmax.
class OodProjector {
 public:
  OodProjector() = default;
  OodProjector(std::size_t num_classes, std::size_t hidden, Rng& rng)
      : net_("H", {num_classes, hidden, 2}, {Activation::leaky_relu, Activation::identity}, rng) {}

  Tensor operator()(const Tensor& student_logits) const {
    if (student_logits.rank() != 2 || student_logits.cols() != net_.in_dim())
      throw ShapeError("project_student: expected [n," + std::to_string(net_.in_dim()) + "], got " +
                       shape_str(student_logits.shape()));
    return softmax_rows(net_(softmax_rows(student_logits)));
  }

  // Sets the last layer to zero so every row maps to (0.5, 0.5).
  void zero_final_layer() {
    auto& last = net_.layers().back();
    for (auto& v : last.weight.mutable_data()) v = 0.0;
    for (auto& v : last.bias.mutable_data()) v = 0.0;
  }

  std::vector<Tensor> parameters() const { return net_.parameters(); }
  std::vector<NamedTensor> named_parameters() const { return net_.named_parameters(); }
  Mlp& net() { return net_; }

 private:
  Mlp net_;
};

inline Tensor project_student(const OodProjector& projector, const Tensor& student_logits) { return projector(student_logits); }

// Batch-wise OOD identity loss, b_ij = cos(h^_i, h~_j), labels over all rows.
inline Tensor loss_od(const Tensor& h_hat, const Tensor& h_tilde, const std::vector<ClassId>& labels) {
  if (h_hat.shape() != h_tilde.shape() || h_hat.rank() != 2 || h_hat.cols() != 2)
    throw ShapeError("loss_od: " + shape_str(h_hat.shape()) + " vs " + shape_str(h_tilde.shape()));
  if (h_hat.rows() == 0) throw ShapeError("loss_od: empty batch");
  Tensor b;
  try {
    b = cosine_similarity_matrix(h_hat, h_tilde);
  } catch (const DegenerateInputError& e) {
    throw Error(std::string("loss_od: internal error, OOD representation row vanished: ") + e.what());
  }
  return pairwise_identity_loss(b, labels, labels);
}

}  // namespace d3gzsl
