#pragma once

// Conditional feature generators x'' = G(a, w), w ~ N(0, I), dim(w) = dim(a).
//
// wgan_gp: MLP generator trained against an MLP critic with the WGAN
// gradient penalty plus a classification term from a frozen seen-class
// classifier.
// gaussian_oracle: samples the true class-conditional Gaussian of a
// synthetic dataset; used to test everything downstream of a perfect FG.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "d3gzsl/data.hpp"
#include "d3gzsl/error.hpp"
#include "d3gzsl/nn.hpp"
#include "d3gzsl/rng.hpp"
#include "d3gzsl/tensor.hpp"

namespace d3gzsl {

enum class GeneratorVariant { wgan_gp, gaussian_oracle };

inline std::string to_string(GeneratorVariant v) { return v == GeneratorVariant::wgan_gp ? "wgan_gp" : "gaussian_oracle"; }

struct WganOptions {
  std::size_t generator_hidden = 128;
  std::size_t critic_hidden = 128;
  double gp_weight = 10.0;
  std::size_t n_critic = 5;
  double cls_weight = 0.01;
  AdamOptions generator_optim{1e-3, 0.5, 0.999, 1e-8};
  AdamOptions critic_optim{1e-3, 0.5, 0.999, 1e-8};
};

// Frozen classifier over seen classes used for the generator's
// classification term. `classes[k]` is the class id of logit column k.
struct SeenClassifier {
  std::function<Tensor(const Tensor&)> logits;
  std::vector<ClassId> classes;

  std::vector<std::size_t> columns_of(const std::vector<ClassId>& labels) const {
    std::vector<std::size_t> out;
    out.reserve(labels.size());
    for (ClassId y : labels) {
      auto it = std::find(classes.begin(), classes.end(), y);
      if (it == classes.end()) throw ValidationError("class " + std::to_string(y) + " is not a seen class");
      out.push_back(static_cast<std::size_t>(it - classes.begin()));
    }
    return out;
  }
};

struct CriticReport {
  double loss = 0.0;         // mean D(fake) - mean D(real) + gp_weight * gp
  double wasserstein = 0.0;  // mean D(real) - mean D(fake)
  double gradient_penalty = 0.0;
};

struct FgReport {
  CriticReport critic;  // last critic step
  double generator_loss = 0.0;
  double adversarial = 0.0;  // -mean D(fake)
  double classification = 0.0;
};

class CondGenerator {
 public:
  static CondGenerator wgan_gp(std::size_t attribute_dim, std::size_t feature_dim, const WganOptions& options, Rng& rng) {
    if (options.gp_weight < 0.0) throw ParameterError("gp_weight must be >= 0");
    if (options.n_critic < 1) throw ParameterError("n_critic must be >= 1");
    CondGenerator g;
    g.variant_ = GeneratorVariant::wgan_gp;
    g.attribute_dim_ = attribute_dim;
    g.feature_dim_ = feature_dim;
    g.options_ = options;
    g.generator_ = Mlp("G", {2 * attribute_dim, options.generator_hidden, feature_dim},
                       {Activation::leaky_relu, Activation::identity}, rng);
    g.critic_ = Mlp("D", {feature_dim + attribute_dim, options.critic_hidden, 1},
                    {Activation::leaky_relu, Activation::identity}, rng);
    g.generator_opt_ = Adam(g.generator_.parameters(), options.generator_optim);
    g.critic_opt_ = Adam(g.critic_.parameters(), options.critic_optim);
    return g;
  }

  static CondGenerator gaussian_oracle(GroundTruth truth) {
    CondGenerator g;
    g.variant_ = GeneratorVariant::gaussian_oracle;
    g.attribute_dim_ = truth.mean_map.cols();
    g.feature_dim_ = truth.mean_map.rows();
    g.truth_ = std::move(truth);
    return g;
  }

  GeneratorVariant variant() const { return variant_; }
  std::size_t attribute_dim() const { return attribute_dim_; }
  // Latent size of the wgan_gp generator; the oracle draws feature_dim noise.
  std::size_t noise_dim() const { return attribute_dim_; }
  std::size_t feature_dim() const { return feature_dim_; }
  const WganOptions& options() const { return options_; }

  // One feature row per attribute row. For wgan_gp the result is on the tape
  // when the generator parameters are trainable.
  Tensor generate(const Tensor& attrs, Rng& rng) const {
    if (attrs.rank() != 2 || attrs.cols() != attribute_dim_)
      throw ShapeError("generate: expected attributes [n," + std::to_string(attribute_dim_) + "], got " + shape_str(attrs.shape()));
    if (variant_ == GeneratorVariant::gaussian_oracle) {
      Tensor noise = Tensor::randn({attrs.rows(), feature_dim_}, rng);
      Tensor means = truth_->class_means(attrs.detach());
      return add(means, scale(noise, truth_->sigma)).detach();
    }
    Tensor noise = Tensor::randn({attrs.rows(), noise_dim()}, rng);
    return generator_(concat_cols({attrs, noise}));
  }
  Tensor operator()(const Tensor& attrs, Rng& rng) const { return generate(attrs, rng); }

  Tensor critic(const Tensor& features, const Tensor& attrs) const {
    require_wgan("critic");
    return critic_(concat_cols({features, attrs}));
  }

  // mean_i (|d D(x_i, a_i) / d x_i| - 1)^2, differentiable in the critic.
  Tensor gradient_penalty(const Tensor& features, const Tensor& attrs) const {
    require_wgan("gradient_penalty");
    Tensor g = slice_columns(input_gradient(critic_, concat_cols({features.detach(), attrs.detach()})), 0, feature_dim_);
    Tensor norm = sqrt(add_scalar(reduce_sum(square(g), 1), 1e-12));
    return reduce_mean(square(add_scalar(norm, -1.0)));
  }

  struct CriticLoss {
    Tensor loss, wasserstein, penalty;
  };

  // Critic objective on real rows vs. fresh fakes; interpolation weights are
  // drawn per row from U(0,1).
  CriticLoss critic_loss(const Tensor& real, const Tensor& attrs, Rng& rng) const {
    require_wgan("critic_loss");
    Tensor fake;
    {
      NoGradGuard no_grad;
      fake = generate(attrs, rng);
    }
    Tensor d_real = reduce_mean(critic(real, attrs));
    Tensor d_fake = reduce_mean(critic(fake, attrs));
    Tensor eps = Tensor::uniform({real.rows(), 1}, rng, 0.0, 1.0);
    Tensor interp = add(mul(eps, real.detach()), mul(1.0 - eps, fake)).detach();
    Tensor gp = gradient_penalty(interp, attrs);
    Tensor loss = add(sub(d_fake, d_real), scale(gp, options_.gp_weight));
    return {loss, sub(d_real, d_fake), gp};
  }

  struct GeneratorLoss {
    Tensor loss, adversarial, classification;
  };

  // -mean D(G(a,w), a) + cls_weight * CE(classifier(G(a,w)), labels).
  GeneratorLoss generator_loss(const Tensor& attrs, const std::vector<ClassId>& labels, const SeenClassifier* cls,
                               Rng& rng) const {
    require_wgan("generator_loss");
    Tensor fake = generate(attrs, rng);
    Tensor adv = scale(reduce_mean(critic(fake, attrs)), -1.0);
    Tensor ce = Tensor::scalar(0.0);
    if (cls != nullptr && cls->logits && options_.cls_weight > 0.0) {
      auto cols = cls->columns_of(labels);
      ce = scale(reduce_mean(pick(log_softmax_rows(cls->logits(fake)), cols)), -1.0);
    }
    return {add(adv, scale(ce, options_.cls_weight)), adv, ce};
  }

  // One critic update; leaves the generator untouched.
  CriticReport critic_step(const Tensor& real, const Tensor& attrs, Rng& rng) {
    require_wgan("critic_step");
    tape().reset();
    critic_.zero_grad();
    auto l = critic_loss(real, attrs, rng);
    backward(l.loss);
    critic_opt_.step();
    critic_.zero_grad();
    tape().reset();
    return {l.loss.item(), l.wasserstein.item(), l.penalty.item()};
  }

  Mlp& generator_net() { return generator_; }
  const Mlp& generator_net() const { return generator_; }
  Mlp& critic_net() { return critic_; }
  const Mlp& critic_net() const { return critic_; }
  Adam& generator_optimizer() { return generator_opt_; }
  Adam& critic_optimizer() { return critic_opt_; }

 private:
  void require_wgan(const char* op) const {
    if (variant_ != GeneratorVariant::wgan_gp)
      throw UnsupportedVariantError(std::string(op) + " is not supported by the " + to_string(variant_) + " generator");
  }

  GeneratorVariant variant_ = GeneratorVariant::gaussian_oracle;
  std::size_t attribute_dim_ = 0;
  std::size_t feature_dim_ = 0;
  WganOptions options_;
  Mlp generator_;
  Mlp critic_;
  Adam generator_opt_;
  Adam critic_opt_;
  std::optional<GroundTruth> truth_;
};

// n_critic critic updates followed by one generator update on a batch of
// real seen rows. Only the network being updated is stepped.
inline FgReport fg_train_step(CondGenerator& g, const Tensor& real, const std::vector<ClassId>& labels,
                              const Tensor& all_attributes, const SeenClassifier* cls, Rng& rng) {
  if (g.variant() != GeneratorVariant::wgan_gp)
    throw UnsupportedVariantError("fg_train_step requires the wgan_gp generator, got " + to_string(g.variant()));
  std::vector<std::size_t> rows(labels.begin(), labels.end());
  Tensor attrs = select_rows(all_attributes, rows);
  FgReport report;
  for (std::size_t k = 0; k < g.options().n_critic; ++k) report.critic = g.critic_step(real, attrs, rng);

  tape().reset();
  g.generator_net().zero_grad();
  auto gl = g.generator_loss(attrs, labels, cls, rng);
  backward(gl.loss);
  g.generator_optimizer().step();
  g.generator_net().zero_grad();
  g.critic_net().zero_grad();
  tape().reset();
  report.generator_loss = gl.loss.item();
  report.adversarial = gl.adversarial.item();
  report.classification = gl.classification.item();
  return report;
}

}  // namespace d3gzsl
