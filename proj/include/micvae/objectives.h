#ifndef MICVAE_OBJECTIVES_H
#define MICVAE_OBJECTIVES_H

#include <span>
#include <string>

#include "micvae/corpus.h"
#include "micvae/model.h"
#include "micvae/tensor.h"

namespace micvae {

struct LossReport {
  double recon_nll = 0.0;      // nats per target token
  double kl_per_example = 0.0; // nats, mean over the batch
  double kl_aggregated = 0.0;  // nats
  double bow_loss = 0.0;       // nats
  double mono_loss = 0.0;      // nats
  double total = 0.0;
  double anneal_weight = 1.0;
};

struct LossResult {
  Tensor total;  // scalar, differentiable
  LossReport report;
};

// KL(q || p) in nats over plain simplex vectors; p floored at 1e-12.
// Throws if either argument is off the simplex by more than 1e-6.
double categorical_kl(std::span<const double> q, std::span<const double> p);

// --- differentiable pieces over (N, K, C) posterior/prior probs ---

// mean_n sum_k KL(q_k | p_k), from logits for stability
Tensor per_example_kl(const LatentPosterior& post, const LatentPosterior& prior);

// sum_k KL(mean_n q_k || mean_n p_k): the minibatch estimator of
// KL(q(z) || p(z)), per latent, summed over latents
Tensor aggregated_kl(const Tensor& post_probs, const Tensor& prior_probs);

// masked mean negative log mixture probability of the gold tokens
Tensor recon_nll(const Tensor& mixture_probs,
                 const std::vector<TokenId>& labels,
                 const std::vector<bool>& label_mask);

// loss = recon + anneal_weight * mean per-example KL
LossResult cvae_elbo_loss(const Tensor& mixture_probs,
                          const std::vector<TokenId>& labels,
                          const std::vector<bool>& label_mask,
                          const LatentPosterior& post,
                          const LatentPosterior& prior, double anneal_weight);

// loss = recon + aggregated KL; no annealing
LossResult micvae_loss(const Tensor& mixture_probs,
                       const std::vector<TokenId>& labels,
                       const std::vector<bool>& label_mask,
                       const LatentPosterior& post,
                       const LatentPosterior& prior);

// -mean_n sum_i p_i log p_hat(y_i | z); degenerate target rows skipped
LossResult bow_loss(const Tensor& bow_logits_t,
                    const std::vector<double>& bow_targets,
                    const std::vector<bool>& degenerate);

// per-token BoW reconstruction of x plus aggregated KL (Eq-12 style)
LossResult mono_loss(const MonoBatch& batch, const Tensor& bow_logits_t,
                     const LatentPosterior& post, const LatentPosterior& prior);

// Gaussian CVAE baseline: recon + anneal_weight * closed-form KL
LossResult vnmt_loss(const Tensor& mixture_probs,
                     const std::vector<TokenId>& labels,
                     const std::vector<bool>& label_mask,
                     const GaussianLatent& post, const GaussianLatent& prior,
                     double anneal_weight);

Tensor gaussian_kl(const GaussianLatent& q, const GaussianLatent& p);

enum class AnnealSchedule { linear, none };
AnnealSchedule anneal_schedule_from_string(const std::string& s);
double kl_anneal(std::int64_t step, AnnealSchedule schedule,
                 std::int64_t ramp_steps);

}  // namespace micvae

#endif  // MICVAE_OBJECTIVES_H
