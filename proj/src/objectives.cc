#include "micvae/objectives.h"

#include <cmath>
#include <stdexcept>

namespace micvae {

double categorical_kl(std::span<const double> q, std::span<const double> p) {
  if (q.size() != p.size())
    throw std::invalid_argument("categorical_kl: size mismatch");
  double sq = 0.0, sp = 0.0;
  for (size_t i = 0; i < q.size(); ++i) {
    sq += q[i];
    sp += p[i];
  }
  if (std::abs(sq - 1.0) > 1e-6 || std::abs(sp - 1.0) > 1e-6)
    throw std::invalid_argument("categorical_kl: inputs off the simplex");
  double kl = 0.0;
  for (size_t i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;  // 0 log(0/.) = 0
    kl += q[i] * std::log(q[i] / std::max(p[i], 1e-12));
  }
  return kl;
}

Tensor per_example_kl(const LatentPosterior& post,
                      const LatentPosterior& prior) {
  Tensor lq = log_softmax(post.logits, -1);
  Tensor lp = log_softmax(prior.logits, -1);
  Tensor kl = sum(mul(post.probs, sub(lq, lp)));  // summed over N, K, C
  std::int64_t n = post.logits.dim(0);
  return scale(kl, 1.0 / static_cast<double>(n));
}

Tensor aggregated_kl(const Tensor& post_probs, const Tensor& prior_probs) {
  Tensor qbar = mean_axis(post_probs, 0);   // (K, C)
  Tensor pbar = mean_axis(prior_probs, 0);  // (K, C)
  return sum(mul(qbar, sub(log_eps(qbar), log_eps(pbar))));
}

Tensor recon_nll(const Tensor& mixture_probs,
                 const std::vector<TokenId>& labels,
                 const std::vector<bool>& label_mask) {
  std::int64_t v = mixture_probs.dim(-1);
  std::int64_t rows = mixture_probs.size() / v;
  if (static_cast<std::int64_t>(labels.size()) != rows ||
      labels.size() != label_mask.size())
    throw std::invalid_argument("recon_nll: label/mask size mismatch");
  // zero out padded positions via gather on pad-safe ids
  std::vector<TokenId> safe = labels;
  std::vector<double> m(rows, 0.0);
  double count = 0.0;
  for (std::int64_t i = 0; i < rows; ++i) {
    if (label_mask[i]) {
      m[i] = 1.0;
      count += 1.0;
    } else {
      safe[i] = 0;
    }
  }
  if (count <= 0.0) throw std::invalid_argument("recon_nll: empty mask");
  Tensor gold = gather_last(reshape(mixture_probs, {rows, v}), safe);
  Tensor masked = mul(log_eps(gold), Tensor::from_data({rows}, std::move(m)));
  return scale(sum(masked), -1.0 / count);
}

LossResult cvae_elbo_loss(const Tensor& mixture_probs,
                          const std::vector<TokenId>& labels,
                          const std::vector<bool>& label_mask,
                          const LatentPosterior& post,
                          const LatentPosterior& prior, double anneal_weight) {
  LossResult r;
  Tensor recon = recon_nll(mixture_probs, labels, label_mask);
  Tensor kl = per_example_kl(post, prior);
  r.total = add(recon, scale(kl, anneal_weight));
  r.report.recon_nll = recon.item();
  r.report.kl_per_example = kl.item();
  {
    NoGradGuard ng;
    r.report.kl_aggregated = aggregated_kl(post.probs, prior.probs).item();
  }
  r.report.anneal_weight = anneal_weight;
  r.report.total = r.total.item();
  return r;
}

LossResult micvae_loss(const Tensor& mixture_probs,
                       const std::vector<TokenId>& labels,
                       const std::vector<bool>& label_mask,
                       const LatentPosterior& post,
                       const LatentPosterior& prior) {
  LossResult r;
  Tensor recon = recon_nll(mixture_probs, labels, label_mask);
  Tensor agg = aggregated_kl(post.probs, prior.probs);
  r.total = add(recon, agg);
  r.report.recon_nll = recon.item();
  r.report.kl_aggregated = agg.item();
  {
    NoGradGuard ng;
    r.report.kl_per_example = per_example_kl(post, prior).item();
  }
  r.report.anneal_weight = 1.0;
  r.report.total = r.total.item();
  return r;
}

LossResult bow_loss(const Tensor& bow_logits_t,
                    const std::vector<double>& bow_targets,
                    const std::vector<bool>& degenerate) {
  std::int64_t v = bow_logits_t.dim(-1);
  std::int64_t n = bow_logits_t.dim(0);
  if (static_cast<std::int64_t>(bow_targets.size()) != n * v)
    throw std::invalid_argument("bow_loss: target size mismatch");
  std::vector<double> t = bow_targets;
  double rows = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    if (r < static_cast<std::int64_t>(degenerate.size()) && degenerate[r]) {
      for (std::int64_t i = 0; i < v; ++i) t[r * v + i] = 0.0;
    } else {
      rows += 1.0;
    }
  }
  if (rows <= 0.0)
    throw std::invalid_argument("bow_loss: all target rows degenerate");
  Tensor lp = log_softmax(bow_logits_t, -1);
  Tensor ce = scale(sum(mul(Tensor::from_data({n, v}, std::move(t)), lp)),
                    -1.0 / rows);
  LossResult r;
  r.total = ce;
  r.report.bow_loss = ce.item();
  r.report.total = r.report.bow_loss;
  return r;
}

LossResult mono_loss(const MonoBatch& batch, const Tensor& bow_logits_t,
                     const LatentPosterior& post,
                     const LatentPosterior& prior) {
  std::int64_t v = bow_logits_t.dim(-1);
  std::int64_t n = batch.n, len = batch.src_len;
  // -(1/|x|) sum_i log p(x_i | z), per sentence, averaged over the batch;
  // specials excluded like the BoW targets
  Tensor lp = log_softmax(bow_logits_t, -1);
  std::vector<double> w(n * v, 0.0);
  double rows = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    double cnt = 0.0;
    for (std::int64_t j = 0; j < len; ++j) {
      TokenId id = batch.src_ids[r * len + j];
      if (batch.src_mask[r * len + j] && !Vocab::is_special(id)) {
        w[r * v + id] += 1.0;
        cnt += 1.0;
      }
    }
    if (cnt > 0.0) {
      for (std::int64_t i = 0; i < v; ++i) w[r * v + i] /= cnt;
      rows += 1.0;
    }
  }
  if (rows <= 0.0)
    throw std::invalid_argument("mono_loss: no countable tokens");
  Tensor recon = scale(sum(mul(Tensor::from_data({n, v}, std::move(w)), lp)),
                       -1.0 / rows);
  Tensor agg = aggregated_kl(post.probs, prior.probs);
  LossResult r;
  r.total = add(recon, agg);
  r.report.mono_loss = r.total.item();
  r.report.kl_aggregated = agg.item();
  r.report.total = r.report.mono_loss;
  return r;
}

Tensor gaussian_kl(const GaussianLatent& q, const GaussianLatent& p) {
  // 0.5 sum( exp(lq - lp) + (mu_q - mu_p)^2 exp(-lp) - 1 + lp - lq )
  Tensor dl = sub(q.logvar, p.logvar);
  Tensor dm = sub(q.mu, p.mu);
  Tensor term = add(exp_t(dl), mul(mul(dm, dm), exp_t(scale(p.logvar, -1.0))));
  term = sub(add_scalar(term, -1.0), dl);
  std::int64_t n = q.mu.dim(0);
  return scale(sum(term), 0.5 / static_cast<double>(n));
}

LossResult vnmt_loss(const Tensor& mixture_probs,
                     const std::vector<TokenId>& labels,
                     const std::vector<bool>& label_mask,
                     const GaussianLatent& post, const GaussianLatent& prior,
                     double anneal_weight) {
  LossResult r;
  Tensor recon = recon_nll(mixture_probs, labels, label_mask);
  Tensor kl = gaussian_kl(post, prior);
  r.total = add(recon, scale(kl, anneal_weight));
  r.report.recon_nll = recon.item();
  r.report.kl_per_example = kl.item();
  r.report.anneal_weight = anneal_weight;
  r.report.total = r.total.item();
  return r;
}

AnnealSchedule anneal_schedule_from_string(const std::string& s) {
  if (s == "linear") return AnnealSchedule::linear;
  if (s == "none") return AnnealSchedule::none;
  throw std::invalid_argument("unknown anneal schedule: " + s);
}

double kl_anneal(std::int64_t step, AnnealSchedule schedule,
                 std::int64_t ramp_steps) {
  if (step < 0) throw std::invalid_argument("kl_anneal: negative step");
  if (schedule == AnnealSchedule::none) return 1.0;
  if (ramp_steps <= 0)
    throw std::invalid_argument("kl_anneal: linear needs ramp_steps > 0");
  return std::min(1.0, static_cast<double>(step) /
                           static_cast<double>(ramp_steps));
}

}  // namespace micvae
