#include "micvae/diagnostics.h"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "micvae/objectives.h"

namespace micvae {

namespace {

double entropy(const double* p, int C) {
  double h = 0.0;
  for (int c = 0; c < C; ++c)
    if (p[c] > 0.0) h -= p[c] * std::log(p[c]);
  return h;
}

}  // namespace

double mi_estimate(const std::vector<double>& probs, std::int64_t n, int K,
                   int C) {
  if (n < 1) throw std::invalid_argument("mi_estimate: empty batch");
  if (static_cast<std::int64_t>(probs.size()) != n * K * C)
    throw std::invalid_argument("mi_estimate: bad layout");
  double mi = 0.0;
  std::vector<double> mean(C);
  for (int k = 0; k < K; ++k) {
    std::fill(mean.begin(), mean.end(), 0.0);
    double mean_h = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const double* row = probs.data() + (i * K + k) * C;
      for (int c = 0; c < C; ++c) mean[c] += row[c];
      mean_h += entropy(row, C);
    }
    for (int c = 0; c < C; ++c) mean[c] /= n;
    mi += entropy(mean.data(), C) - mean_h / n;
  }
  return std::max(0.0, mi);
}

double mean_per_example_kl(const std::vector<double>& probs, std::int64_t n,
                           int K, int C, const std::vector<double>& prior,
                           bool prior_per_example) {
  double kl = 0.0;
  for (std::int64_t i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) {
      const double* q = probs.data() + (i * K + k) * C;
      const double* p = prior_per_example ? prior.data() + (i * K + k) * C
                                          : prior.data() + k * C;
      kl += categorical_kl(std::span(q, C), std::span(p, C));
    }
  return kl / n;
}

double aggregated_kl_value(const std::vector<double>& post, std::int64_t n,
                           int K, int C, const std::vector<double>& prior,
                           bool prior_per_example) {
  double kl = 0.0;
  std::vector<double> qbar(C), pbar(C);
  for (int k = 0; k < K; ++k) {
    std::fill(qbar.begin(), qbar.end(), 0.0);
    std::fill(pbar.begin(), pbar.end(), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
      const double* q = post.data() + (i * K + k) * C;
      const double* p = prior_per_example ? prior.data() + (i * K + k) * C
                                          : prior.data() + k * C;
      for (int c = 0; c < C; ++c) {
        qbar[c] += q[c];
        pbar[c] += p[c];
      }
    }
    for (int c = 0; c < C; ++c) {
      qbar[c] /= n;
      pbar[c] /= n;
    }
    kl += categorical_kl(qbar, pbar);
  }
  return kl;
}

double decomposition_check(const std::vector<double>& probs, std::int64_t n,
                           int K, int C,
                           const std::vector<double>& shared_prior) {
  if (static_cast<std::int64_t>(shared_prior.size()) != K * C)
    throw std::invalid_argument("decomposition_check: prior must be K x C");
  double mean_kl = mean_per_example_kl(probs, n, K, C, shared_prior, false);
  double mi = mi_estimate(probs, n, K, C);
  double agg = aggregated_kl_value(probs, n, K, C, shared_prior, false);
  return std::abs(mean_kl - mi - agg);
}

namespace {

std::vector<SeqBatch> batched(const std::vector<SentencePair>& pairs,
                              int max_tokens, const Vocab& vocab,
                              int batch_sents = 64) {
  std::vector<SeqBatch> out;
  for (size_t i = 0; i < pairs.size(); i += batch_sents) {
    std::vector<SentencePair> chunk(
        pairs.begin() + i,
        pairs.begin() + std::min(pairs.size(), i + batch_sents));
    out.push_back(make_batch(chunk, max_tokens, vocab));
  }
  return out;
}

std::vector<double> probs_from(const Model& model, const Tensor& states,
                               const std::vector<bool>& mask, std::int64_t n,
                               std::int64_t len) {
  LatentPosterior post =
      model.infer_latent_logits(states, mask, n, len, "post");
  return std::vector<double>(post.probs.data().begin(),
                             post.probs.data().end());
}

}  // namespace

std::vector<double> posterior_probs_y(const Model& model, const SeqBatch& b,
                                      Rng& rng) {
  NoGradGuard ng;
  Tensor enc = model.encode(b.tgt_ids, b.tgt_mask, b.n, b.tgt_len, false, rng);
  return probs_from(model, enc, b.tgt_mask, b.n, b.tgt_len);
}

std::vector<double> posterior_probs_x(const Model& model, const SeqBatch& b,
                                      Rng& rng) {
  NoGradGuard ng;
  Tensor enc = model.encode(b.src_ids, b.src_mask, b.n, b.src_len, false, rng);
  return probs_from(model, enc, b.src_mask, b.n, b.src_len);
}

double eval_nll(const Model& model, const std::vector<SentencePair>& pairs,
                const Vocab& vocab, int max_tokens, Rng& rng) {
  NoGradGuard ng;
  const ModelConfig& cfg = model.cfg();
  double nll_sum = 0.0;
  double tok_sum = 0.0;
  for (const SeqBatch& b : batched(pairs, max_tokens, vocab)) {
    Tensor enc = model.encode(b.src_ids, b.src_mask, b.n, b.src_len, false,
                              rng);
    Tensor latent_emb, bow_p;
    double lambda = 0.0;
    if (cfg.latent == "categorical") {
      std::vector<bool> pmask;
      std::int64_t plen = 0;
      Tensor penc = model.encode_posterior_side(b, false, rng, &pmask, &plen);
      LatentPosterior post =
          model.infer_latent_logits(penc, pmask, b.n, plen, "post");
      LatentSample z = model.posterior_mean_latent(post);
      latent_emb = z.embedding;
      lambda = cfg.lambda_mix;
      if (lambda > 0.0) bow_p = model.bow_probs(z);
    } else if (cfg.latent == "gaussian") {
      std::vector<bool> pmask;
      std::int64_t plen = 0;
      Tensor penc = model.encode_posterior_side(b, false, rng, &pmask, &plen);
      GaussianLatent g =
          model.gaussian_latent(penc, pmask, b.n, plen, "post");
      latent_emb = model.gaussian_sample(g, rng, /*zero_noise=*/true);
    }
    // teacher-forced labels: input drops the last position, labels the first
    std::int64_t t = b.tgt_len - 1;
    std::vector<TokenId> in(b.n * t), labels(b.n * t);
    std::vector<bool> lmask(b.n * t);
    for (std::int64_t r = 0; r < b.n; ++r)
      for (std::int64_t j = 0; j < t; ++j) {
        in[r * t + j] = b.tgt_ids[r * b.tgt_len + j];
        labels[r * t + j] = b.tgt_ids[r * b.tgt_len + j + 1];
        lmask[r * t + j] = b.tgt_mask[r * b.tgt_len + j + 1];
      }
    Tensor probs = model.decode_mixture_probs(in, b.n, t, enc, b.src_mask,
                                              b.src_len, latent_emb, bow_p,
                                              lambda, false, rng);
    double count = 0.0;
    for (bool m : lmask)
      if (m) count += 1.0;
    Tensor nll = recon_nll(probs, labels, lmask);
    nll_sum += nll.item() * count;
    tok_sum += count;
  }
  return nll_sum / tok_sum;
}

CollapseMetrics collapse_metrics(const Model& model,
                                 const std::vector<SentencePair>& pairs,
                                 const Vocab& vocab, int max_tokens,
                                 std::int64_t step, Rng& rng) {
  NoGradGuard ng;
  const ModelConfig& cfg = model.cfg();
  CollapseMetrics m;
  m.step = step;
  m.nll_per_token = eval_nll(model, pairs, vocab, max_tokens, rng);
  if (cfg.latent == "none") return m;
  double n_batches = 0.0;
  for (const SeqBatch& b : batched(pairs, max_tokens, vocab)) {
    if (cfg.latent == "gaussian") {
      std::vector<bool> pmask;
      std::int64_t plen = 0;
      Tensor penc = model.encode_posterior_side(b, false, rng, &pmask, &plen);
      GaussianLatent gp = model.gaussian_latent(penc, pmask, b.n, plen, "post");
      Tensor xenc =
          model.encode(b.src_ids, b.src_mask, b.n, b.src_len, false, rng);
      GaussianLatent gpri =
          model.gaussian_latent(xenc, b.src_mask, b.n, b.src_len, "prior");
      m.kl += gaussian_kl(gp, gpri).item();
      n_batches += 1.0;
      continue;
    }
    int K = cfg.n_latents, C = cfg.n_categories;
    // training posterior vs prior(x) for the KL column
    std::vector<bool> pmask;
    std::int64_t plen = 0;
    Tensor penc = model.encode_posterior_side(b, false, rng, &pmask, &plen);
    LatentPosterior post =
        model.infer_latent_logits(penc, pmask, b.n, plen, "post");
    Tensor xenc =
        model.encode(b.src_ids, b.src_mask, b.n, b.src_len, false, rng);
    LatentPosterior prior =
        model.infer_latent_logits(xenc, b.src_mask, b.n, b.src_len, "prior");
    std::vector<double> qp(post.probs.data().begin(), post.probs.data().end());
    std::vector<double> pp(prior.probs.data().begin(),
                           prior.probs.data().end());
    m.kl += mean_per_example_kl(qp, b.n, K, C, pp, true);
    m.kl_aggregated += aggregated_kl_value(qp, b.n, K, C, pp, true);
    m.mi_zx += mi_estimate(posterior_probs_x(model, b, rng), b.n, K, C);
    m.mi_zy += mi_estimate(posterior_probs_y(model, b, rng), b.n, K, C);
    n_batches += 1.0;
  }
  if (n_batches > 0) {
    m.kl /= n_batches;
    m.kl_aggregated /= n_batches;
    m.mi_zx /= n_batches;
    m.mi_zy /= n_batches;
  }
  return m;
}

void dump_latents(const Model& model, const std::vector<SentencePair>& corpus_a,
                  const std::vector<SentencePair>& corpus_b,
                  const std::string& label_a, const std::string& label_b,
                  const Vocab& vocab, const std::string& out_path, Rng& rng) {
  std::ofstream os(out_path);
  if (!os) throw std::runtime_error("cannot write " + out_path);
  os.precision(17);
  int K = model.cfg().n_latents, C = model.cfg().n_categories;
  os << "# corpora: " << label_a << ", " << label_b << "\n";
  os << "corpus_label,sentence_id,k";
  for (int c = 0; c < C; ++c) os << ",p" << c;
  os << "\n";
  auto dump_one = [&](const std::vector<SentencePair>& corpus,
                      const std::string& label) {
    std::int64_t sid = 0;
    for (size_t i = 0; i < corpus.size(); i += 64) {
      std::vector<SentencePair> chunk(
          corpus.begin() + i,
          corpus.begin() + std::min(corpus.size(), i + 64));
      SeqBatch b = make_batch(chunk, 1 << 20, vocab);
      auto probs = posterior_probs_y(model, b, rng);
      for (std::int64_t r = 0; r < b.n; ++r, ++sid)
        for (int k = 0; k < K; ++k) {
          os << label << "," << sid << "," << k;
          for (int c = 0; c < C; ++c)
            os << "," << probs[(r * K + k) * C + c];
          os << "\n";
        }
    }
  };
  dump_one(corpus_a, label_a);
  dump_one(corpus_b, label_b);
}

}  // namespace micvae
