#ifndef MICVAE_DIAGNOSTICS_H
#define MICVAE_DIAGNOSTICS_H

#include <string>
#include <vector>

#include "micvae/corpus.h"
#include "micvae/model.h"

namespace micvae {

// The Table-1 style quadruple plus the aggregated KL.
struct CollapseMetrics {
  std::int64_t step = 0;
  double kl = 0.0;             // mean per-example KL(q || p(z|x))
  double mi_zx = 0.0;          // posteriors from x-only encodings
  double mi_zy = 0.0;          // posteriors from y-only encodings
  double kl_aggregated = 0.0;
  double nll_per_token = 0.0;
};

// Plug-in batch MI between the latent and the example index under the
// empirical 1/N distribution: sum_k [ H(mean_n q_k) - mean_n H(q_k) ].
// probs laid out (N, K, C) row-major.
double mi_estimate(const std::vector<double>& probs, std::int64_t n, int K,
                   int C);

// |mean-KL - MI - aggregated KL| for a shared per-latent prior
// (K x C row-major); exact identity, residual must be tiny.
double decomposition_check(const std::vector<double>& probs, std::int64_t n,
                           int K, int C, const std::vector<double>& shared_prior);

// mean entropy / aggregated pieces reused by the identity and metrics
double mean_per_example_kl(const std::vector<double>& probs, std::int64_t n,
                           int K, int C, const std::vector<double>& prior,
                           bool prior_per_example);
double aggregated_kl_value(const std::vector<double>& post, std::int64_t n,
                           int K, int C, const std::vector<double>& prior,
                           bool prior_per_example);

// Eval-mode held-out NLL per token under the mixture distribution with a
// noise-free posterior-mean latent.
double eval_nll(const Model& model, const std::vector<SentencePair>& pairs,
                const Vocab& vocab, int max_tokens, Rng& rng);

// Full metric row on a held-out set.
CollapseMetrics collapse_metrics(const Model& model,
                                 const std::vector<SentencePair>& pairs,
                                 const Vocab& vocab, int max_tokens,
                                 std::int64_t step, Rng& rng);

// Posterior probs per sentence for two labeled corpora; one CSV row per
// (sentence, latent): corpus_label, sentence_id, k, C probabilities.
void dump_latents(const Model& model, const std::vector<SentencePair>& corpus_a,
                  const std::vector<SentencePair>& corpus_b,
                  const std::string& label_a, const std::string& label_b,
                  const Vocab& vocab, const std::string& out_path, Rng& rng);

// Posterior probs (N, K, C) from the configured posterior side of a batch.
std::vector<double> posterior_probs_y(const Model& model, const SeqBatch& b,
                                      Rng& rng);
std::vector<double> posterior_probs_x(const Model& model, const SeqBatch& b,
                                      Rng& rng);

}  // namespace micvae

#endif  // MICVAE_DIAGNOSTICS_H
