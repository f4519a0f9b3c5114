#ifndef MICVAE_MODEL_H
#define MICVAE_MODEL_H

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "micvae/corpus.h"
#include "micvae/tensor.h"

namespace micvae {

enum class ParamGroup { encoder, inference, decoder, bow };

struct ModelConfig {
  int d_model = 32;
  int n_heads = 2;
  int n_layers = 2;
  int ffn_dim = 64;
  int n_latents = 4;      // K
  int n_categories = 16;  // C
  double tau = 1.0;
  double lambda_mix = 0.1;
  double dropout = 0.1;
  double word_dropout_rate = 0.4;
  std::int64_t vocab_size = 0;
  // none | gaussian | categorical
  std::string latent = "categorical";
  // y | xy-concat
  std::string posterior_inputs = "y";

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& s);
};

// Named parameter tensors with a fixed insertion order and a group tag
// per tensor (Alg-style parameter sets: encoder, inference nets,
// autoregressive decoder, BoW head).
struct Params {
  std::vector<std::string> order;
  std::map<std::string, Tensor> by_name;
  std::map<std::string, ParamGroup> groups;

  Tensor& add(const std::string& name, ParamGroup g, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  void zero_grads();
};

struct LatentPosterior {
  Tensor logits;  // (N, K, C)
  Tensor probs;   // softmax over C
  std::string source;  // "posterior" or "prior"
};

struct LatentSample {
  Tensor values;     // (N, K, C) simplex rows; one-hot when hard
  Tensor embedding;  // (N, 1, d) summary, summed per-latent embeddings
};

struct GaussianLatent {
  Tensor mu;      // (N, d)
  Tensor logvar;  // (N, d)
};

struct DecodeResult {
  std::vector<TokenId> ids;  // without bos/eos
  bool truncated = false;
  double score = 0.0;  // length-normalized log prob
};

class Model {
 public:
  Model(ModelConfig cfg, Rng& rng);

  const ModelConfig& cfg() const { return cfg_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }

  // Shared Transformer encoder over any token matrix (n x len).
  Tensor encode(const std::vector<TokenId>& ids, const std::vector<bool>& mask,
                std::int64_t n, std::int64_t len, bool train, Rng& rng) const;

  // which: "post" or "prior". Per-latent attention over the encoded
  // states followed by a d -> C projection.
  LatentPosterior infer_latent_logits(const Tensor& states,
                                      const std::vector<bool>& mask,
                                      std::int64_t n, std::int64_t len,
                                      const std::string& which) const;

  // Soft Gumbel-Softmax sample; hard = exact Gumbel-max one-hot draw.
  // zero_noise is a test hook fixing g = 0.
  LatentSample sample_gumbel_softmax(const LatentPosterior& post, double tau,
                                     Rng& rng, bool hard,
                                     bool zero_noise = false) const;
  // Noise-free "mean" latent: values = posterior probs.
  LatentSample posterior_mean_latent(const LatentPosterior& post) const;
  LatentSample latent_from_values(const Tensor& values) const;

  Tensor bow_logits(const LatentSample& z) const;  // (N, |V|)
  Tensor bow_probs(const LatentSample& z) const;   // softmax over V

  // Mixture distribution over the vocabulary at every decoder position:
  // (1 - lambda) * softmax(decoder logits) + lambda * bow_p.
  // latent_emb and bow_p may be undefined (non-latent / lambda = 0).
  Tensor decode_mixture_probs(const std::vector<TokenId>& tgt_in_ids,
                              std::int64_t n, std::int64_t t,
                              const Tensor& enc_states,
                              const std::vector<bool>& src_mask,
                              std::int64_t src_len, const Tensor& latent_emb,
                              const Tensor& bow_p, double lambda, bool train,
                              Rng& rng) const;

  // Gaussian heads for the VNMT baseline (masked mean pooling + linear).
  GaussianLatent gaussian_latent(const Tensor& states,
                                 const std::vector<bool>& mask, std::int64_t n,
                                 std::int64_t len,
                                 const std::string& which) const;
  // z = mu + sigma * eps; returned as (N, 1, d) decoder conditioning.
  Tensor gaussian_sample(const GaussianLatent& g, Rng& rng,
                         bool zero_noise = false) const;

  // Encode the posterior-side view of a batch per cfg.posterior_inputs.
  Tensor encode_posterior_side(const SeqBatch& b, bool train, Rng& rng,
                               std::vector<bool>* mask_out,
                               std::int64_t* len_out) const;

  DecodeResult greedy_decode(const std::vector<TokenId>& src, Rng& rng,
                             int max_len) const;
  DecodeResult beam_decode(const std::vector<TokenId>& src, Rng& rng, int beam,
                           int max_len) const;

 private:
  Tensor transformer_block(const Tensor& x, const std::string& prefix,
                           const Tensor& self_mask, const Tensor& cross_states,
                           const Tensor& cross_mask, bool train,
                           Rng& rng) const;
  Tensor mha(const Tensor& q_in, const Tensor& kv_in, const Tensor& mask,
             const std::string& prefix) const;
  // Sample or mean-condition a latent for decoding one source.
  struct InferenceLatent {
    Tensor latent_emb;
    Tensor bow_p;
  };
  InferenceLatent prior_latent_for_decoding(const Tensor& enc,
                                            const std::vector<bool>& mask,
                                            std::int64_t len, Rng& rng) const;
  double prefix_log_prob(const std::vector<TokenId>& prefix_in, TokenId next,
                         const Tensor& enc, const std::vector<bool>& src_mask,
                         std::int64_t src_len,
                         const InferenceLatent& lat) const;

  ModelConfig cfg_;
  Params params_;
};

// 0 / -1e9 additive masks
Tensor causal_mask(std::int64_t t);
Tensor key_padding_mask(const std::vector<bool>& mask, std::int64_t n,
                        std::int64_t len);
Tensor sinusoidal_positions(std::int64_t len, std::int64_t d);

}  // namespace micvae

#endif  // MICVAE_MODEL_H
