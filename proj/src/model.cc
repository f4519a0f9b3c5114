#include "micvae/model.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace micvae {

void ModelConfig::validate() const {
  if (d_model <= 0 || d_model % n_heads != 0)
    throw std::invalid_argument("d_model must be a positive multiple of "
                                "n_heads");
  if (n_latents < 1) throw std::invalid_argument("n_latents must be >= 1");
  if (n_categories < 2)
    throw std::invalid_argument("n_categories must be >= 2");
  if (lambda_mix < 0.0 || lambda_mix >= 1.0)
    throw std::invalid_argument("lambda_mix must be in [0,1)");
  if (tau <= 0.0) throw std::invalid_argument("tau must be > 0");
  if (vocab_size <= 0) throw std::invalid_argument("vocab_size must be set");
  if (latent != "none" && latent != "gaussian" && latent != "categorical")
    throw std::invalid_argument("unknown latent kind: " + latent);
  if (posterior_inputs != "y" && posterior_inputs != "xy-concat")
    throw std::invalid_argument("posterior_inputs must be y or xy-concat");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j;
  j["d_model"] = d_model;
  j["n_heads"] = n_heads;
  j["n_layers"] = n_layers;
  j["ffn_dim"] = ffn_dim;
  j["n_latents"] = n_latents;
  j["n_categories"] = n_categories;
  j["tau"] = tau;
  j["lambda_mix"] = lambda_mix;
  j["dropout"] = dropout;
  j["word_dropout_rate"] = word_dropout_rate;
  j["vocab_size"] = vocab_size;
  j["latent"] = latent;
  j["posterior_inputs"] = posterior_inputs;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
  auto j = nlohmann::json::parse(s);
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.n_layers = j.at("n_layers");
  c.ffn_dim = j.at("ffn_dim");
  c.n_latents = j.at("n_latents");
  c.n_categories = j.at("n_categories");
  c.tau = j.at("tau");
  c.lambda_mix = j.at("lambda_mix");
  c.dropout = j.at("dropout");
  c.word_dropout_rate = j.at("word_dropout_rate");
  c.vocab_size = j.at("vocab_size");
  c.latent = j.at("latent");
  c.posterior_inputs = j.at("posterior_inputs");
  return c;
}

Tensor& Params::add(const std::string& name, ParamGroup g, Tensor t) {
  if (by_name.count(name))
    throw std::invalid_argument("duplicate param " + name);
  order.push_back(name);
  groups[name] = g;
  return by_name.emplace(name, std::move(t)).first->second;
}

Tensor& Params::at(const std::string& name) {
  auto it = by_name.find(name);
  if (it == by_name.end())
    throw std::out_of_range("unknown param " + name);
  return it->second;
}

const Tensor& Params::at(const std::string& name) const {
  auto it = by_name.find(name);
  if (it == by_name.end())
    throw std::out_of_range("unknown param " + name);
  return it->second;
}

void Params::zero_grads() {
  for (auto& [_, t] : by_name) t.zero_grad();
}

Tensor causal_mask(std::int64_t t) {
  std::vector<double> m(t * t, 0.0);
  for (std::int64_t i = 0; i < t; ++i)
    for (std::int64_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9;
  return Tensor::from_data({t, t}, std::move(m));
}

Tensor key_padding_mask(const std::vector<bool>& mask, std::int64_t n,
                        std::int64_t len) {
  std::vector<double> m(n * len, 0.0);
  for (std::int64_t i = 0; i < n * len; ++i)
    if (!mask[i]) m[i] = -1e9;
  return Tensor::from_data({n, 1, len}, std::move(m));
}

Tensor sinusoidal_positions(std::int64_t len, std::int64_t d) {
  std::vector<double> p(len * d);
  for (std::int64_t t = 0; t < len; ++t)
    for (std::int64_t i = 0; i < d; ++i) {
      double angle = t / std::pow(10000.0, 2.0 * (i / 2) / d);
      p[t * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return Tensor::from_data({len, d}, std::move(p));
}

namespace {

void init_linear(Params& p, const std::string& name, ParamGroup g,
                 std::int64_t in, std::int64_t out, Rng& rng) {
  p.add(name, g, Tensor::randn({in, out}, rng, 1.0 / std::sqrt(double(in)),
                               true));
}

void init_ln(Params& p, const std::string& prefix, ParamGroup g,
             std::int64_t d) {
  p.add(prefix + ".g", g, Tensor::full({d}, 1.0, true));
  p.add(prefix + ".b", g, Tensor::zeros({d}, true));
}

void init_attn(Params& p, const std::string& prefix, ParamGroup g,
               std::int64_t d, Rng& rng) {
  init_linear(p, prefix + ".wq", g, d, d, rng);
  init_linear(p, prefix + ".wk", g, d, d, rng);
  init_linear(p, prefix + ".wv", g, d, d, rng);
  init_linear(p, prefix + ".wo", g, d, d, rng);
}

}  // namespace

Model::Model(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::int64_t d = cfg_.d_model, f = cfg_.ffn_dim, v = cfg_.vocab_size;
  int K = cfg_.n_latents, C = cfg_.n_categories;

  // small init keeps the shared output projection near-uniform at step 0
  params_.add("emb.token", ParamGroup::encoder,
              Tensor::randn({v, d}, rng, 0.05, true));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string p = "enc.l" + std::to_string(l);
    init_attn(params_, p + ".attn", ParamGroup::encoder, d, rng);
    init_ln(params_, p + ".ln1", ParamGroup::encoder, d);
    init_ln(params_, p + ".ln2", ParamGroup::encoder, d);
    init_linear(params_, p + ".ffn.w1", ParamGroup::encoder, d, f, rng);
    params_.add(p + ".ffn.b1", ParamGroup::encoder, Tensor::zeros({f}, true));
    init_linear(params_, p + ".ffn.w2", ParamGroup::encoder, f, d, rng);
    params_.add(p + ".ffn.b2", ParamGroup::encoder, Tensor::zeros({d}, true));
  }
  init_ln(params_, "enc.ln_f", ParamGroup::encoder, d);

  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string p = "dec.l" + std::to_string(l);
    init_attn(params_, p + ".self", ParamGroup::decoder, d, rng);
    init_attn(params_, p + ".cross", ParamGroup::decoder, d, rng);
    init_ln(params_, p + ".ln1", ParamGroup::decoder, d);
    init_ln(params_, p + ".ln2", ParamGroup::decoder, d);
    init_ln(params_, p + ".ln3", ParamGroup::decoder, d);
    init_linear(params_, p + ".ffn.w1", ParamGroup::decoder, d, f, rng);
    params_.add(p + ".ffn.b1", ParamGroup::decoder, Tensor::zeros({f}, true));
    init_linear(params_, p + ".ffn.w2", ParamGroup::decoder, f, d, rng);
    params_.add(p + ".ffn.b2", ParamGroup::decoder, Tensor::zeros({d}, true));
  }
  init_ln(params_, "dec.ln_f", ParamGroup::decoder, d);

  if (cfg_.latent == "categorical") {
    for (const std::string& which : {"post", "prior"}) {
      params_.add(which + ".e", ParamGroup::inference,
                  Tensor::randn({K, d}, rng, 1.0 / std::sqrt(double(d)), true));
      init_linear(params_, which + ".wk", ParamGroup::inference, d, d, rng);
      init_linear(params_, which + ".wh", ParamGroup::inference, d, d, rng);
      for (int k = 0; k < K; ++k)
        init_linear(params_, which + ".proj" + std::to_string(k),
                    ParamGroup::inference, d, C, rng);
    }
    for (int k = 0; k < K; ++k)
      params_.add("lat.emb" + std::to_string(k), ParamGroup::inference,
                  Tensor::randn({C, d}, rng, 1.0 / std::sqrt(double(d)), true));
    // BoW head starts as the plain embedding dot product (identity proj)
    std::vector<double> eye(d * d, 0.0);
    for (std::int64_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
    params_.add("bow.proj", ParamGroup::bow,
                Tensor::from_data({d, d}, std::move(eye), true));
  } else if (cfg_.latent == "gaussian") {
    for (const std::string& which : {"post", "prior"}) {
      init_linear(params_, which + ".gauss.wmu", ParamGroup::inference, d, d,
                  rng);
      params_.add(which + ".gauss.bmu", ParamGroup::inference,
                  Tensor::zeros({d}, true));
      init_linear(params_, which + ".gauss.wlv", ParamGroup::inference, d, d,
                  rng);
      params_.add(which + ".gauss.blv", ParamGroup::inference,
                  Tensor::zeros({d}, true));
    }
  }
}

Tensor Model::mha(const Tensor& q_in, const Tensor& kv_in, const Tensor& mask,
                  const std::string& prefix) const {
  std::int64_t d = cfg_.d_model;
  int h = cfg_.n_heads;
  std::int64_t dh = d / h;
  Tensor q = matmul(q_in, params_.at(prefix + ".wq"));
  Tensor k = matmul(kv_in, params_.at(prefix + ".wk"));
  Tensor v = matmul(kv_in, params_.at(prefix + ".wv"));
  std::vector<Tensor> heads;
  for (int i = 0; i < h; ++i) {
    Tensor qi = slice_last(q, i * dh, (i + 1) * dh);
    Tensor ki = slice_last(k, i * dh, (i + 1) * dh);
    Tensor vi = slice_last(v, i * dh, (i + 1) * dh);
    heads.push_back(scaled_dot_attention(qi, ki, vi, mask, dh));
  }
  return matmul(concat_last(heads), params_.at(prefix + ".wo"));
}

Tensor Model::transformer_block(const Tensor& x, const std::string& prefix,
                                const Tensor& self_mask,
                                const Tensor& cross_states,
                                const Tensor& cross_mask, bool train,
                                Rng& rng) const {
  // pre-LN residual blocks
  const std::string attn_name = cross_states.defined() ? ".self" : ".attn";
  Tensor h = x;
  Tensor n1 = layer_norm(h, params_.at(prefix + ".ln1.g"),
                         params_.at(prefix + ".ln1.b"));
  h = add(h, dropout(mha(n1, n1, self_mask, prefix + attn_name), cfg_.dropout,
                     rng, train));
  std::string ffn_ln = ".ln2";
  if (cross_states.defined()) {
    Tensor n2 = layer_norm(h, params_.at(prefix + ".ln2.g"),
                           params_.at(prefix + ".ln2.b"));
    h = add(h, dropout(mha(n2, cross_states, cross_mask, prefix + ".cross"),
                       cfg_.dropout, rng, train));
    ffn_ln = ".ln3";
  }
  Tensor n3 = layer_norm(h, params_.at(prefix + ffn_ln + ".g"),
                         params_.at(prefix + ffn_ln + ".b"));
  Tensor ff = matmul(relu(add(matmul(n3, params_.at(prefix + ".ffn.w1")),
                              params_.at(prefix + ".ffn.b1"))),
                     params_.at(prefix + ".ffn.w2"));
  ff = add(ff, params_.at(prefix + ".ffn.b2"));
  return add(h, dropout(ff, cfg_.dropout, rng, train));
}

Tensor Model::encode(const std::vector<TokenId>& ids,
                     const std::vector<bool>& mask, std::int64_t n,
                     std::int64_t len, bool train, Rng& rng) const {
  std::int64_t d = cfg_.d_model;
  Tensor x = embedding_lookup(params_.at("emb.token"), ids, {n, len});
  x = scale(x, std::sqrt(double(d)));
  x = add(x, sinusoidal_positions(len, d));
  x = dropout(x, cfg_.dropout, rng, train);
  Tensor m = key_padding_mask(mask, n, len);
  for (int l = 0; l < cfg_.n_layers; ++l)
    x = transformer_block(x, "enc.l" + std::to_string(l), m, Tensor(),
                          Tensor(), train, rng);
  return layer_norm(x, params_.at("enc.ln_f.g"), params_.at("enc.ln_f.b"));
}

LatentPosterior Model::infer_latent_logits(const Tensor& states,
                                           const std::vector<bool>& mask,
                                           std::int64_t n, std::int64_t len,
                                           const std::string& which) const {
  std::int64_t d = cfg_.d_model;
  int K = cfg_.n_latents, C = cfg_.n_categories;
  Tensor hw = matmul(states, params_.at(which + ".wh"));  // (N, L, d)
  Tensor q = matmul(params_.at(which + ".e"), params_.at(which + ".wk"));
  // scores (N, K, L) via (N, L, K) = hw · qᵀ
  Tensor scores = transpose_last2(matmul(hw, transpose_last2(q)));
  scores = scale(scores, 1.0 / std::sqrt(double(d)));
  scores = add(scores, key_padding_mask(mask, n, len));
  Tensor attn = softmax(scores, -1);
  Tensor ctx = matmul(attn, hw);  // (N, K, d)
  Tensor ctx_t = transpose_last2(ctx);  // (N, d, K)
  std::vector<Tensor> parts;
  for (int k = 0; k < K; ++k) {
    Tensor col = transpose_last2(slice_last(ctx_t, k, k + 1));  // (N, 1, d)
    parts.push_back(
        matmul(col, params_.at(which + ".proj" + std::to_string(k))));
  }
  Tensor logits = reshape(concat_last(parts), {n, K, C});
  LatentPosterior out;
  out.logits = logits;
  out.probs = softmax(logits, -1);
  out.source = which == "post" ? "posterior" : "prior";
  return out;
}

LatentSample Model::latent_from_values(const Tensor& values) const {
  std::int64_t n = values.dim(0);
  int K = cfg_.n_latents;
  Tensor vt = transpose_last2(values);  // (N, C, K)
  Tensor emb;
  for (int k = 0; k < K; ++k) {
    Tensor vk = transpose_last2(slice_last(vt, k, k + 1));  // (N, 1, C)
    Tensor ek = matmul(vk, params_.at("lat.emb" + std::to_string(k)));
    emb = emb.defined() ? add(emb, ek) : ek;
  }
  LatentSample s;
  s.values = values;
  s.embedding = emb;  // (N, 1, d)
  (void)n;
  return s;
}

LatentSample Model::sample_gumbel_softmax(const LatentPosterior& post,
                                          double tau, Rng& rng, bool hard,
                                          bool zero_noise) const {
  if (tau <= 0.0) throw std::invalid_argument("tau must be > 0");
  const Tensor& logits = post.logits;
  std::int64_t total = logits.size();
  std::vector<double> noise(total, 0.0);
  if (!zero_noise)
    for (auto& g : noise) g = rng.gumbel();
  if (hard) {
    // Gumbel-max: exact categorical draw, one-hot values
    int C = cfg_.n_categories;
    std::int64_t rows = total / C;
    std::vector<double> onehot(total, 0.0);
    for (std::int64_t r = 0; r < rows; ++r) {
      int best = 0;
      double bv = -1e300;
      for (int c = 0; c < C; ++c) {
        double v = logits.data()[r * C + c] + noise[r * C + c];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      onehot[r * C + best] = 1.0;
    }
    return latent_from_values(
        Tensor::from_data(logits.shape(), std::move(onehot)));
  }
  Tensor g = Tensor::from_data(logits.shape(), std::move(noise));
  Tensor values = softmax(scale(add(logits, g), 1.0 / tau), -1);
  return latent_from_values(values);
}

LatentSample Model::posterior_mean_latent(const LatentPosterior& post) const {
  return latent_from_values(post.probs);
}

Tensor Model::bow_logits(const LatentSample& z) const {
  std::int64_t d = cfg_.d_model;
  std::int64_t n = z.embedding.dim(0);
  Tensor e = reshape(z.embedding, {n, d});
  Tensor proj = matmul(e, params_.at("bow.proj"));
  Tensor logits = matmul(proj, transpose_last2(params_.at("emb.token")));
  return scale(logits, 1.0 / std::sqrt(double(d)));
}

Tensor Model::bow_probs(const LatentSample& z) const {
  return softmax(bow_logits(z), -1);
}

Tensor Model::decode_mixture_probs(const std::vector<TokenId>& tgt_in_ids,
                                   std::int64_t n, std::int64_t t,
                                   const Tensor& enc_states,
                                   const std::vector<bool>& src_mask,
                                   std::int64_t src_len,
                                   const Tensor& latent_emb,
                                   const Tensor& bow_p, double lambda,
                                   bool train, Rng& rng) const {
  std::int64_t d = cfg_.d_model, v = cfg_.vocab_size;
  Tensor x = embedding_lookup(params_.at("emb.token"), tgt_in_ids, {n, t});
  x = scale(x, std::sqrt(double(d)));
  x = add(x, sinusoidal_positions(t, d));
  if (latent_emb.defined()) x = add(x, latent_emb);  // every timestep
  x = dropout(x, cfg_.dropout, rng, train);
  Tensor self_mask = causal_mask(t);
  Tensor cross = key_padding_mask(src_mask, n, src_len);
  for (int l = 0; l < cfg_.n_layers; ++l)
    x = transformer_block(x, "dec.l" + std::to_string(l), self_mask,
                          enc_states, cross, train, rng);
  x = layer_norm(x, params_.at("dec.ln_f.g"), params_.at("dec.ln_f.b"));
  Tensor logits = matmul(x, transpose_last2(params_.at("emb.token")));
  Tensor probs = softmax(logits, -1);
  if (lambda > 0.0) {
    if (!bow_p.defined())
      throw std::invalid_argument("lambda > 0 needs a BoW distribution");
    Tensor bp = reshape(bow_p, {n, 1, v});
    probs = add(scale(probs, 1.0 - lambda), scale(bp, lambda));
  }
  return probs;
}

GaussianLatent Model::gaussian_latent(const Tensor& states,
                                      const std::vector<bool>& mask,
                                      std::int64_t n, std::int64_t len,
                                      const std::string& which) const {
  std::int64_t d = cfg_.d_model;
  // masked mean pooling
  std::vector<double> m(n * len, 0.0);
  std::vector<double> counts(n, 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < len; ++j)
      if (mask[i * len + j]) {
        m[i * len + j] = 1.0;
        counts[i] += 1.0;
      }
  Tensor mt = reshape(Tensor::from_data({n, len}, std::move(m)), {n, len, 1});
  Tensor summed = sum_axis(mul(states, mt), 1);  // (N, d)
  std::vector<double> inv(n);
  for (std::int64_t i = 0; i < n; ++i)
    inv[i] = counts[i] > 0 ? 1.0 / counts[i] : 0.0;
  Tensor pooled = mul(summed, reshape(Tensor::from_data({n}, std::move(inv)),
                                      {n, 1}));
  GaussianLatent g;
  g.mu = add(matmul(pooled, params_.at(which + ".gauss.wmu")),
             params_.at(which + ".gauss.bmu"));
  g.logvar = add(matmul(pooled, params_.at(which + ".gauss.wlv")),
                 params_.at(which + ".gauss.blv"));
  (void)d;
  return g;
}

Tensor Model::gaussian_sample(const GaussianLatent& g, Rng& rng,
                              bool zero_noise) const {
  std::int64_t n = g.mu.dim(0), d = g.mu.dim(1);
  std::vector<double> eps(n * d, 0.0);
  if (!zero_noise)
    for (auto& e : eps) e = rng.normal();
  Tensor et = Tensor::from_data({n, d}, std::move(eps));
  Tensor z = add(g.mu, mul(exp_t(scale(g.logvar, 0.5)), et));
  return reshape(z, {n, 1, d});
}

Tensor Model::encode_posterior_side(const SeqBatch& b, bool train, Rng& rng,
                                    std::vector<bool>* mask_out,
                                    std::int64_t* len_out) const {
  if (cfg_.posterior_inputs == "y") {
    *mask_out = b.tgt_mask;
    *len_out = b.tgt_len;
    return encode(b.tgt_ids, b.tgt_mask, b.n, b.tgt_len, train, rng);
  }
  // xy-concat: source tokens followed by target tokens, one sequence
  std::int64_t len = b.src_len + b.tgt_len;
  std::vector<TokenId> ids(b.n * len, Vocab::kPad);
  std::vector<bool> mask(b.n * len, false);
  for (std::int64_t r = 0; r < b.n; ++r) {
    for (std::int64_t j = 0; j < b.src_len; ++j) {
      ids[r * len + j] = b.src_ids[r * b.src_len + j];
      mask[r * len + j] = b.src_mask[r * b.src_len + j];
    }
    for (std::int64_t j = 0; j < b.tgt_len; ++j) {
      ids[r * len + b.src_len + j] = b.tgt_ids[r * b.tgt_len + j];
      mask[r * len + b.src_len + j] = b.tgt_mask[r * b.tgt_len + j];
    }
  }
  *mask_out = mask;
  *len_out = len;
  return encode(ids, mask, b.n, len, train, rng);
}

Model::InferenceLatent Model::prior_latent_for_decoding(
    const Tensor& enc, const std::vector<bool>& mask, std::int64_t len,
    Rng& rng) const {
  InferenceLatent out;
  if (cfg_.latent == "categorical") {
    LatentPosterior prior = infer_latent_logits(enc, mask, 1, len, "prior");
    LatentSample z = sample_gumbel_softmax(prior, cfg_.tau, rng, /*hard=*/true);
    out.latent_emb = z.embedding;
    if (cfg_.lambda_mix > 0.0) out.bow_p = bow_probs(z);
  } else if (cfg_.latent == "gaussian") {
    GaussianLatent g = gaussian_latent(enc, mask, 1, len, "prior");
    out.latent_emb = gaussian_sample(g, rng);
  }
  return out;
}

namespace {

std::vector<double> last_row(const Tensor& probs, std::int64_t t,
                             std::int64_t v) {
  std::vector<double> row(v);
  const double* p = probs.data().data() + (t - 1) * v;
  std::copy(p, p + v, row.begin());
  return row;
}

}  // namespace

DecodeResult Model::greedy_decode(const std::vector<TokenId>& src, Rng& rng,
                                  int max_len) const {
  NoGradGuard ng;
  std::int64_t s = static_cast<std::int64_t>(src.size());
  std::vector<bool> mask(s, true);
  Tensor enc = encode(src, mask, 1, s, false, rng);
  InferenceLatent lat = prior_latent_for_decoding(enc, mask, s, rng);
  double lambda = cfg_.latent == "categorical" ? cfg_.lambda_mix : 0.0;
  std::vector<TokenId> prefix{Vocab::kBos};
  DecodeResult res;
  double logp = 0.0;
  for (int step = 0; step < max_len; ++step) {
    Tensor probs = decode_mixture_probs(
        prefix, 1, static_cast<std::int64_t>(prefix.size()), enc, mask, s,
        lat.latent_emb, lat.bow_p, lambda, false, rng);
    auto row = last_row(probs, prefix.size(), cfg_.vocab_size);
    TokenId best = static_cast<TokenId>(
        std::max_element(row.begin(), row.end()) - row.begin());
    logp += std::log(row[best] + 1e-12);
    if (best == Vocab::kEos) break;
    prefix.push_back(best);
    res.ids.push_back(best);
    if (step == max_len - 1) res.truncated = true;
  }
  res.score = logp / std::max<size_t>(1, res.ids.size() + 1);
  return res;
}

DecodeResult Model::beam_decode(const std::vector<TokenId>& src, Rng& rng,
                                int beam, int max_len) const {
  if (beam < 1) throw std::invalid_argument("beam must be >= 1");
  NoGradGuard ng;
  std::int64_t s = static_cast<std::int64_t>(src.size());
  std::vector<bool> mask(s, true);
  Tensor enc = encode(src, mask, 1, s, false, rng);
  // one latent draw shared across the whole beam
  InferenceLatent lat = prior_latent_for_decoding(enc, mask, s, rng);
  double lambda = cfg_.latent == "categorical" ? cfg_.lambda_mix : 0.0;

  struct Hyp {
    std::vector<TokenId> prefix;  // starts with bos
    double logp = 0.0;
    bool done = false;
  };
  std::vector<Hyp> beams{{{Vocab::kBos}, 0.0, false}};
  for (int step = 0; step < max_len; ++step) {
    std::vector<Hyp> cand;
    bool all_done = true;
    for (const auto& h : beams) {
      if (h.done) {
        cand.push_back(h);
        continue;
      }
      all_done = false;
      Tensor probs = decode_mixture_probs(
          h.prefix, 1, static_cast<std::int64_t>(h.prefix.size()), enc, mask,
          s, lat.latent_emb, lat.bow_p, lambda, false, rng);
      auto row = last_row(probs, h.prefix.size(), cfg_.vocab_size);
      // top `beam` continuations of this hypothesis
      std::vector<int> idx(row.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      std::partial_sort(idx.begin(), idx.begin() + std::min<size_t>(beam,
                        idx.size()), idx.end(), [&](int a, int b) {
        return row[a] > row[b];
      });
      for (int i = 0; i < beam && i < static_cast<int>(idx.size()); ++i) {
        Hyp nh = h;
        nh.logp += std::log(row[idx[i]] + 1e-12);
        if (idx[i] == Vocab::kEos) {
          nh.done = true;
        } else {
          nh.prefix.push_back(idx[i]);
        }
        cand.push_back(std::move(nh));
      }
    }
    if (all_done) break;
    auto score = [](const Hyp& h) {
      return h.logp / std::max<size_t>(1, h.prefix.size());
    };
    std::sort(cand.begin(), cand.end(),
              [&](const Hyp& a, const Hyp& b) { return score(a) > score(b); });
    if (static_cast<int>(cand.size()) > beam) cand.resize(beam);
    beams = std::move(cand);
  }
  const Hyp* best = &beams[0];
  double best_score = -1e300;
  for (const auto& h : beams) {
    double sc = h.logp / std::max<size_t>(1, h.prefix.size());
    if (sc > best_score) {
      best_score = sc;
      best = &h;
    }
  }
  DecodeResult res;
  res.ids.assign(best->prefix.begin() + 1, best->prefix.end());
  res.truncated = !best->done;
  res.score = best_score;
  return res;
}

}  // namespace micvae
