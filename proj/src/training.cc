#include "micvae/training.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace micvae {

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "nonlatent") return TrainMode::nonlatent;
  if (s == "vnmt") return TrainMode::vnmt;
  if (s == "dcvae") return TrainMode::dcvae;
  if (s == "micvae") return TrainMode::micvae;
  if (s == "micvae_bow") return TrainMode::micvae_bow;
  if (s == "dcvae_bow") return TrainMode::dcvae_bow;
  throw std::invalid_argument(
      "unknown mode '" + s +
      "' (valid: nonlatent, vnmt, dcvae, micvae, micvae_bow, dcvae_bow)");
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::nonlatent: return "nonlatent";
    case TrainMode::vnmt: return "vnmt";
    case TrainMode::dcvae: return "dcvae";
    case TrainMode::micvae: return "micvae";
    case TrainMode::micvae_bow: return "micvae_bow";
    case TrainMode::dcvae_bow: return "dcvae_bow";
  }
  throw std::invalid_argument("bad mode enum");
}

bool mode_has_bow(TrainMode m) {
  return m == TrainMode::micvae_bow || m == TrainMode::dcvae_bow;
}

std::string TrainConfig::to_json() const {
  nlohmann::json j;
  j["mode"] = micvae::to_string(mode);
  j["steps"] = steps;
  j["warmup_steps"] = warmup_steps;
  j["base_lr"] = base_lr;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["weight_decay"] = weight_decay;
  j["max_tokens"] = max_tokens;
  j["self_training"] = self_training;
  j["anneal"] = anneal;
  j["anneal_ramp"] = anneal_ramp;
  j["eval_every"] = eval_every;
  j["min_count"] = min_count;
  j["seed"] = seed;
  j["model"] = nlohmann::json::parse(model.to_json());
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& s) {
  auto j = nlohmann::json::parse(s);
  TrainConfig c;
  c.mode = train_mode_from_string(j.at("mode"));
  c.steps = j.at("steps");
  c.warmup_steps = j.at("warmup_steps");
  c.base_lr = j.at("base_lr");
  c.beta1 = j.at("beta1");
  c.beta2 = j.at("beta2");
  c.adam_eps = j.at("adam_eps");
  c.weight_decay = j.at("weight_decay");
  c.max_tokens = j.at("max_tokens");
  c.self_training = j.at("self_training");
  c.anneal = j.at("anneal");
  c.anneal_ramp = j.at("anneal_ramp");
  c.eval_every = j.at("eval_every");
  c.min_count = j.at("min_count");
  c.seed = j.at("seed");
  c.model = ModelConfig::from_json(j.at("model").dump());
  return c;
}

ModelConfig TrainConfig::effective_model(std::int64_t vocab_size) const {
  ModelConfig m = model;
  m.vocab_size = vocab_size;
  switch (mode) {
    case TrainMode::nonlatent:
      m.latent = "none";
      m.lambda_mix = 0.0;
      break;
    case TrainMode::vnmt:
      m.latent = "gaussian";
      m.lambda_mix = 0.0;
      break;
    case TrainMode::dcvae:
    case TrainMode::micvae:
      m.latent = "categorical";
      m.lambda_mix = 0.0;
      break;
    case TrainMode::micvae_bow:
    case TrainMode::dcvae_bow:
      m.latent = "categorical";
      break;
  }
  return m;
}

std::set<ParamGroup> gradient_mask(StepKind kind) {
  switch (kind) {
    case StepKind::supervised:
      // bow included so lambda > 0 reaches the head through the mixture;
      // with lambda = 0 it simply never receives a gradient
      return {ParamGroup::encoder, ParamGroup::inference, ParamGroup::decoder,
              ParamGroup::bow};
    case StepKind::bow:
      return {ParamGroup::encoder, ParamGroup::inference, ParamGroup::bow};
    case StepKind::mono:
      return {ParamGroup::encoder, ParamGroup::inference};
  }
  throw std::invalid_argument("unknown step kind");
}

AdamOptimizer::AdamOptimizer(Params& params, const TrainConfig& cfg)
    : params_(params), cfg_(cfg) {}

double AdamOptimizer::lr_at(std::int64_t step) const {
  if (step < 1) step = 1;
  double s = static_cast<double>(step);
  double w = static_cast<double>(cfg_.warmup_steps);
  return cfg_.base_lr / std::sqrt(double(cfg_.model.d_model)) *
         std::min(1.0 / std::sqrt(s), s / (w * std::sqrt(w)));
}

void AdamOptimizer::step(std::int64_t step, const std::set<ParamGroup>& mask) {
  // NaN scan first: a poisoned gradient aborts the whole update
  for (const auto& name : params_.order) {
    if (!mask.count(params_.groups.at(name))) continue;
    const Tensor& p = params_.at(name);
    if (!p.has_grad()) continue;
    for (double g : p.grad())
      if (!std::isfinite(g)) {
        ++nan_skips_;
        return;
      }
  }
  double lr = lr_at(step);
  for (const auto& name : params_.order) {
    if (!mask.count(params_.groups.at(name))) continue;
    Tensor& p = params_.at(name);
    if (!p.has_grad()) continue;
    AdamState& s = state_[name];
    if (s.m.empty()) {
      s.m.assign(p.size(), 0.0);
      s.v.assign(p.size(), 0.0);
    }
    ++s.t;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(s.t));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(s.t));
    auto data = p.data_mut();
    auto grad = p.grad();
    for (std::int64_t i = 0; i < p.size(); ++i) {
      double g = grad[i];
      s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
      s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
      double mhat = s.m[i] / bc1;
      double vhat = s.v[i] / bc2;
      data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
      data[i] -= lr * cfg_.weight_decay * data[i];  // decoupled decay
    }
  }
}

Trainer::Trainer(TrainConfig cfg, const std::vector<SentencePair>& bitext,
                 const std::vector<SentencePair>& heldout,
                 std::vector<std::vector<std::string>> mono)
    : cfg_(std::move(cfg)),
      bitext_(bitext),
      heldout_(heldout),
      mono_(std::move(mono)),
      rng_(cfg_.seed) {
  if (cfg_.steps <= 0) throw std::invalid_argument("steps must be > 0");
  if (cfg_.warmup_steps < 1)
    throw std::invalid_argument("warmup_steps must be >= 1");
  std::vector<std::vector<std::string>> all;
  for (const auto& p : bitext_) {
    all.push_back(p.src);
    all.push_back(p.tgt);
  }
  for (const auto& s : mono_) all.push_back(s);
  vocab_ = build_vocab(all, cfg_.min_count);
  model_storage_.emplace(cfg_.effective_model(vocab_.size()), rng_);
  model_ = &*model_storage_;
  opt_storage_.emplace(model_->params(), cfg_);
  opt_ = &*opt_storage_;
  order_.resize(bitext_.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
}

SeqBatch Trainer::next_batch() {
  std::vector<SentencePair> chunk;
  int tokens = 0;
  while (true) {
    if (cursor_ >= order_.size()) cursor_ = 0;
    if (cursor_ == 0) {
      for (size_t i = order_.size(); i > 1; --i)
        std::swap(order_[i - 1], order_[rng_.below(i)]);
    }
    const SentencePair& p = bitext_[order_[cursor_]];
    int t = static_cast<int>(p.src.size() + p.tgt.size()) + 4;
    if (!chunk.empty() && tokens + t > cfg_.max_tokens) break;
    chunk.push_back(p);
    tokens += t;
    ++cursor_;
    if (tokens >= cfg_.max_tokens) break;
  }
  return make_batch(chunk, cfg_.max_tokens, vocab_);
}

MonoBatch Trainer::next_mono_batch() {
  std::vector<std::vector<std::string>> chunk;
  int tokens = 0;
  while (true) {
    if (mono_cursor_ >= mono_.size()) mono_cursor_ = 0;
    const auto& s = mono_[mono_cursor_];
    int t = static_cast<int>(s.size()) + 2;
    if (!chunk.empty() && tokens + t > cfg_.max_tokens) break;
    chunk.push_back(s);
    tokens += t;
    ++mono_cursor_;
    if (tokens >= cfg_.max_tokens) break;
  }
  return make_mono_batch(chunk, cfg_.max_tokens, vocab_);
}

LossResult Trainer::supervised_loss(const SeqBatch& b) {
  const ModelConfig& mc = model_->cfg();
  Tensor enc = model_->encode(b.src_ids, b.src_mask, b.n, b.src_len, true,
                              rng_);
  std::int64_t t = b.tgt_len - 1;
  std::vector<TokenId> in(b.n * t), labels(b.n * t);
  std::vector<bool> lmask(b.n * t);
  for (std::int64_t r = 0; r < b.n; ++r)
    for (std::int64_t j = 0; j < t; ++j) {
      in[r * t + j] = b.tgt_ids[r * b.tgt_len + j];
      labels[r * t + j] = b.tgt_ids[r * b.tgt_len + j + 1];
      lmask[r * t + j] = b.tgt_mask[r * b.tgt_len + j + 1];
    }
  in = word_dropout(in, mc.word_dropout_rate, rng_);

  double aw = 1.0;
  if (cfg_.mode == TrainMode::dcvae || cfg_.mode == TrainMode::dcvae_bow ||
      cfg_.mode == TrainMode::vnmt)
    aw = kl_anneal(step_, anneal_schedule_from_string(cfg_.anneal),
                   cfg_.anneal_ramp);

  if (cfg_.mode == TrainMode::nonlatent) {
    Tensor probs = model_->decode_mixture_probs(
        in, b.n, t, enc, b.src_mask, b.src_len, Tensor(), Tensor(), 0.0, true,
        rng_);
    LossResult r;
    r.total = recon_nll(probs, labels, lmask);
    r.report.recon_nll = r.total.item();
    r.report.total = r.report.recon_nll;
    return r;
  }

  std::vector<bool> pmask;
  std::int64_t plen = 0;
  Tensor penc = model_->encode_posterior_side(b, true, rng_, &pmask, &plen);

  if (cfg_.mode == TrainMode::vnmt) {
    GaussianLatent gpost =
        model_->gaussian_latent(penc, pmask, b.n, plen, "post");
    GaussianLatent gprior =
        model_->gaussian_latent(enc, b.src_mask, b.n, b.src_len, "prior");
    Tensor z = model_->gaussian_sample(gpost, rng_);
    Tensor probs = model_->decode_mixture_probs(
        in, b.n, t, enc, b.src_mask, b.src_len, z, Tensor(), 0.0, true, rng_);
    return vnmt_loss(probs, labels, lmask, gpost, gprior, aw);
  }

  LatentPosterior post =
      model_->infer_latent_logits(penc, pmask, b.n, plen, "post");
  LatentPosterior prior =
      model_->infer_latent_logits(enc, b.src_mask, b.n, b.src_len, "prior");
  LatentSample z = model_->sample_gumbel_softmax(post, mc.tau, rng_, false);
  Tensor bow_p =
      mc.lambda_mix > 0.0 ? model_->bow_probs(z) : Tensor();
  Tensor probs = model_->decode_mixture_probs(in, b.n, t, enc, b.src_mask,
                                              b.src_len, z.embedding, bow_p,
                                              mc.lambda_mix, true, rng_);
  if (cfg_.mode == TrainMode::dcvae || cfg_.mode == TrainMode::dcvae_bow)
    return cvae_elbo_loss(probs, labels, lmask, post, prior, aw);
  return micvae_loss(probs, labels, lmask, post, prior);
}

void Trainer::bow_step(const SeqBatch& b, LossReport& report) {
  const ModelConfig& mc = model_->cfg();
  model_->params().zero_grads();
  std::vector<bool> pmask;
  std::int64_t plen = 0;
  Tensor penc = model_->encode_posterior_side(b, true, rng_, &pmask, &plen);
  LatentPosterior post =
      model_->infer_latent_logits(penc, pmask, b.n, plen, "post");
  LatentSample z = model_->sample_gumbel_softmax(post, mc.tau, rng_, false);
  LossResult r = bow_loss(model_->bow_logits(z), b.bow_targets,
                          b.bow_degenerate);
  backward(r.total);
  opt_->step(step_, gradient_mask(StepKind::bow));
  report.bow_loss = r.report.bow_loss;
}

void Trainer::mono_step(LossReport& report) {
  const ModelConfig& mc = model_->cfg();
  MonoBatch mb = next_mono_batch();
  model_->params().zero_grads();
  Tensor enc =
      model_->encode(mb.src_ids, mb.src_mask, mb.n, mb.src_len, true, rng_);
  LatentPosterior post =
      model_->infer_latent_logits(enc, mb.src_mask, mb.n, mb.src_len, "post");
  LatentPosterior prior =
      model_->infer_latent_logits(enc, mb.src_mask, mb.n, mb.src_len, "prior");
  LatentSample z = model_->sample_gumbel_softmax(post, mc.tau, rng_, false);
  LossResult r = mono_loss(mb, model_->bow_logits(z), post, prior);
  backward(r.total);
  opt_->step(step_, gradient_mask(StepKind::mono));
  report.mono_loss = r.report.mono_loss;
  mono_losses_.push_back(r.report.mono_loss);
}

LossReport Trainer::train_step() {
  ++step_;
  SeqBatch b = next_batch();
  model_->params().zero_grads();
  LossResult sup = supervised_loss(b);
  backward(sup.total);
  opt_->step(step_, gradient_mask(StepKind::supervised));
  LossReport rep = sup.report;
  if (mode_has_bow(cfg_.mode)) bow_step(b, rep);
  if (cfg_.self_training && !mono_.empty()) mono_step(rep);

  if (initial_nll_ < 0.0) initial_nll_ = rep.recon_nll;
  if (rep.recon_nll > 2.0 * initial_nll_)
    ++divergence_run_;
  else
    divergence_run_ = 0;
  return rep;
}

CollapseMetrics Trainer::eval_metrics() {
  return collapse_metrics(*model_, heldout_, vocab_, cfg_.max_tokens, step_,
                          rng_);
}

TrainResult Trainer::train(const std::string& metrics_path) {
  TrainResult res;
  std::ofstream csv;
  if (!metrics_path.empty()) {
    csv.open(metrics_path);
    if (!csv) throw std::runtime_error("cannot write " + metrics_path);
    csv.precision(17);
    csv << "step,kl,mi_zx,mi_zy,kl_aggregated,nll_per_token,bow_loss,"
           "anneal_weight\n";
  }
  double last_bow = 0.0, last_aw = 1.0;
  auto emit = [&]() {
    CollapseMetrics m = eval_metrics();
    res.metrics.push_back(m);
    res.bow_losses.push_back(last_bow);
    if (csv.is_open())
      csv << m.step << "," << m.kl << "," << m.mi_zx << "," << m.mi_zy << ","
          << m.kl_aggregated << "," << m.nll_per_token << "," << last_bow
          << "," << last_aw << "\n";
  };
  emit();
  while (step_ < cfg_.steps) {
    LossReport rep = train_step();
    last_bow = rep.bow_loss;
    last_aw = rep.anneal_weight;
    if (step_ % cfg_.eval_every == 0 || step_ == cfg_.steps) emit();
    if (divergence_run_ >= 200) {
      res.diverged = true;
      break;
    }
  }
  res.mono_losses = mono_losses_;
  res.final_step = step_;
  return res;
}

// ---- checkpoint io ----

namespace {

constexpr char kMagic[4] = {'M', 'I', 'C', 'V'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error("truncated checkpoint");
  return v;
}

void put_str(std::ostream& os, const std::string& s) {
  put_u64(os, s.size());
  os.write(s.data(), s.size());
}

std::string get_str(std::istream& is) {
  std::string s(get_u64(is), '\0');
  is.read(s.data(), s.size());
  if (!is) throw std::runtime_error("truncated checkpoint");
  return s;
}

void put_doubles(std::ostream& os, std::span<const double> d) {
  put_u64(os, d.size());
  os.write(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
}

std::vector<double> get_doubles(std::istream& is) {
  std::vector<double> d(get_u64(is));
  is.read(reinterpret_cast<char*>(d.data()), d.size() * sizeof(double));
  if (!is) throw std::runtime_error("truncated checkpoint");
  return d;
}

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointFile& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os.write(kMagic, 4);
  std::uint32_t ver = kVersion;
  os.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  put_str(os, ck.cfg.to_json());
  put_u64(os, ck.vocab_tokens.size());
  for (const auto& t : ck.vocab_tokens) put_str(os, t);
  put_u64(os, ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    put_str(os, name);
    put_u64(os, t.shape().size());
    for (auto d : t.shape()) put_u64(os, static_cast<std::uint64_t>(d));
    put_doubles(os, t.data());
  }
  put_u64(os, ck.adam.size());
  for (const auto& [name, s] : ck.adam) {
    put_str(os, name);
    put_u64(os, static_cast<std::uint64_t>(s.t));
    put_doubles(os, s.m);
    put_doubles(os, s.v);
  }
  put_u64(os, static_cast<std::uint64_t>(ck.step));
  put_str(os, ck.rng_state);
  put_u64(os, ck.order.size());
  for (auto v : ck.order) put_u64(os, v);
  put_u64(os, ck.cursor);
  put_u64(os, ck.mono_cursor);
  put_doubles(os, std::span<const double>(&ck.initial_nll, 1));
  put_u64(os, static_cast<std::uint64_t>(
                  static_cast<std::uint32_t>(ck.divergence_run)));
}

CheckpointFile read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path);
  char magic[4];
  is.read(magic, 4);
  std::uint32_t ver = 0;
  is.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (!is || std::memcmp(magic, kMagic, 4) != 0 || ver != kVersion)
    throw std::runtime_error("not a valid checkpoint: " + path);
  CheckpointFile ck;
  ck.cfg = TrainConfig::from_json(get_str(is));
  ck.vocab_tokens.resize(get_u64(is));
  for (auto& t : ck.vocab_tokens) t = get_str(is);
  std::uint64_t nt = get_u64(is);
  for (std::uint64_t i = 0; i < nt; ++i) {
    std::string name = get_str(is);
    Shape shape(get_u64(is));
    for (auto& d : shape) d = static_cast<std::int64_t>(get_u64(is));
    ck.tensors.emplace_back(
        name, Tensor::from_data(shape, get_doubles(is), true));
  }
  std::uint64_t na = get_u64(is);
  for (std::uint64_t i = 0; i < na; ++i) {
    std::string name = get_str(is);
    AdamState s;
    s.t = static_cast<std::int64_t>(get_u64(is));
    s.m = get_doubles(is);
    s.v = get_doubles(is);
    ck.adam[name] = std::move(s);
  }
  ck.step = static_cast<std::int64_t>(get_u64(is));
  ck.rng_state = get_str(is);
  ck.order.resize(get_u64(is));
  for (auto& v : ck.order) v = get_u64(is);
  ck.cursor = get_u64(is);
  ck.mono_cursor = get_u64(is);
  ck.initial_nll = get_doubles(is)[0];
  ck.divergence_run = static_cast<std::int32_t>(get_u64(is));
  return ck;
}

void Trainer::save_checkpoint(const std::string& path) const {
  CheckpointFile ck;
  ck.cfg = cfg_;
  ck.vocab_tokens = vocab_.tokens();
  for (const auto& name : model_->params().order)
    ck.tensors.emplace_back(name, model_->params().at(name));
  ck.adam = const_cast<AdamOptimizer*>(opt_)->state();
  ck.step = step_;
  ck.rng_state = rng_.save_state();
  ck.order.assign(order_.begin(), order_.end());
  ck.cursor = cursor_;
  ck.mono_cursor = mono_cursor_;
  ck.initial_nll = initial_nll_;
  ck.divergence_run = divergence_run_;
  write_checkpoint(path, ck);
}

Trainer Trainer::load_checkpoint(const std::string& path,
                                 const std::vector<SentencePair>& bitext,
                                 const std::vector<SentencePair>& heldout,
                                 std::vector<std::vector<std::string>> mono) {
  CheckpointFile ck = read_checkpoint(path);
  Trainer tr(ck.cfg, bitext, heldout, std::move(mono));
  if (tr.vocab_.tokens() != ck.vocab_tokens)
    throw std::runtime_error("vocab mismatch between checkpoint and corpus");
  for (const auto& [name, t] : ck.tensors) {
    Tensor& dst = tr.model_->params().at(name);
    if (dst.shape() != t.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    std::copy(t.data().begin(), t.data().end(), dst.data_mut().begin());
  }
  tr.opt_->state() = ck.adam;
  tr.step_ = ck.step;
  tr.rng_.load_state(ck.rng_state);
  tr.order_.assign(ck.order.begin(), ck.order.end());
  tr.cursor_ = ck.cursor;
  tr.mono_cursor_ = ck.mono_cursor;
  tr.initial_nll_ = ck.initial_nll;
  tr.divergence_run_ = ck.divergence_run;
  return tr;
}

LoadedModel load_model(const std::string& ckpt_path) {
  CheckpointFile ck = read_checkpoint(ckpt_path);
  LoadedModel lm{ck.cfg,
                 Vocab(std::vector<std::string>(ck.vocab_tokens.begin() + 4,
                                                ck.vocab_tokens.end())),
                 std::nullopt};
  Rng tmp(0);
  lm.model.emplace(ck.cfg.effective_model(lm.vocab.size()), tmp);
  for (const auto& [name, t] : ck.tensors) {
    Tensor& dst = lm.model->params().at(name);
    if (dst.shape() != t.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    std::copy(t.data().begin(), t.data().end(), dst.data_mut().begin());
  }
  return lm;
}

std::vector<std::vector<std::string>> translate_corpus(
    const Model& model, const Vocab& vocab,
    const std::vector<SentencePair>& pairs, int beam, int max_len, Rng& rng) {
  std::vector<std::vector<std::string>> hyps;
  for (const auto& p : pairs) {
    std::vector<TokenId> src;
    src.push_back(Vocab::kBos);
    for (const auto& t : p.src) src.push_back(vocab.lookup(t));
    src.push_back(Vocab::kEos);
    DecodeResult r = beam <= 1 ? model.greedy_decode(src, rng, max_len)
                               : model.beam_decode(src, rng, beam, max_len);
    std::vector<std::string> toks;
    for (TokenId id : r.ids) toks.push_back(vocab.token(id));
    hyps.push_back(std::move(toks));
  }
  return hyps;
}

}  // namespace micvae
