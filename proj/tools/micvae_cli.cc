// micvae command-line tool: synthetic data generation, training,
// evaluation, collapse diagnostics and latent dumps. Every command
// writes a JSON manifest describing inputs, effective config and
// outputs so a run can be replayed exactly.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "micvae/bleu.h"
#include "micvae/diagnostics.h"
#include "micvae/training.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDiverged = 4;
constexpr const char* kVersion = "micvae-0.1";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string file_hash(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::uint64_t h = 14695981039346656037ull;  // FNV-1a
  char buf[4096];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!is) break;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

void ensure_out_dir(const std::string& dir, bool force) {
  fs::path p(dir);
  if (fs::exists(p)) {
    if (!fs::is_directory(p))
      throw std::runtime_error(dir + " exists and is not a directory");
    if (!fs::is_empty(p) && !force)
      throw std::runtime_error(dir +
                               " is not empty; pass --force to overwrite");
  } else {
    fs::create_directories(p);
  }
}

struct ManifestBuilder {
  json j;
  std::chrono::steady_clock::time_point start =
      std::chrono::steady_clock::now();

  explicit ManifestBuilder(const std::string& command) {
    j["command"] = command;
    j["version"] = kVersion;
    j["inputs"] = json::object();
    j["outputs"] = json::array();
  }
  void input(const std::string& path) { j["inputs"][path] = file_hash(path); }
  void output(const std::string& path) { j["outputs"].push_back(path); }
  void write(const std::string& path) {
    j["wall_clock_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    os << j.dump(2) << "\n";
  }
};

std::uint64_t effective_seed(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("MICVAE_SEED")) {
    char* end = nullptr;
    unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw UsageError("MICVAE_SEED is not an integer: " +
                       std::string(env));
    return v;
  }
  return flag_seed;
}

// ---- synth-data ----

int cmd_synth_data(int modes, int pairs, std::uint64_t seed,
                   const std::string& out, bool force) {
  if (pairs <= 0) throw UsageError("--pairs must be > 0");
  if (modes <= 0) throw UsageError("--modes must be > 0");
  seed = effective_seed(seed);
  ensure_out_dir(out, force);
  int extra = std::max(1, pairs / 10);
  auto all = micvae::gen_multimodal_task(pairs + 2 * extra, modes, seed);
  std::vector<micvae::SentencePair> train(all.begin(), all.begin() + pairs);
  std::vector<micvae::SentencePair> held(all.begin() + pairs,
                                         all.begin() + pairs + extra);
  std::vector<std::vector<std::string>> mono;
  for (int i = pairs + extra; i < pairs + 2 * extra; ++i)
    mono.push_back(all[i].src);

  std::string bitext = out + "/bitext.tsv";
  std::string heldout = out + "/heldout.tsv";
  std::string mono_p = out + "/mono.txt";
  micvae::write_bitext(bitext, train, seed, modes);
  micvae::write_bitext(heldout, held, seed, modes);
  micvae::write_mono(mono_p, mono, seed, modes);

  ManifestBuilder m("synth-data");
  m.j["config"] = {{"modes", modes}, {"pairs", pairs}};
  m.j["seed"] = seed;
  m.output(bitext);
  m.output(heldout);
  m.output(mono_p);
  m.write(out + "/manifest.json");
  return kExitOk;
}

// ---- train ----

int cmd_train(const std::string& mode, const std::string& data,
              const std::string& heldout_path, const std::string& mono_path,
              const std::string& config_path, const std::string& out,
              bool force, const CLI::App* sub, std::int64_t steps,
              std::uint64_t seed, std::int64_t warmup, int max_tokens,
              const std::string& anneal, std::int64_t anneal_ramp,
              std::int64_t eval_every, bool self_training, double lambda,
              double tau, const std::string& posterior_inputs) {
  micvae::TrainConfig cfg;
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw std::runtime_error("cannot read config " + config_path);
    std::stringstream ss;
    ss << is.rdbuf();
    cfg = micvae::TrainConfig::from_json(ss.str());
  }
  // flags override the file only when explicitly passed
  try {
    cfg.mode = micvae::train_mode_from_string(mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (sub->count("--steps")) cfg.steps = steps;
  if (sub->count("--seed")) cfg.seed = seed;
  if (sub->count("--warmup")) cfg.warmup_steps = warmup;
  if (sub->count("--max-tokens")) cfg.max_tokens = max_tokens;
  if (sub->count("--anneal")) cfg.anneal = anneal;
  if (sub->count("--anneal-ramp")) cfg.anneal_ramp = anneal_ramp;
  if (sub->count("--eval-every")) cfg.eval_every = eval_every;
  if (sub->count("--self-training")) cfg.self_training = self_training;
  if (sub->count("--lambda")) cfg.model.lambda_mix = lambda;
  if (sub->count("--tau")) cfg.model.tau = tau;
  if (sub->count("--posterior-inputs"))
    cfg.model.posterior_inputs = posterior_inputs;
  cfg.seed = effective_seed(cfg.seed);

  auto bitext = micvae::read_bitext(data);
  std::vector<micvae::SentencePair> heldout;
  if (!heldout_path.empty()) {
    heldout = micvae::read_bitext(heldout_path);
  } else {
    // hold out a trailing slice when no separate file is given
    size_t k = std::max<size_t>(1, bitext.size() / 10);
    heldout.assign(bitext.end() - k, bitext.end());
    bitext.resize(bitext.size() - k);
  }
  std::vector<std::vector<std::string>> mono;
  if (!mono_path.empty()) mono = micvae::read_mono(mono_path);
  if (cfg.self_training && mono.empty())
    throw std::runtime_error("--self-training requires --mono data");

  ensure_out_dir(out, force);
  ManifestBuilder m("train");
  m.input(data);
  if (!heldout_path.empty()) m.input(heldout_path);
  if (!mono_path.empty()) m.input(mono_path);
  if (!config_path.empty()) m.input(config_path);

  micvae::Trainer trainer(cfg, bitext, heldout, std::move(mono));
  std::string metrics = out + "/metrics.csv";
  micvae::TrainResult res = trainer.train(metrics);
  std::string ckpt = out + "/checkpoint.bin";
  trainer.save_checkpoint(ckpt);

  m.j["config"] = json::parse(cfg.to_json());
  m.j["seed"] = cfg.seed;
  m.j["diverged"] = res.diverged;
  m.j["final_step"] = res.final_step;
  if (!res.metrics.empty()) {
    const auto& last = res.metrics.back();
    m.j["final_metrics"] = {{"kl", last.kl},
                            {"mi_zx", last.mi_zx},
                            {"mi_zy", last.mi_zy},
                            {"kl_aggregated", last.kl_aggregated},
                            {"nll_per_token", last.nll_per_token}};
  }
  m.output(metrics);
  m.output(ckpt);
  m.write(out + "/manifest.json");
  if (res.diverged) {
    std::cerr << "training diverged at step " << res.final_step << "\n";
    return kExitDiverged;
  }
  std::cout << "trained " << res.final_step << " steps; checkpoint at "
            << ckpt << "\n";
  return kExitOk;
}

// ---- eval ----

int cmd_eval(const std::string& ckpt, const std::string& data, int beam,
             int max_len, const std::string& out, bool force) {
  if (beam < 1) throw UsageError("--beam must be >= 1");
  micvae::LoadedModel lm = micvae::load_model(ckpt);
  auto pairs = micvae::read_bitext(data);
  if (pairs.empty()) throw std::runtime_error("empty eval corpus: " + data);

  ensure_out_dir(out, force);
  ManifestBuilder m("eval");
  m.input(ckpt);
  m.input(data);

  micvae::Rng rng(lm.cfg.seed);
  auto hyps =
      micvae::translate_corpus(*lm.model, lm.vocab, pairs, beam, max_len, rng);
  std::vector<std::vector<std::string>> refs;
  for (const auto& p : pairs) refs.push_back(p.tgt);
  double bleu = micvae::corpus_bleu(hyps, refs);
  double nll = micvae::eval_nll(*lm.model, pairs, lm.vocab, lm.cfg.max_tokens,
                                rng);

  std::string hyp_path = out + "/hyps.txt";
  std::ofstream hs(hyp_path);
  if (!hs) throw std::runtime_error("cannot write " + hyp_path);
  for (const auto& h : hyps) {
    for (size_t i = 0; i < h.size(); ++i) hs << (i ? " " : "") << h[i];
    hs << "\n";
  }
  hs.close();

  std::cout.precision(17);
  std::cout << "BLEU " << bleu << "\n";
  std::cout << "NLL/token " << nll << "\n";

  m.j["config"] = json::parse(lm.cfg.to_json());
  m.j["seed"] = lm.cfg.seed;
  m.j["beam"] = beam;
  m.j["bleu"] = bleu;
  m.j["nll_per_token"] = nll;
  m.output(hyp_path);
  m.write(out + "/manifest.json");
  return kExitOk;
}

// ---- diagnose ----

int cmd_diagnose(const std::string& ckpt, const std::string& data,
                 const std::string& out) {
  micvae::LoadedModel lm = micvae::load_model(ckpt);
  auto pairs = micvae::read_bitext(data);
  if (pairs.empty()) throw std::runtime_error("empty corpus: " + data);

  ManifestBuilder m("diagnose");
  m.input(ckpt);
  m.input(data);

  micvae::Rng rng(lm.cfg.seed);
  micvae::CollapseMetrics cm = micvae::collapse_metrics(
      *lm.model, pairs, lm.vocab, lm.cfg.max_tokens, 0, rng);

  double residual = 0.0;
  const auto& mc = lm.model->cfg();
  if (mc.latent == "categorical") {
    size_t take = std::min<size_t>(64, pairs.size());
    std::vector<micvae::SentencePair> chunk(pairs.begin(),
                                            pairs.begin() + take);
    micvae::SeqBatch b = micvae::make_batch(chunk, 1 << 20, lm.vocab);
    auto probs = micvae::posterior_probs_y(*lm.model, b, rng);
    std::vector<double> uniform(mc.n_latents * mc.n_categories,
                                1.0 / mc.n_categories);
    residual = micvae::decomposition_check(probs, b.n, mc.n_latents,
                                           mc.n_categories, uniform);
  }

  std::cout.precision(17);
  std::cout << "kl " << cm.kl << "\nmi_zx " << cm.mi_zx << "\nmi_zy "
            << cm.mi_zy << "\nkl_aggregated " << cm.kl_aggregated
            << "\nnll_per_token " << cm.nll_per_token
            << "\ndecomposition_residual " << residual << "\n";

  bool fresh = !fs::exists(out) || fs::file_size(out) == 0;
  std::ofstream csv(out, std::ios::app);
  if (!csv) throw std::runtime_error("cannot write " + out);
  csv.precision(17);
  if (fresh)
    csv << "step,kl,mi_zx,mi_zy,kl_aggregated,nll_per_token,bow_loss,"
           "anneal_weight\n";
  csv << cm.step << "," << cm.kl << "," << cm.mi_zx << "," << cm.mi_zy << ","
      << cm.kl_aggregated << "," << cm.nll_per_token << ",0,1\n";
  csv.close();

  m.j["config"] = json::parse(lm.cfg.to_json());
  m.j["seed"] = lm.cfg.seed;
  m.j["metrics"] = {{"kl", cm.kl},
                    {"mi_zx", cm.mi_zx},
                    {"mi_zy", cm.mi_zy},
                    {"kl_aggregated", cm.kl_aggregated},
                    {"nll_per_token", cm.nll_per_token},
                    {"decomposition_residual", residual}};
  m.output(out);
  m.write(out + ".manifest.json");
  return kExitOk;
}

// ---- dump-latents ----

int cmd_dump_latents(const std::string& ckpt, const std::string& data_a,
                     const std::string& data_b, const std::string& label_a,
                     const std::string& label_b, const std::string& out) {
  micvae::LoadedModel lm = micvae::load_model(ckpt);
  if (lm.model->cfg().latent != "categorical")
    throw std::runtime_error("dump-latents needs a categorical-latent model");
  auto a = micvae::read_bitext(data_a);
  auto b = micvae::read_bitext(data_b);

  ManifestBuilder m("dump-latents");
  m.input(ckpt);
  m.input(data_a);
  m.input(data_b);

  micvae::Rng rng(lm.cfg.seed);
  micvae::dump_latents(*lm.model, a, b, label_a, label_b, lm.vocab, out, rng);

  m.j["config"] = json::parse(lm.cfg.to_json());
  m.j["seed"] = lm.cfg.seed;
  m.output(out);
  m.write(out + ".manifest.json");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mutual-information-promoting conditional VAE for seq2seq"};
  app.require_subcommand(1);

  // synth-data
  auto* sd = app.add_subcommand("synth-data", "generate a synthetic corpus");
  int sd_modes = 2, sd_pairs = 1000;
  std::uint64_t sd_seed = 1;
  std::string sd_out;
  bool sd_force = false;
  sd->add_option("--modes", sd_modes, "number of latent transform modes");
  sd->add_option("--pairs", sd_pairs, "number of bitext pairs");
  sd->add_option("--seed", sd_seed, "rng seed");
  sd->add_option("--out", sd_out, "output directory")->required();
  sd->add_flag("--force", sd_force, "allow a non-empty output directory");

  // train
  auto* tr = app.add_subcommand("train", "train a model");
  std::string tr_mode = "micvae_bow", tr_data, tr_heldout, tr_mono, tr_config,
              tr_out, tr_anneal = "linear", tr_post = "y";
  std::int64_t tr_steps = 2000, tr_warmup = 400, tr_ramp = 1000,
               tr_eval_every = 100;
  std::uint64_t tr_seed = 1;
  int tr_max_tokens = 1024;
  bool tr_self = false, tr_force = false;
  double tr_lambda = 0.1, tr_tau = 1.0;
  tr->add_option("--mode", tr_mode,
                 "nonlatent|vnmt|dcvae|micvae|micvae_bow|dcvae_bow");
  tr->add_option("--data", tr_data, "bitext tsv")->required();
  tr->add_option("--heldout", tr_heldout, "held-out bitext tsv");
  tr->add_option("--mono", tr_mono, "monolingual text for self-training");
  tr->add_option("--config", tr_config, "json config file");
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--steps", tr_steps, "training steps");
  tr->add_option("--seed", tr_seed, "rng seed");
  tr->add_option("--warmup", tr_warmup, "lr warmup steps");
  tr->add_option("--max-tokens", tr_max_tokens, "token budget per batch");
  tr->add_option("--anneal", tr_anneal, "kl anneal schedule: linear|none");
  tr->add_option("--anneal-ramp", tr_ramp, "anneal ramp steps");
  tr->add_option("--eval-every", tr_eval_every, "metric interval");
  tr->add_flag("--self-training", tr_self, "interleave mono steps");
  tr->add_option("--lambda", tr_lambda, "softmax mixture weight");
  tr->add_option("--tau", tr_tau, "gumbel-softmax temperature");
  tr->add_option("--posterior-inputs", tr_post, "y|xy-concat");
  tr->add_flag("--force", tr_force, "allow a non-empty output directory");

  // eval
  auto* ev = app.add_subcommand("eval", "BLEU / NLL of a checkpoint");
  std::string ev_ckpt, ev_data, ev_out;
  int ev_beam = 4, ev_max_len = 32;
  bool ev_force = false;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "bitext tsv")->required();
  ev->add_option("--beam", ev_beam, "beam size (1 = greedy)");
  ev->add_option("--max-len", ev_max_len, "decode length cap");
  ev->add_option("--out", ev_out, "output directory")->required();
  ev->add_flag("--force", ev_force, "allow a non-empty output directory");

  // diagnose
  auto* dg = app.add_subcommand("diagnose", "posterior-collapse metrics");
  std::string dg_ckpt, dg_data, dg_out;
  dg->add_option("--ckpt", dg_ckpt, "checkpoint file")->required();
  dg->add_option("--data", dg_data, "bitext tsv")->required();
  dg->add_option("--out", dg_out, "csv to append the metric row to")
      ->required();

  // dump-latents
  auto* dl = app.add_subcommand("dump-latents",
                                "posterior probs for two corpora");
  std::string dl_ckpt, dl_a, dl_b, dl_la = "a", dl_lb = "b", dl_out;
  dl->add_option("--ckpt", dl_ckpt, "checkpoint file")->required();
  dl->add_option("--data-a", dl_a, "first corpus tsv")->required();
  dl->add_option("--data-b", dl_b, "second corpus tsv")->required();
  dl->add_option("--label-a", dl_la, "label for the first corpus");
  dl->add_option("--label-b", dl_lb, "label for the second corpus");
  dl->add_option("--out", dl_out, "output csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (sd->parsed())
      return cmd_synth_data(sd_modes, sd_pairs, sd_seed, sd_out, sd_force);
    if (tr->parsed())
      return cmd_train(tr_mode, tr_data, tr_heldout, tr_mono, tr_config,
                       tr_out, tr_force, tr, tr_steps, tr_seed, tr_warmup,
                       tr_max_tokens, tr_anneal, tr_ramp, tr_eval_every,
                       tr_self, tr_lambda, tr_tau, tr_post);
    if (ev->parsed())
      return cmd_eval(ev_ckpt, ev_data, ev_beam, ev_max_len, ev_out, ev_force);
    if (dg->parsed()) return cmd_diagnose(dg_ckpt, dg_data, dg_out);
    if (dl->parsed())
      return cmd_dump_latents(dl_ckpt, dl_a, dl_b, dl_la, dl_lb, dl_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
