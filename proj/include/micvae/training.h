#ifndef MICVAE_TRAINING_H
#define MICVAE_TRAINING_H

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "micvae/corpus.h"
#include "micvae/diagnostics.h"
#include "micvae/model.h"
#include "micvae/objectives.h"

namespace micvae {

enum class TrainMode { nonlatent, vnmt, dcvae, micvae, micvae_bow, dcvae_bow };
TrainMode train_mode_from_string(const std::string& s);
std::string to_string(TrainMode m);
bool mode_has_bow(TrainMode m);

struct TrainConfig {
  TrainMode mode = TrainMode::micvae_bow;
  std::int64_t steps = 2000;
  std::int64_t warmup_steps = 400;
  double base_lr = 1.0;  // scales d^-0.5 * min(s^-0.5, s * warmup^-1.5)
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.001;
  int max_tokens = 1024;
  bool self_training = false;
  std::string anneal = "linear";  // linear | none (dcvae/vnmt KL weight)
  std::int64_t anneal_ramp = 1000;
  std::int64_t eval_every = 100;
  int min_count = 1;
  std::uint64_t seed = 1;
  ModelConfig model;

  std::string to_json() const;
  static TrainConfig from_json(const std::string& s);
  // effective model config for the mode (latent kind, lambda)
  ModelConfig effective_model(std::int64_t vocab_size) const;
};

enum class StepKind { supervised, bow, mono };

// Alg-1 parameter sets per step kind. supervised additionally reaches
// the BoW head through the softmax mixture when lambda > 0.
std::set<ParamGroup> gradient_mask(StepKind kind);

struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;  // per-tensor update count for bias correction
};

class AdamOptimizer {
 public:
  AdamOptimizer(Params& params, const TrainConfig& cfg);
  // Applies one update at `step` (1-based) to parameters whose group is
  // in `mask` and that carry a gradient. NaN gradients skip the whole
  // step and bump the counter.
  void step(std::int64_t step, const std::set<ParamGroup>& mask);
  double lr_at(std::int64_t step) const;
  int nan_skips() const { return nan_skips_; }

  std::map<std::string, AdamState>& state() { return state_; }

 private:
  Params& params_;
  TrainConfig cfg_;
  std::map<std::string, AdamState> state_;
  int nan_skips_ = 0;
};

struct TrainResult {
  std::vector<CollapseMetrics> metrics;
  std::vector<double> bow_losses;   // per eval point, supervised-side
  std::vector<double> mono_losses;  // per mono step
  bool diverged = false;
  std::int64_t final_step = 0;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, const std::vector<SentencePair>& bitext,
          const std::vector<SentencePair>& heldout,
          std::vector<std::vector<std::string>> mono = {});

  // Full run; optionally appends metric rows as CSV to metrics_path.
  TrainResult train(const std::string& metrics_path = "");
  // Single outer iteration (supervised [+bow] [+mono]).
  LossReport train_step();

  Model& model() { return *model_; }
  const Vocab& vocab() const { return vocab_; }
  AdamOptimizer& optimizer() { return *opt_; }
  Rng& rng() { return rng_; }
  std::int64_t step() const { return step_; }

  void save_checkpoint(const std::string& path) const;
  static Trainer load_checkpoint(const std::string& path,
                                 const std::vector<SentencePair>& bitext,
                                 const std::vector<SentencePair>& heldout,
                                 std::vector<std::vector<std::string>> mono = {});

  CollapseMetrics eval_metrics();

 private:
  SeqBatch next_batch();
  MonoBatch next_mono_batch();
  LossResult supervised_loss(const SeqBatch& b);
  void bow_step(const SeqBatch& b, LossReport& report);
  void mono_step(LossReport& report);

  TrainConfig cfg_;
  Vocab vocab_;
  std::vector<SentencePair> bitext_;
  std::vector<SentencePair> heldout_;
  std::vector<std::vector<std::string>> mono_;
  std::optional<Model> model_storage_;
  Model* model_ = nullptr;
  std::optional<AdamOptimizer> opt_storage_;
  AdamOptimizer* opt_ = nullptr;
  Rng rng_;
  std::int64_t step_ = 0;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
  size_t mono_cursor_ = 0;
  double initial_nll_ = -1.0;
  int divergence_run_ = 0;
  std::vector<double> mono_losses_;

  friend class TrainerTestHook;
};

// Binary, versioned checkpoint contents; round trips bit-exactly.
struct CheckpointFile {
  TrainConfig cfg;
  std::vector<std::string> vocab_tokens;  // full list, reserved first
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::map<std::string, AdamState> adam;
  std::int64_t step = 0;
  std::string rng_state;
  std::vector<std::uint64_t> order;
  std::uint64_t cursor = 0;
  std::uint64_t mono_cursor = 0;
  double initial_nll = -1.0;
  std::int32_t divergence_run = 0;
};

CheckpointFile read_checkpoint(const std::string& path);
void write_checkpoint(const std::string& path, const CheckpointFile& ck);

// Rebuild a model (and its vocab) from a checkpoint, for evaluation.
struct LoadedModel {
  TrainConfig cfg;
  Vocab vocab;
  std::optional<Model> model;
};
LoadedModel load_model(const std::string& ckpt_path);

// Greedy/beam translations of a corpus's source sides.
std::vector<std::vector<std::string>> translate_corpus(
    const Model& model, const Vocab& vocab,
    const std::vector<SentencePair>& pairs, int beam, int max_len, Rng& rng);

}  // namespace micvae

#endif  // MICVAE_TRAINING_H
