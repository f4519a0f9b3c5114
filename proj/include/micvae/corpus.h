#ifndef MICVAE_CORPUS_H
#define MICVAE_CORPUS_H

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "micvae/rng.h"

namespace micvae {

using TokenId = std::int64_t;

// Joint vocabulary shared across source and target.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;

  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);  // tokens after reserved

  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  TokenId lookup(const std::string& tok) const;  // unk for unknown
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_special(TokenId id) { return id < 4; }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::pair<std::string, TokenId>> index_;  // sorted by string
};

// Frequency-descending, ties lexicographic; tokens below min_count map to unk.
Vocab build_vocab(const std::vector<std::vector<std::string>>& corpus,
                  int min_count);

struct SentencePair {
  std::vector<std::string> src;
  std::vector<std::string> tgt;
  int mode = -1;  // generator metadata; not encoded in the text itself
};

struct SeqBatch {
  std::int64_t n = 0, src_len = 0, tgt_len = 0;
  std::vector<TokenId> src_ids;   // n x src_len
  std::vector<TokenId> tgt_ids;   // n x tgt_len, bos ... eos pad*
  std::vector<bool> src_mask;     // true at non-pad
  std::vector<bool> tgt_mask;
  std::vector<double> bow_targets;  // n x |V|, rows on the simplex
  std::vector<bool> bow_degenerate;  // row had no countable tokens
  std::vector<int> modes;            // generator metadata, -1 if unknown
  int skipped = 0;                   // sentences over the length cap
};

struct MonoBatch {
  std::int64_t n = 0, src_len = 0;
  std::vector<TokenId> src_ids;
  std::vector<bool> src_mask;
  std::vector<double> bow_targets;
  std::vector<bool> bow_degenerate;
};

// Source sentences of length 4-10 over a 40-symbol alphabet; each pair
// picks one of n_modes transforms uniformly. The mode is latent: nothing
// in the source marks it.
//   n_modes == 1          -> identity copy (deterministic task)
//   mode 0 (n_modes >= 2) -> token-wise lexicon A
//   mode 1                -> reversed order + lexicon B
//   mode m >= 2           -> lexicon A shifted by m
std::vector<SentencePair> gen_multimodal_task(int n_pairs, int n_modes,
                                              std::uint64_t seed);

// Batch weights per Eq-style stop-word damping: in-sentence count over
// in-batch count, then each row renormalized to sum 1. Specials excluded.
// Rows with no countable tokens come back all-zero and flagged.
void make_bow_targets(const std::vector<std::vector<TokenId>>& sentences,
                      std::int64_t vocab_size, std::vector<double>& out,
                      std::vector<bool>& degenerate);

SeqBatch make_batch(const std::vector<SentencePair>& pairs, int max_tokens,
                    const Vocab& vocab);
MonoBatch make_mono_batch(const std::vector<std::vector<std::string>>& sents,
                          int max_tokens, const Vocab& vocab);

// Decoder-input word dropout: non-special tokens become unk with the
// given rate. Labels are left alone by the caller.
std::vector<TokenId> word_dropout(const std::vector<TokenId>& ids, double rate,
                                  Rng& rng);

// --- corpus files: one sentence per line, bitext tab-separated, an
// optional leading "# seed=<n> modes=<k>" header comment ---
std::vector<std::string> tokenize(const std::string& line);
void write_bitext(const std::string& path,
                  const std::vector<SentencePair>& pairs, std::uint64_t seed,
                  int modes);
std::vector<SentencePair> read_bitext(const std::string& path);
void write_mono(const std::string& path,
                const std::vector<std::vector<std::string>>& sents,
                std::uint64_t seed, int modes);
std::vector<std::vector<std::string>> read_mono(const std::string& path);

}  // namespace micvae

#endif  // MICVAE_CORPUS_H
