#include "micvae/corpus.h"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace micvae {

namespace {
const char* kReserved[4] = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocab::Vocab(std::vector<std::string> tokens) {
  tokens_.assign(kReserved, kReserved + 4);
  for (auto& t : tokens) tokens_.push_back(std::move(t));
  for (TokenId i = 0; i < size(); ++i) index_.emplace_back(tokens_[i], i);
  std::sort(index_.begin(), index_.end());
}

TokenId Vocab::lookup(const std::string& tok) const {
  auto it = std::lower_bound(index_.begin(), index_.end(),
                             std::make_pair(tok, TokenId{0}));
  if (it != index_.end() && it->first == tok) return it->second;
  return kUnk;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || id >= size())
    throw std::out_of_range("token id " + std::to_string(id) +
                            " outside vocab of size " + std::to_string(size()));
  return tokens_[id];
}

Vocab build_vocab(const std::vector<std::vector<std::string>>& corpus,
                  int min_count) {
  if (corpus.empty())
    throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, std::int64_t> counts;
  for (const auto& sent : corpus)
    for (const auto& tok : sent) ++counts[tok];
  std::vector<std::pair<std::string, std::int64_t>> items(counts.begin(),
                                                          counts.end());
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> kept;
  for (auto& [tok, c] : items)
    if (c >= min_count) kept.push_back(tok);
  return Vocab(std::move(kept));
}

namespace {

constexpr int kAlphabet = 40;

std::string src_sym(int i) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "s%02d", i);
  return buf;
}

std::string lex_sym(char lex, int i) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%c%02d", lex, i);
  return buf;
}

int sym_index(const std::string& s) { return std::stoi(s.substr(1)); }

std::vector<std::string> apply_mode(const std::vector<std::string>& src,
                                    int mode, int n_modes) {
  std::vector<std::string> out;
  if (n_modes == 1) return src;  // deterministic copy task
  if (mode == 0) {
    for (const auto& t : src) out.push_back(lex_sym('a', sym_index(t)));
  } else if (mode == 1) {
    for (auto it = src.rbegin(); it != src.rend(); ++it)
      out.push_back(lex_sym('b', sym_index(*it)));
  } else {
    for (const auto& t : src)
      out.push_back(lex_sym('a', (sym_index(t) + mode) % kAlphabet));
  }
  return out;
}

}  // namespace

std::vector<SentencePair> gen_multimodal_task(int n_pairs, int n_modes,
                                              std::uint64_t seed) {
  if (n_modes < 1)
    throw std::invalid_argument("gen_multimodal_task: n_modes must be >= 1");
  if (n_pairs < 1)
    throw std::invalid_argument("gen_multimodal_task: n_pairs must be >= 1");
  Rng rng(seed);
  std::vector<SentencePair> pairs;
  pairs.reserve(n_pairs);
  for (int p = 0; p < n_pairs; ++p) {
    int len = 4 + static_cast<int>(rng.below(7));  // 4..10
    SentencePair sp;
    for (int i = 0; i < len; ++i)
      sp.src.push_back(src_sym(static_cast<int>(rng.below(kAlphabet))));
    sp.mode = static_cast<int>(rng.below(n_modes));
    sp.tgt = apply_mode(sp.src, sp.mode, n_modes);
    pairs.push_back(std::move(sp));
  }
  return pairs;
}

void make_bow_targets(const std::vector<std::vector<TokenId>>& sentences,
                      std::int64_t vocab_size, std::vector<double>& out,
                      std::vector<bool>& degenerate) {
  std::int64_t n = static_cast<std::int64_t>(sentences.size());
  if (n == 0) throw std::invalid_argument("make_bow_targets: empty batch");
  std::vector<double> batch_counts(vocab_size, 0.0);
  for (const auto& s : sentences)
    for (TokenId id : s)
      if (!Vocab::is_special(id)) batch_counts[id] += 1.0;
  out.assign(n * vocab_size, 0.0);
  degenerate.assign(n, false);
  for (std::int64_t r = 0; r < n; ++r) {
    double* row = out.data() + r * vocab_size;
    for (TokenId id : sentences[r])
      if (!Vocab::is_special(id)) row[id] += 1.0;
    double total = 0.0;
    for (std::int64_t i = 0; i < vocab_size; ++i) {
      if (row[i] > 0.0) row[i] /= batch_counts[i];
      total += row[i];
    }
    if (total <= 0.0) {
      degenerate[r] = true;
      continue;
    }
    for (std::int64_t i = 0; i < vocab_size; ++i) row[i] /= total;
  }
}

namespace {

std::vector<TokenId> encode(const std::vector<std::string>& toks,
                            const Vocab& vocab) {
  std::vector<TokenId> ids;
  ids.push_back(Vocab::kBos);
  for (const auto& t : toks) ids.push_back(vocab.lookup(t));
  ids.push_back(Vocab::kEos);
  return ids;
}

}  // namespace

SeqBatch make_batch(const std::vector<SentencePair>& pairs, int max_tokens,
                    const Vocab& vocab) {
  SeqBatch b;
  std::vector<std::vector<TokenId>> src, tgt;
  for (const auto& p : pairs) {
    auto s = encode(p.src, vocab);
    auto t = encode(p.tgt, vocab);
    if (static_cast<int>(s.size()) > max_tokens ||
        static_cast<int>(t.size()) > max_tokens) {
      ++b.skipped;
      continue;
    }
    src.push_back(std::move(s));
    tgt.push_back(std::move(t));
    b.modes.push_back(p.mode);
  }
  if (src.empty())
    throw std::invalid_argument("make_batch: no sentence fits max_tokens");
  b.n = static_cast<std::int64_t>(src.size());
  for (const auto& s : src)
    b.src_len = std::max(b.src_len, static_cast<std::int64_t>(s.size()));
  for (const auto& t : tgt)
    b.tgt_len = std::max(b.tgt_len, static_cast<std::int64_t>(t.size()));
  b.src_ids.assign(b.n * b.src_len, Vocab::kPad);
  b.tgt_ids.assign(b.n * b.tgt_len, Vocab::kPad);
  b.src_mask.assign(b.n * b.src_len, false);
  b.tgt_mask.assign(b.n * b.tgt_len, false);
  for (std::int64_t r = 0; r < b.n; ++r) {
    for (size_t j = 0; j < src[r].size(); ++j) {
      b.src_ids[r * b.src_len + j] = src[r][j];
      b.src_mask[r * b.src_len + j] = true;
    }
    for (size_t j = 0; j < tgt[r].size(); ++j) {
      b.tgt_ids[r * b.tgt_len + j] = tgt[r][j];
      b.tgt_mask[r * b.tgt_len + j] = true;
    }
  }
  make_bow_targets(tgt, vocab.size(), b.bow_targets, b.bow_degenerate);
  return b;
}

MonoBatch make_mono_batch(const std::vector<std::vector<std::string>>& sents,
                          int max_tokens, const Vocab& vocab) {
  MonoBatch b;
  std::vector<std::vector<TokenId>> src;
  for (const auto& s : sents) {
    auto ids = encode(s, vocab);
    if (static_cast<int>(ids.size()) > max_tokens) continue;
    src.push_back(std::move(ids));
  }
  if (src.empty())
    throw std::invalid_argument("make_mono_batch: no sentence fits max_tokens");
  b.n = static_cast<std::int64_t>(src.size());
  for (const auto& s : src)
    b.src_len = std::max(b.src_len, static_cast<std::int64_t>(s.size()));
  b.src_ids.assign(b.n * b.src_len, Vocab::kPad);
  b.src_mask.assign(b.n * b.src_len, false);
  for (std::int64_t r = 0; r < b.n; ++r)
    for (size_t j = 0; j < src[r].size(); ++j) {
      b.src_ids[r * b.src_len + j] = src[r][j];
      b.src_mask[r * b.src_len + j] = true;
    }
  make_bow_targets(src, vocab.size(), b.bow_targets, b.bow_degenerate);
  return b;
}

std::vector<TokenId> word_dropout(const std::vector<TokenId>& ids, double rate,
                                  Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("word_dropout rate must be in [0,1)");
  std::vector<TokenId> out = ids;
  if (rate == 0.0) return out;
  for (auto& id : out)
    if (!Vocab::is_special(id) && rng.uniform() < rate) id = Vocab::kUnk;
  return out;
}

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> toks;
  std::istringstream is(line);
  std::string t;
  while (is >> t) toks.push_back(std::move(t));
  return toks;
}

void write_bitext(const std::string& path,
                  const std::vector<SentencePair>& pairs, std::uint64_t seed,
                  int modes) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "# seed=" << seed << " modes=" << modes << "\n";
  for (const auto& p : pairs) {
    for (size_t i = 0; i < p.src.size(); ++i) os << (i ? " " : "") << p.src[i];
    os << "\t";
    for (size_t i = 0; i < p.tgt.size(); ++i) os << (i ? " " : "") << p.tgt[i];
    os << "\n";
  }
}

std::vector<SentencePair> read_bitext(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::vector<SentencePair> pairs;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("bitext line without tab in " + path);
    SentencePair p;
    p.src = tokenize(line.substr(0, tab));
    p.tgt = tokenize(line.substr(tab + 1));
    if (p.src.empty() || p.tgt.empty())
      throw std::runtime_error("empty side in bitext line of " + path);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void write_mono(const std::string& path,
                const std::vector<std::vector<std::string>>& sents,
                std::uint64_t seed, int modes) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << "# seed=" << seed << " modes=" << modes << "\n";
  for (const auto& s : sents) {
    for (size_t i = 0; i < s.size(); ++i) os << (i ? " " : "") << s[i];
    os << "\n";
  }
}

std::vector<std::vector<std::string>> read_mono(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::vector<std::vector<std::string>> sents;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    sents.push_back(tokenize(line));
  }
  return sents;
}

}  // namespace micvae
