#include "micvae/bleu.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace micvae {

namespace {

std::map<std::vector<std::string>, int> ngram_counts(
    const std::vector<std::string>& sent, int n) {
  std::map<std::vector<std::string>, int> counts;
  if (static_cast<int>(sent.size()) < n) return counts;
  for (size_t i = 0; i + n <= sent.size(); ++i)
    ++counts[std::vector<std::string>(sent.begin() + i, sent.begin() + i + n)];
  return counts;
}

}  // namespace

double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.empty())
    throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("corpus_bleu: hypothesis/reference count "
                                "mismatch");
  constexpr int kMaxN = 4;
  long long matched[kMaxN] = {0, 0, 0, 0};
  long long total[kMaxN] = {0, 0, 0, 0};
  long long hyp_len = 0, ref_len = 0;
  for (size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    hyp_len += static_cast<long long>(hyp.size());
    ref_len += static_cast<long long>(ref.size());
    for (int n = 1; n <= kMaxN; ++n) {
      auto hc = ngram_counts(hyp, n);
      auto rc = ngram_counts(ref, n);
      for (const auto& [gram, c] : hc) {
        total[n - 1] += c;
        auto it = rc.find(gram);
        if (it != rc.end()) matched[n - 1] += std::min(c, it->second);
      }
    }
  }
  double log_prec = 0.0;
  for (int n = 0; n < kMaxN; ++n) {
    if (matched[n] == 0 || total[n] == 0) return 0.0;
    log_prec += std::log(static_cast<double>(matched[n]) / total[n]);
  }
  double bp = 1.0;
  if (hyp_len < ref_len)
    bp = std::exp(1.0 - static_cast<double>(ref_len) / hyp_len);
  return 100.0 * bp * std::exp(log_prec / kMaxN);
}

}  // namespace micvae
