#ifndef MICVAE_BLEU_H
#define MICVAE_BLEU_H

#include <string>
#include <vector>

namespace micvae {

// Corpus-level BLEU (modified 1-4 gram precision, brevity penalty,
// no smoothing), in [0, 100].
double corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                   const std::vector<std::vector<std::string>>& references);

}  // namespace micvae

#endif  // MICVAE_BLEU_H
