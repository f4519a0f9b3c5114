#ifndef MICVAE_RNG_H
#define MICVAE_RNG_H

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace micvae {

// Deterministic RNG wrapper. We draw from the raw engine and map to
// doubles ourselves so sequences do not depend on libstdc++'s
// distribution internals; engine state serializes to a string for
// checkpointing.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform() {
    // 53-bit mantissa in [0, 1)
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // open interval (0, 1), safe inside log()
  double uniform_open() {
    double u;
    do {
      u = uniform();
    } while (u <= 0.0);
    return u;
  }

  double normal() {
    // Box-Muller, one value per call pair; stateless across checkpoints
    double u1 = uniform_open();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double gumbel() { return -std::log(-std::log(uniform_open())); }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) { return engine_() % n; }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace micvae

#endif  // MICVAE_RNG_H
