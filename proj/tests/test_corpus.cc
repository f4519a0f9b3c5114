#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>

#include "micvae/corpus.h"

using namespace micvae;

TEST_CASE("build_vocab basic ordering and reserved tokens") {
  Vocab v = build_vocab({{"a", "a", "b"}}, 1);
  CHECK(v.size() == 6);
  CHECK(v.lookup("a") == 4);  // most frequent first
  CHECK(v.lookup("b") == 5);
  CHECK(v.token(Vocab::kPad) == "<pad>");
  CHECK(v.token(Vocab::kUnk) == "<unk>");
  CHECK(v.lookup("zzz") == Vocab::kUnk);
}

TEST_CASE("build_vocab min_count filters") {
  Vocab v = build_vocab({{"a", "a", "b"}}, 2);
  CHECK(v.size() == 5);
  CHECK(v.lookup("b") == Vocab::kUnk);
}

TEST_CASE("build_vocab tie-break is lexicographic") {
  Vocab v = build_vocab({{"c", "b", "b", "c"}}, 1);
  CHECK(v.lookup("b") == 4);
  CHECK(v.lookup("c") == 5);
}

TEST_CASE("build_vocab rejects empty corpus") {
  CHECK_THROWS_AS(build_vocab({}, 1), std::invalid_argument);
}

TEST_CASE("generator is deterministic in the seed") {
  auto a = gen_multimodal_task(50, 2, 9);
  auto b = gen_multimodal_task(50, 2, 9);
  auto c = gen_multimodal_task(50, 2, 10);
  REQUIRE(a.size() == 50);
  bool same = true, diff = false;
  for (size_t i = 0; i < 50; ++i) {
    same = same && a[i].src == b[i].src && a[i].tgt == b[i].tgt;
    diff = diff || a[i].src != c[i].src;
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("one mode means identity copy") {
  for (const auto& p : gen_multimodal_task(100, 1, 3)) {
    CHECK(p.tgt == p.src);
    CHECK(p.mode == 0);
  }
}

TEST_CASE("lengths and alphabet are in range") {
  for (const auto& p : gen_multimodal_task(500, 3, 4)) {
    CHECK(p.src.size() >= 4);
    CHECK(p.src.size() <= 10);
    CHECK(p.tgt.size() == p.src.size());
    for (const auto& t : p.src) {
      REQUIRE(t.size() == 3);
      CHECK(t[0] == 's');
    }
  }
}

TEST_CASE("two-mode targets are lexicon-a or reversed lexicon-b") {
  for (const auto& p : gen_multimodal_task(200, 2, 11)) {
    std::vector<std::string> lex_a, lex_b_rev;
    for (const auto& t : p.src) lex_a.push_back("a" + t.substr(1));
    for (auto it = p.src.rbegin(); it != p.src.rend(); ++it)
      lex_b_rev.push_back("b" + it->substr(1));
    if (p.mode == 0)
      CHECK(p.tgt == lex_a);
    else
      CHECK(p.tgt == lex_b_rev);
  }
}

TEST_CASE("mode frequencies are near uniform over 10k pairs") {
  auto pairs = gen_multimodal_task(10000, 2, 5);
  std::map<int, int> counts;
  for (const auto& p : pairs) ++counts[p.mode];
  for (const auto& [m, c] : counts) {
    double f = c / 10000.0;
    CHECK(std::abs(f - 0.5) < 0.02);
  }
}

TEST_CASE("bow targets: single two-token sentence splits evenly") {
  Vocab v = build_vocab({{"a", "b"}}, 1);
  std::vector<double> out;
  std::vector<bool> degenerate;
  make_bow_targets({{v.lookup("a"), v.lookup("b")}}, v.size(), out, degenerate);
  REQUIRE(out.size() == static_cast<size_t>(v.size()));
  CHECK(out[v.lookup("a")] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out[v.lookup("b")] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK_FALSE(degenerate[0]);
}

TEST_CASE("bow targets damp tokens shared across the batch") {
  Vocab v = build_vocab({{"a", "b", "c"}}, 1);
  std::vector<double> out;
  std::vector<bool> degenerate;
  make_bow_targets({{v.lookup("a"), v.lookup("b")},
                    {v.lookup("a"), v.lookup("c")}},
                   v.size(), out, degenerate);
  // a appears in both sentences, so pre-normalization weight 1/2 vs b's 1
  std::int64_t V = v.size();
  CHECK(out[0 * V + v.lookup("b")] > out[0 * V + v.lookup("a")]);
  CHECK(out[0 * V + v.lookup("a")] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(out[0 * V + v.lookup("b")] == doctest::Approx(2.0 / 3).epsilon(1e-12));
  double s0 = 0, s1 = 0;
  for (std::int64_t i = 0; i < V; ++i) {
    s0 += out[i];
    s1 += out[V + i];
  }
  CHECK(s0 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s1 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bow targets flag special-only rows") {
  std::vector<double> out;
  std::vector<bool> degenerate;
  make_bow_targets({{Vocab::kBos, Vocab::kEos}}, 6, out, degenerate);
  CHECK(degenerate[0]);
  for (double w : out) CHECK(w == 0.0);
}

TEST_CASE("make_batch pads, masks and round-trips") {
  Vocab v = build_vocab({{"a", "b", "c", "d", "e"}}, 1);
  std::vector<SentencePair> pairs = {{{"a", "b", "c"}, {"d", "e"}, 0},
                                     {{"a"}, {"b", "c", "d"}, 1}};
  SeqBatch b = make_batch(pairs, 100, v);
  REQUIRE(b.n == 2);
  CHECK(b.src_len == 5);  // bos + 3 + eos
  CHECK(b.tgt_len == 5);
  CHECK(b.skipped == 0);
  CHECK(b.modes == std::vector<int>{0, 1});
  // row 1's source is bos a eos pad pad
  CHECK(b.src_ids[5] == Vocab::kBos);
  CHECK(b.src_ids[6] == v.lookup("a"));
  CHECK(b.src_ids[7] == Vocab::kEos);
  CHECK(b.src_ids[8] == Vocab::kPad);
  CHECK_FALSE(b.src_mask[8]);
  CHECK_FALSE(b.src_mask[9]);
  // un-pad both rows and compare against the originals
  for (int r = 0; r < 2; ++r) {
    std::vector<std::string> rec;
    for (std::int64_t j = 1; j < b.src_len; ++j) {
      TokenId id = b.src_ids[r * b.src_len + j];
      if (id == Vocab::kEos) break;
      rec.push_back(v.token(id));
    }
    CHECK(rec == pairs[r].src);
  }
  // bow rows sum to 1
  for (int r = 0; r < 2; ++r) {
    double s = 0;
    for (std::int64_t i = 0; i < v.size(); ++i) s += b.bow_targets[r * v.size() + i];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("make_batch skips overlong sentences with a counter") {
  Vocab v = build_vocab({{"a"}}, 1);
  std::vector<SentencePair> pairs = {
      {{"a"}, {"a"}, -1},
      {std::vector<std::string>(50, "a"), {"a"}, -1}};
  SeqBatch b = make_batch(pairs, 20, v);
  CHECK(b.n == 1);
  CHECK(b.skipped == 1);
  CHECK_THROWS(make_batch({pairs[1]}, 20, v));
}

TEST_CASE("word dropout: rate 0 is identity, specials survive") {
  Rng rng(1);
  std::vector<TokenId> ids = {Vocab::kBos, 4, 5, 6, Vocab::kEos};
  CHECK(word_dropout(ids, 0.0, rng) == ids);
  for (int trial = 0; trial < 200; ++trial) {
    auto out = word_dropout(ids, 0.9, rng);
    CHECK(out[0] == Vocab::kBos);
    CHECK(out[4] == Vocab::kEos);
    for (int i = 1; i <= 3; ++i)
      CHECK((out[i] == ids[i] || out[i] == Vocab::kUnk));
  }
  CHECK_THROWS_AS(word_dropout(ids, 1.0, rng), std::invalid_argument);
  CHECK_THROWS_AS(word_dropout(ids, -0.1, rng), std::invalid_argument);
}

TEST_CASE("word dropout rate lands in the binomial band") {
  Rng rng(7);
  std::vector<TokenId> ids(10000, 5);
  auto out = word_dropout(ids, 0.4, rng);
  double unk = 0;
  for (TokenId t : out)
    if (t == Vocab::kUnk) unk += 1;
  double frac = unk / 10000.0;
  CHECK(frac > 0.38);
  CHECK(frac < 0.42);
}

TEST_CASE("bitext and mono files round-trip") {
  auto pairs = gen_multimodal_task(30, 2, 12);
  std::string p = "test_corpus_roundtrip.tsv";
  write_bitext(p, pairs, 12, 2);
  auto back = read_bitext(p);
  REQUIRE(back.size() == pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    CHECK(back[i].src == pairs[i].src);
    CHECK(back[i].tgt == pairs[i].tgt);
  }
  std::remove(p.c_str());

  std::vector<std::vector<std::string>> mono;
  for (const auto& q : pairs) mono.push_back(q.src);
  std::string m = "test_corpus_roundtrip_mono.txt";
  write_mono(m, mono, 12, 2);
  CHECK(read_mono(m) == mono);
  std::remove(m.c_str());
}

TEST_CASE("tokenize splits on whitespace") {
  CHECK(tokenize("  a  b\tc ") == std::vector<std::string>{"a", "b", "c"});
  CHECK(tokenize("").empty());
}
