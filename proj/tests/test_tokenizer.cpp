// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <set>

#include "cptlab/error.hpp"
#include "cptlab/text.hpp"
#include "cptlab/tokenizer.hpp"
#include "support.hpp"

using namespace cptlab;

namespace {

std::string sample(const char* name) { return read_file(test::data_dir() / "sample" / name); }

// Random string of code points drawn from ASCII, Latin-1 letters including
// the umlauts and eszett, other BMP ranges and astral planes.
std::string random_unicode(Rng& rng) {
  static const char32_t specials[] = {U'ä', U'ö', U'ü', U'ß', U'Ä', U'Ö', U'Ü', U'ẞ', U' ', U'\n', U'\t'};
  std::u32string cps;
  const auto len = rng.below(24);
  for (std::uint64_t i = 0; i < len; ++i) {
    switch (rng.below(5)) {
      case 0: cps.push_back(specials[rng.below(std::size(specials))]); break;
      case 1: cps.push_back(static_cast<char32_t>(0x20 + rng.below(0x5f))); break;
      case 2: cps.push_back(static_cast<char32_t>(0xa0 + rng.below(0x700))); break;
      case 3: {
        char32_t c = static_cast<char32_t>(0x800 + rng.below(0xf000));
        if (c >= 0xd800 && c <= 0xdfff) c = U'ß';
        cps.push_back(c);
        break;
      }
      default: cps.push_back(static_cast<char32_t>(0x10000 + rng.below(0x100000))); break;
    }
  }
  std::string out;
  for (char32_t c : cps) {
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
      out.push_back(static_cast<char>(0xc0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
    } else if (c < 0x10000) {
      out.push_back(static_cast<char>(0xe0 | (c >> 12)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
    } else {
      out.push_back(static_cast<char>(0xf0 | (c >> 18)));
      out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3f)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3f)));
    }
  }
  return out;
}

// Pair counts by direct enumeration over whitespace-free chunks.
std::map<std::pair<std::string, std::string>, int> count_pairs(const std::vector<std::vector<std::string>>& words) {
  std::map<std::pair<std::string, std::string>, int> counts;
  for (const auto& w : words)
    for (std::size_t i = 0; i + 1 < w.size(); ++i) ++counts[{w[i], w[i + 1]}];
  return counts;
}

}  // namespace

TEST_CASE("byte vocabulary") {
  Vocabulary v;
  CHECK(v.size() == 256);
  CHECK(v.base_size() == 256);
  for (int c = 0; c < 256; ++c) CHECK(v.token_bytes(static_cast<TokenId>(c)) == std::string(1, static_cast<char>(c)));
  CHECK(v.encode("").empty());
  CHECK(bpe_train("abc", 0).size() == 256);
  CHECK_THROWS_AS(bpe_train("abc", -1), ConfigError);
  CHECK_THROWS_AS(bpe_train("", 3), DataError);
}

TEST_CASE("first merge follows pair counts") {
  const auto v = bpe_train("aaab aaab", 1);
  REQUIRE(v.merges().size() == 1);
  CHECK(v.merges()[0] == Vocabulary::Merge{'a', 'a'});
  const auto ids = v.encode("aaab");
  CHECK(ids == std::vector<TokenId>{256, 'a', 'b'});
  CHECK(v.token_bytes(256) == "aa");
}

TEST_CASE("merge sequence matches a brute-force trainer") {
  const std::string corpus = "low lower lowest newer newest wide wider widest\nlow new wide";
  const auto v = bpe_train(corpus, 12);
  std::vector<std::vector<std::string>> words;
  for (auto w : split_words(corpus)) {
    std::vector<std::string> pieces;
    for (char c : w) pieces.emplace_back(1, c);
    words.push_back(pieces);
  }
  for (const auto& [left, right] : v.merges()) {
    const auto counts = count_pairs(words);
    int best = 0;
    std::pair<std::string, std::string> chosen;
    for (const auto& [pair, n] : counts) {
      if (n > best) {
        best = n;
        chosen = pair;
      }
    }
    REQUIRE(best >= 2);
    CHECK(v.token_bytes(left) == chosen.first);
    CHECK(v.token_bytes(right) == chosen.second);
    for (auto& w : words) {
      std::vector<std::string> merged;
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (i + 1 < w.size() && w[i] == chosen.first && w[i + 1] == chosen.second) {
          merged.push_back(w[i] + w[i + 1]);
          ++i;
        } else {
          merged.push_back(w[i]);
        }
      }
      w = merged;
    }
  }
}

TEST_CASE("training is deterministic") {
  const auto text = sample("de.txt");
  CHECK(bpe_train(text, 200).merges() == bpe_train(text, 200).merges());
}

TEST_CASE("round trips") {
  const auto v = bpe_train(sample("de.txt") + sample("bar.txt"), 300);
  const std::string s = "Grüß Gott, ä ö ü ß";
  CHECK(v.decode(v.encode(s)) == s);
  CHECK(v.encode(s).size() < s.size());
  Rng rng(17);
  for (int i = 0; i < 2000; ++i) {
    const auto text = random_unicode(rng);
    REQUIRE(v.decode(v.encode(text)) == text);
  }
  const std::string invalid = "\xff\xfe ok \xc3";
  CHECK(v.decode(v.encode(invalid)) == invalid);
}

TEST_CASE("no token crosses whitespace") {
  const auto v = bpe_train(sample("en.txt"), 400);
  for (TokenId id = 0; id < v.size(); ++id) {
    const auto& bytes = v.token_bytes(id);
    if (bytes.size() < 2) continue;
    bool has_space = false;
    bool has_other = false;
    for (unsigned char c : bytes) (is_space_byte(c) ? has_space : has_other) = true;
    CHECK_FALSE((has_space && has_other));
  }
}

TEST_CASE("extension counts") {
  CHECK(extension_merge_count(128256, 0.1, 256) == 12800);
  CHECK(extension_merge_count(128256, 0.2, 256) == 25600);
  CHECK(extension_merge_count(128256, 0.3, 256) == 38400);
  CHECK(extension_merge_count(128256, 0.1) == 12825);
  CHECK(extension_merge_count(300, 0.1) == 30);
  CHECK(extension_merge_count(300, 0.003) == 0);
  CHECK_THROWS_AS(extension_merge_count(300, 0.0), ConfigError);
  CHECK_THROWS_AS(extension_merge_count(300, 1.5), ConfigError);
}

TEST_CASE("extension adds novel tokens after the base") {
  const test::SyntheticLanguage first('a', 'm', 1);
  const test::SyntheticLanguage second('n', 'z', 2);
  const auto base = bpe_train(first.sentences(200, 3), 44);
  REQUIRE(base.size() == 300);
  const auto ext = extend_vocab(base, second.sentences(400, 4), 0.1);
  CHECK(ext.stats.requested == 30);
  CHECK(ext.stats.trained == 30);
  CHECK(ext.stats.added == 30);
  CHECK(ext.vocab.size() == 330);
  CHECK(ext.vocab.base_size() == 300);
  for (TokenId id = 0; id < 300; ++id) CHECK(ext.vocab.token_bytes(id) == base.token_bytes(id));
  std::set<std::string> base_tokens;
  for (TokenId id = 0; id < 300; ++id) base_tokens.insert(base.token_bytes(id));
  for (TokenId id = 300; id < 330; ++id) CHECK_FALSE(base_tokens.contains(ext.vocab.token_bytes(id)));

  const auto none = extend_vocab(base, second.sentences(10, 5), 0.003);
  CHECK(none.vocab.merges() == base.merges());
  CHECK(none.vocab.size() == base.size());
  CHECK_THROWS_AS(extend_vocab(base, "", 0.1), DataError);
}

TEST_CASE("duplicate results are kept as rules without new ids") {
  // Under these merges "abc" segments as [a, bc], while "abc" already exists
  // through ab + c.
  Vocabulary base;
  const auto bc = base.add_merge('b', 'c');
  const auto ab = base.add_merge('a', 'b');
  const auto abc = base.add_merge(ab, 'c');
  base.set_base_size(base.size());
  CHECK(base.encode("abc") == std::vector<TokenId>{'a', bc});
  const auto ext = extend_vocab(base, "abc abc abc", 1.0);
  CHECK(ext.stats.duplicates >= 1);
  CHECK(ext.stats.added == ext.stats.trained - ext.stats.duplicates);
  CHECK(ext.vocab.size() == base.size() + ext.stats.added);
  CHECK(ext.vocab.encode("abc") == std::vector<TokenId>{abc});
}

TEST_CASE("prefix stability") {
  const auto base = bpe_train(sample("en.txt") + sample("de.txt"), 500);
  const auto ext = extend_vocab(base, sample("bar.txt"), 0.3);
  for (const auto& line : read_lines(test::data_dir() / "sample" / "bar.txt")) {
    CHECK(ext.vocab.encode(line, base.merges().size()) == base.encode(line));
  }
}

TEST_CASE("fertility hand cases") {
  Vocabulary bytes;
  CHECK(fertility(bytes, "ab ab ab").fertility == 2.0);
  Vocabulary merged;
  merged.add_merge('a', 'b');
  CHECK(fertility(merged, "ab ab ab").fertility == 1.0);
  const auto r = fertility(merged, "ab  abc\n");
  CHECK(r.word_count == 2);
  CHECK(r.token_count == 3);
  CHECK_THROWS_AS(fertility(merged, "  \n "), DataError);
}

TEST_CASE("fertility never rises with a larger extension") {
  const auto base = bpe_train(sample("en.txt") + sample("de.txt"), 1000);
  const auto corpus = sample("de.txt") + sample("bar.txt");
  double previous = fertility(base, corpus).fertility;
  for (double f : {0.1, 0.2, 0.3}) {
    const double now = fertility(extend_vocab(base, corpus, f, 256).vocab, corpus).fertility;
    CHECK(now <= previous);
    CHECK(now >= 1.0);
    previous = now;
  }
}

TEST_CASE("vocabulary files round trip bit-exactly") {
  const auto base = bpe_train(sample("bar.txt"), 150);
  const auto text = serialize_vocabulary(base);
  const auto back = parse_vocabulary(text);
  CHECK(back.merges() == base.merges());
  CHECK(back.base_size() == base.base_size());
  CHECK(back.fingerprint() == base.fingerprint());
  CHECK(serialize_vocabulary(back) == text);

  auto tampered = text;
  tampered[tampered.size() - 2] = tampered[tampered.size() - 2] == 'a' ? 'b' : 'a';
  CHECK_THROWS_AS(parse_vocabulary(tampered), FormatError);
  CHECK_THROWS_AS(parse_vocabulary("nonsense\n"), FormatError);

  const auto dir = test::scratch_dir("vocab");
  save_vocabulary(base, dir / "v.txt");
  CHECK(load_vocabulary(dir / "v.txt").merges() == base.merges());
}

TEST_CASE("fingerprint tracks merges") {
  const auto a = bpe_train(sample("bar.txt"), 50);
  const auto b = bpe_train(sample("bar.txt"), 51);
  CHECK(a.fingerprint() != b.fingerprint());
  CHECK(a.fingerprint().size() == 16);
}

TEST_CASE("constituents of new tokens") {
  const auto base = bpe_train(sample("en.txt") + sample("de.txt"), 300);
  const auto ext = extend_vocab(base, sample("bar.txt"), 0.2);
  const auto seeds = new_token_constituents(base, ext.vocab);
  CHECK(seeds.size() == ext.vocab.size() - base.size());
  TokenId expected = static_cast<TokenId>(base.size());
  for (const auto& [id, parts] : seeds) {
    CHECK(id == expected++);
    CHECK(!parts.empty());
    CHECK(base.decode(parts) == ext.vocab.token_bytes(id));
    for (auto p : parts) CHECK(p < base.size());
  }
  const auto other = bpe_train(sample("bar.txt"), 300);
  CHECK_THROWS_AS(new_token_constituents(base, other), PlanError);
}
