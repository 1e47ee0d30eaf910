// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sicsf/tokenizer.hpp"
#include "support/test_util.hpp"

using namespace sicsf;

TEST_CASE("single-character corpus") {
  std::vector<std::string> corpus{"a"};
  auto v = Vocab::train(corpus, 1);
  CHECK(v.piece_count() == 1);
  CHECK(v.size() == 5);
  CHECK(v.piece(kNumSpecials) == "a");
  CHECK(v.encode("a", true) == std::vector<int>{kBosId, kNumSpecials, kEosId});
}

TEST_CASE("first merge follows the hand count") {
  // Pairs in "abab abab": ab x4, ba x2, "b " x1, " a" x1.
  std::vector<std::string> corpus{"abab abab"};
  auto v = Vocab::train(corpus, 4);
  REQUIRE(v.merges().size() == 1);
  CHECK(v.merges()[0] == std::pair<std::string, std::string>{"a", "b"});
}

TEST_CASE("ties break by lexicographic pair order") {
  std::vector<std::string> corpus{"cd", "ab"};
  auto v = Vocab::train(corpus, 5);
  CHECK(v.merges()[0] == std::pair<std::string, std::string>{"a", "b"});
}

TEST_CASE("vocab size below the alphabet is rejected") {
  std::vector<std::string> corpus{"abc"};
  try {
    Vocab::train(corpus, 2);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("at least 3") != std::string::npos);
  }
  CHECK_THROWS_AS(Vocab::train(corpus, 10), std::invalid_argument);
}

TEST_CASE("encode and decode") {
  std::vector<std::string> corpus{"hello world", "hello there", "{'a': 'b'}"};
  auto v = Vocab::train(corpus, 20);
  CHECK(v.piece_count() == 20);
  CHECK(v.encode("", true) == std::vector<int>{kBosId, kEosId});
  for (const auto& s : corpus) {
    auto ids = v.encode(s, true);
    CHECK(std::find(ids.begin(), ids.end(), kUnkId) == ids.end());
    CHECK(v.decode(ids) == s);
  }
  auto unk = v.encode("hez", false);
  CHECK(unk.back() == kUnkId);
  std::vector<int> stop{kBosId, v.encode("h", false)[0], kEosId, v.encode("e", false)[0]};
  CHECK(v.decode(stop) == "h");
  std::vector<int> bad{999};
  CHECK_THROWS_AS(v.decode(bad), std::out_of_range);
}

TEST_CASE("specials are never produced by merges") {
  std::vector<std::string> corpus{"<s></s><pad><unk>", "<s>"};
  auto v = Vocab::train(corpus, 20);
  for (const auto& s : corpus) {
    for (int id : v.encode(s, false)) CHECK(id >= kNumSpecials);
  }
}

TEST_CASE("vocab file round trip and determinism") {
  std::vector<std::string> corpus{"tab\there", "new\nline", "back\\slash", "abcabcabc"};
  auto v = Vocab::train(corpus, 25);
  auto again = Vocab::train(corpus, 25);
  CHECK(v.to_text() == again.to_text());
  auto dir = sicsf::testing::temp_dir("vocab");
  v.save(dir / "v.txt");
  auto loaded = Vocab::load(dir / "v.txt");
  CHECK(loaded == v);
  CHECK(loaded.to_text() == v.to_text());
  for (const auto& s : corpus) CHECK(loaded.encode(s, true) == v.encode(s, true));
  CHECK_THROWS_AS(Vocab::from_text("0\t<pad>\n1\t<s>\n2\t</s>\n3\t<unk>\n#MERGES\nq\tz\n"), DataError);
}

TEST_CASE("merges stay inside words until every word is one piece") {
  std::vector<std::string> corpus{"ab ab ab", "ba"};
  // Alphabet {' ', 'a', 'b'}; words "ab", " ab", "ba".
  auto words_only = Vocab::train(corpus, 5);
  for (const auto& [l, r] : words_only.merges()) {
    CHECK((l + r == "ab" || l + r == " ab" || l + r == "ba"));
  }
  // Beyond that, merges join whole words and still round-trip.
  auto wide = Vocab::train(corpus, 8);
  const auto text = wide.to_text();
  CHECK(text.find("#CROSS") != std::string::npos);
  for (const auto& s : corpus) CHECK(wide.decode(wide.encode(s, true)) == s);
  CHECK(wide.encode("ab ab ab", false).size() == 1);
  const auto reloaded = Vocab::from_text(text);
  CHECK(reloaded == wide);
  CHECK(reloaded.encode("ab ab ab", false) == wide.encode("ab ab ab", false));
  CHECK_THROWS_AS(Vocab::train(corpus, 50), std::invalid_argument);
}

TEST_CASE("unseen text still round-trips") {
  std::vector<std::string> corpus{"{'scenario': 'alarm', 'action': 'set', 'entities': []}"};
  auto v = Vocab::train(corpus, 30);
  const std::string unseen = "{'action': 'alarm',   'scenario': 'set'}";
  CHECK(v.decode(v.encode(unseen, true)) == unseen);
}
