#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "cjlm/corpus.hpp"
#include "cjlm/random.hpp"
#include "oracles.hpp"

using namespace cjlm;

namespace {

std::vector<std::vector<std::string>> sentences(std::initializer_list<const char*> lines) {
  std::vector<std::vector<std::string>> out;
  for (const char* l : lines) out.push_back(split_tokens(l));
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cjlm_test_corpus";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_file(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("vocabulary keeps reserved ids and every token that fits") {
  auto v = build_vocabulary(sentences({"a a b"}), 20000);
  CHECK(v.size() == 6);
  CHECK(v.id("<pad>") == Vocabulary::kPad);
  CHECK(v.id("<unk>") == Vocabulary::kUnk);
  CHECK(v.id("<s>") == Vocabulary::kBos);
  CHECK(v.id("</s>") == Vocabulary::kEos);
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
}

TEST_CASE("vocabulary limit of 20000 over 25000 distinct tokens") {
  std::vector<std::vector<std::string>> corpus(1);
  for (int i = 0; i < 25000; ++i) corpus[0].push_back("w" + std::to_string(i));
  CHECK(build_vocabulary(corpus, 20000).size() == 20004);
}

TEST_CASE("vocabulary cutoff ties go to the first seen token") {
  auto v = build_vocabulary(sentences({"a b c", "a b", "b a"}), 2);
  CHECK(v.size() == 6);
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));
  CHECK_FALSE(v.contains("c"));

  // Same counts, b seen first.
  auto w = build_vocabulary(sentences({"b a c", "a b", "b a"}), 1);
  CHECK(w.contains("b"));
  CHECK_FALSE(w.contains("a"));
}

TEST_CASE("vocabulary frequency order matches a brute-force count") {
  Rng rng(11);
  std::vector<std::vector<std::string>> corpus(20);
  std::map<std::string, int> counts;
  std::vector<std::string> first_seen;
  for (auto& s : corpus) {
    for (int i = 0; i < 15; ++i) {
      std::string t = "t" + std::to_string(rng.index(40));
      if (counts[t]++ == 0) first_seen.push_back(t);
      s.push_back(t);
    }
  }
  std::vector<std::string> expected = first_seen;
  std::stable_sort(expected.begin(), expected.end(),
                   [&](const std::string& a, const std::string& b) { return counts[a] > counts[b]; });
  expected.resize(10);
  auto v = build_vocabulary(corpus, 10);
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(v.token(static_cast<WordId>(4 + i)) == expected[i]);
}

TEST_CASE("vocabulary of an empty corpus is an error") {
  CHECK_THROWS_WITH(build_vocabulary(sentences({"", " "}), 10), "empty corpus");
}

TEST_CASE("map_tokens sends out-of-vocabulary words to UNK") {
  auto v = build_vocabulary(sentences({"a"}), 10);
  CHECK(map_tokens(std::vector<std::string>{}, v).empty());
  CHECK(map_tokens(std::vector<std::string>{"a", "zzz"}, v) == std::vector<WordId>{v.id("a"), Vocabulary::kUnk});

  Rng rng(3);
  std::vector<std::string> tokens;
  std::vector<std::vector<std::string>> known(1);
  for (int i = 0; i < 50; ++i) known[0].push_back("k" + std::to_string(i));
  auto kv = build_vocabulary(known, 100);
  std::size_t expected_unk = 0;
  for (int i = 0; i < 1000; ++i) {
    bool oov = i % 10 < 3;
    tokens.push_back(oov ? "o" + std::to_string(rng.index(50)) : "k" + std::to_string(rng.index(50)));
    expected_unk += std::find(known[0].begin(), known[0].end(), tokens.back()) == known[0].end();
  }
  auto ids = map_tokens(tokens, kv);
  CHECK(expected_unk == 300);
  CHECK(static_cast<std::size_t>(std::count(ids.begin(), ids.end(), Vocabulary::kUnk)) == expected_unk);
}

TEST_CASE("pad_source pads on the left") {
  std::vector<WordId> two{7, 8};
  CHECK(pad_source(two, 5) == std::vector<WordId>{0, 0, 0, 7, 8});
  std::vector<WordId> forty(40, 9);
  CHECK(pad_source(forty, 40) == forty);
  std::vector<WordId> long_one(41, 9);
  CHECK_THROWS_AS(pad_source(long_one, 40), Error);
}

TEST_CASE("alignment lines") {
  CHECK(parse_alignment_line("").empty());
  auto set = parse_alignment_line("0-0 0-1 2-1");
  CHECK(set.links == std::vector<AlignmentLink>{{0, 0}, {0, 1}, {2, 1}});
  CHECK(parse_alignment_line("  2-1   0-0 2-1 ").links == std::vector<AlignmentLink>{{0, 0}, {2, 1}});

  try {
    parse_alignment_line("0-0 3-x");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.column() == 5);
  }
  for (const char* bad : {"3-", "-1", "a", "1-2-3", "1--2", "-1-2"}) {
    CHECK_THROWS_AS(parse_alignment_line(bad), ParseError);
  }
}

TEST_CASE("affiliation follows the alignment and the right-preferring rule") {
  // "Zongtong" at source index 4 produces "presidential" at target 1.
  CHECK(compute_affiliation(1, parse_alignment_line("4-1 0-0"), 3) == std::vector<int>{4});
  CHECK(compute_affiliation(0, parse_alignment_line("1-0 3-0"), 2) == std::vector<int>{1, 3});
  auto a = parse_alignment_line("0-1 1-3");
  CHECK(compute_affiliation(2, a, 4) == std::vector<int>{1});
  CHECK(compute_affiliation(0, a, 4) == std::vector<int>{0});
  CHECK_THROWS_AS(compute_affiliation(0, AlignmentLinkSet{}, 3), UnalignableError);
  CHECK_THROWS_AS(compute_affiliation(3, a, 3), Error);
}

TEST_CASE("affiliation agrees with the enumeration oracle on random alignments") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    int src = 1 + static_cast<int>(rng.index(8));
    int tgt = 1 + static_cast<int>(rng.index(8));
    AlignmentLinkSet set;
    std::vector<std::pair<int, int>> links;
    for (int s = 0; s < src; ++s) {
      for (int t = 0; t < tgt; ++t) {
        if (rng.index(5) == 0) {
          set.insert({s, t});
          links.emplace_back(s, t);
        }
      }
    }
    for (int t = 0; t < tgt; ++t) {
      auto expected = oracle::affiliation(t, links, tgt);
      if (!expected) {
        CHECK_THROWS_AS(compute_affiliation(t, set, static_cast<std::size_t>(tgt)), UnalignableError);
      } else {
        CHECK(compute_affiliation(t, set, static_cast<std::size_t>(tgt)) == *expected);
      }
    }
  }
}

TEST_CASE("dependency heads") {
  CHECK(parse_heads_line("-1", 1) == std::vector<int>{-1});
  CHECK(parse_heads_line("1 -1 1", 3) == std::vector<int>{1, -1, 1});
  CHECK_THROWS_AS(parse_heads_line("0 0", 2), ParseError);      // no root
  CHECK_THROWS_AS(parse_heads_line("-1 -1", 2), ParseError);    // two roots
  CHECK_THROWS_AS(parse_heads_line("1 -1", 3), ParseError);     // count
  CHECK_THROWS_AS(parse_heads_line("3 -1 1", 3), ParseError);   // range
  CHECK_THROWS_AS(parse_heads_line("2 -1 0 2", 4), ParseError); // cycle 0 -> 2 -> 0
  CHECK_THROWS_AS(parse_heads_line("x -1", 2), ParseError);
}

TEST_CASE("sample extraction") {
  AlignedSentencePair pair;
  pair.source_tokens = split_tokens("s0 s1 s2");
  pair.target_tokens = split_tokens("t0 t1 t2 t3");
  pair.alignment = parse_alignment_line("0-0 2-3");
  auto sv = build_vocabulary(std::vector<std::vector<std::string>>{pair.source_tokens}, 100);
  auto tv = build_vocabulary(std::vector<std::vector<std::string>>{pair.target_tokens}, 100);

  ExtractOptions opt{3, 5, false};
  auto samples = extract_samples(pair, sv, tv, opt);
  REQUIRE(samples.size() == 4);
  CHECK(samples[0].history == std::vector<WordId>{Vocabulary::kBos, Vocabulary::kBos, Vocabulary::kBos});
  CHECK(samples[3].history == std::vector<WordId>{tv.id("t0"), tv.id("t1"), tv.id("t2")});
  CHECK(samples[0].source_ids == std::vector<WordId>{0, 0, sv.id("s0"), sv.id("s1"), sv.id("s2")});
  CHECK(samples[0].affiliated == std::vector<int>{2});
  // t1 is unaligned; t0 is nearer than t3.
  CHECK(samples[1].affiliated == std::vector<int>{2});
  // t2 is one from t3 and two from t0.
  CHECK(samples[2].affiliated == std::vector<int>{4});
  CHECK(samples[2].target == tv.id("t2"));

  opt.emit_eos = true;
  samples = extract_samples(pair, sv, tv, opt);
  REQUIRE(samples.size() == 5);
  CHECK(samples[4].target == Vocabulary::kEos);
  CHECK(samples[4].affiliated == samples[3].affiliated);
  CHECK(samples[4].history == std::vector<WordId>{tv.id("t1"), tv.id("t2"), tv.id("t3")});
}

TEST_CASE("affiliated positions are shifted by the padding offset") {
  AlignedSentencePair pair;
  for (int i = 0; i < 30; ++i) pair.source_tokens.push_back("s" + std::to_string(i));
  pair.target_tokens = {"t"};
  pair.alignment.insert({3, 0});
  auto sv = build_vocabulary(std::vector<std::vector<std::string>>{pair.source_tokens}, 100);
  auto tv = build_vocabulary(std::vector<std::vector<std::string>>{pair.target_tokens}, 100);
  auto samples = extract_samples(pair, sv, tv, ExtractOptions{3, 40, false});
  CHECK(samples.at(0).affiliated == std::vector<int>{3 + (40 - 30)});
}

TEST_CASE("head positions follow the affiliated words") {
  AlignedSentencePair pair;
  pair.source_tokens = split_tokens("a b c");
  pair.target_tokens = split_tokens("x y");
  pair.alignment = parse_alignment_line("0-0 2-0 1-1");
  pair.heads = parse_heads_line("1 -1 1", 3);
  auto sv = build_vocabulary(std::vector<std::vector<std::string>>{pair.source_tokens}, 10);
  auto tv = build_vocabulary(std::vector<std::vector<std::string>>{pair.target_tokens}, 10);
  auto samples = extract_samples(pair, sv, tv, ExtractOptions{2, 4, false});
  CHECK(samples[0].affiliated == std::vector<int>{1, 3});
  CHECK(samples[0].head_positions == std::vector<int>{2});  // both heads are b, deduplicated
  CHECK(samples[1].affiliated == std::vector<int>{2});
  CHECK(samples[1].head_positions.empty());  // b is the root
}

TEST_CASE("corpus extraction counts skipped sentences") {
  std::vector<AlignedSentencePair> pairs(3);
  pairs[0].source_tokens = {"a"};
  pairs[0].target_tokens = {"x"};
  pairs[0].alignment.insert({0, 0});
  pairs[1].source_tokens = {"a", "b", "c"};
  pairs[1].target_tokens = {"x"};
  pairs[1].alignment.insert({0, 0});
  pairs[2].source_tokens = {"a"};
  pairs[2].target_tokens = {"x"};
  auto sv = build_vocabulary(std::vector<std::vector<std::string>>{{"a", "b", "c"}}, 10);
  auto tv = build_vocabulary(std::vector<std::vector<std::string>>{{"x"}}, 10);
  auto set = extract_corpus(pairs, sv, tv, ExtractOptions{3, 2, true});
  CHECK(set.sentences == 3);
  CHECK(set.samples.size() == 2);
  CHECK(set.skipped_too_long == 1);
  CHECK(set.skipped_unalignable == 1);
}

TEST_CASE("parallel corpus files") {
  auto src = scratch("src.txt"), tgt = scratch("tgt.txt"), al = scratch("al.txt"), hd = scratch("heads.txt");
  write_file(src, "a b\nc\n");
  write_file(tgt, "x y\nz\n");
  write_file(al, "0-0 1-1\n0-0\n");
  write_file(hd, "-1 0\n-1\n");
  auto pairs = read_parallel_corpus(src.string(), tgt.string(), al.string(), hd.string());
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].target_tokens == std::vector<std::string>{"x", "y"});
  CHECK(*pairs[1].heads == std::vector<int>{-1});

  write_file(tgt, "x y\n");
  try {
    read_parallel_corpus(src.string(), tgt.string(), al.string(), std::nullopt);
    FAIL("expected a line count error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("first divergent line 2") != std::string::npos);
  }

  write_file(tgt, "x y\nz\n");
  write_file(al, "0-0 1-5\n0-0\n");
  CHECK_THROWS_AS(read_parallel_corpus(src.string(), tgt.string(), al.string(), std::nullopt), ParseError);
  CHECK_THROWS_AS(read_lines(scratch("missing.txt").string()), Error);
}
