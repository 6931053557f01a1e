#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "docnmt/corpus.hpp"
#include "docnmt/errors.hpp"

using namespace docnmt;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("docnmt_corpus_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path write(const std::string& name, const std::string& text) const {
    std::ofstream(path / name) << text;
    return path / name;
  }
};

TextDocument doc_of(std::vector<std::string> lines) {
  TextDocument d;
  for (const auto& l : lines) {
    d.source.push_back(tokenize(l));
    d.target.push_back(tokenize(l));
  }
  return d;
}

}  // namespace

TEST_CASE("load_document_corpus examples") {
  TempDir dir;
  const auto src = dir.write("a.src", "a b\n\nc d\n");
  const auto tgt = dir.write("a.tgt", "a b\n\nc d\n");
  const auto docs = load_document_corpus(src, tgt);
  REQUIRE(docs.size() == 2);
  CHECK(docs[0].source.size() == 1);
  CHECK(docs[1].target[0] == Sentence{"c", "d"});

  const auto empty = dir.write("e", "");
  CHECK(load_document_corpus(empty, empty).empty());

  const auto bad = dir.write("b.tgt", "a b\n\nc d\ne f\n");
  try {
    load_document_corpus(src, bad);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string what = e.what();
    CHECK(what.find("document 1 ") != std::string::npos);
  }
  CHECK_THROWS_AS(load_document_corpus(dir.path / "missing", tgt), DataError);
}

TEST_CASE("several blank lines separate one pair of documents") {
  const auto docs = parse_documents("x y\nz\n\n\n\nw\n");
  REQUIRE(docs.size() == 2);
  CHECK(docs[0].size() == 2);
  CHECK(docs[1][0] == Sentence{"w"});
}

TEST_CASE("write_documents round-trips") {
  TempDir dir;
  const std::vector<std::vector<Sentence>> docs = {{{"a", "b"}, {"c"}}, {{"d"}}};
  write_documents(dir.path / "out", docs);
  CHECK(load_documents(dir.path / "out") == docs);
}

TEST_CASE("build_vocabulary examples") {
  const std::vector<std::vector<Sentence>> counts = {{{"a", "a", "b"}}};
  const Vocabulary v = build_vocabulary(counts, 5);
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
  CHECK(v.id("zzz") == kUnk);

  const std::vector<std::vector<Sentence>> tie = {{{"y", "x"}}};
  const Vocabulary one = build_vocabulary(tie, 1);
  CHECK(one.contains("x"));
  CHECK_FALSE(one.contains("y"));
  CHECK(one.size() == kReservedTokens + 1);
}

TEST_CASE("reserved ids are fixed") {
  const Vocabulary v;
  CHECK(v.size() == 4);
  CHECK(v.token(kPad) == "<pad>");
  CHECK(v.id("<s>") == kBos);
  CHECK(v.id("</s>") == kEos);
  CHECK(v.token(kUnk) == "<unk>");
}

TEST_CASE("encode and decode round-trip with UNK surface form") {
  const Vocabulary v = Vocabulary::from_tokens({"the", "cat"});
  const auto ids = v.encode({"the", "dog", "cat"});
  CHECK(ids == TokenIds{4, kUnk, 5});
  CHECK(v.decode(ids) == Sentence{"the", "<unk>", "cat"});
  const TokenIds with_markers = {kBos, 4, kEos, kPad};
  CHECK(v.decode(with_markers) == Sentence{"the"});
}

TEST_CASE("vocabulary files hold one token per line from id 4") {
  TempDir dir;
  const Vocabulary v = Vocabulary::from_tokens({"x", "y", "z"});
  v.save(dir.path / "vocab");
  std::ifstream in(dir.path / "vocab");
  std::string first;
  std::getline(in, first);
  CHECK(first == "x");
  CHECK(Vocabulary::load(dir.path / "vocab") == v);
}

TEST_CASE("extract_context examples") {
  ParallelDocument doc;
  doc.source = {{4, 5}, {6}, {7, 8, 9}, {10}, {11}};
  doc.target = doc.source;
  CHECK(extract_context(doc, 1, 2) == TokenIds{kBos});
  CHECK(extract_context(doc, 1, 0) == TokenIds{kBos});
  CHECK(extract_context(doc, 4, 2) == TokenIds{6, 7, 8, 9});
  CHECK(extract_context(doc, 2, 2) == TokenIds{4, 5});
  CHECK(extract_context(doc, 5, 1) == TokenIds{10});
  CHECK(extract_context(doc, 3, 0) == TokenIds{kBos});
  CHECK(extract_context(doc, 5, 10) == TokenIds{4, 5, 6, 7, 8, 9, 10});
  CHECK_THROWS_AS(extract_context(doc, 0, 2), ContractError);
  CHECK_THROWS_AS(extract_context(doc, 6, 2), ContractError);
}

TEST_CASE("context length is the sum of the chosen sentence lengths") {
  std::mt19937_64 rng(3);
  ParallelDocument doc;
  for (int k = 0; k < 8; ++k) doc.source.push_back(TokenIds(1 + rng() % 5, 4));
  doc.target = doc.source;
  for (std::size_t window : {1, 2, 3})
    for (std::size_t k = 1; k <= 8; ++k) {
      std::size_t want = 0;
      for (std::size_t s = (k > window ? k - window : 1); s < k; ++s) want += doc.source[s - 1].size();
      const auto ctx = extract_context(doc, k, window);
      CHECK(ctx.size() == (want == 0 ? 1 : want));
      CHECK((ctx.size() == 1 && ctx[0] == kBos) == (k == 1));
    }
}

TEST_CASE("training examples carry BOS/EOS and the window") {
  const Vocabulary v = Vocabulary::from_tokens({"a", "b", "c"});
  const auto docs = encode_corpus({doc_of({"a", "b", "c a"})}, v, v);
  const auto ex = document_examples(docs, 2);
  REQUIRE(ex.size() == 3);
  CHECK(ex[0].context == TokenIds{kBos});
  CHECK(ex[2].context == TokenIds{4, 5});
  CHECK(ex[2].source == TokenIds{6, 4, kEos});
  CHECK(ex[2].target == TokenIds{kBos, 6, 4, kEos});
  for (const auto& e : sentence_examples(docs)) CHECK(e.context == TokenIds{kBos});
}

TEST_CASE("make_batch pads and masks") {
  const std::vector<TrainingExample> ex = {make_example({4}, {4, 5, 6}, {7}), make_example({4, 5}, {4}, {7, 8, 9})};
  const Batch b = make_batch(ex);
  CHECK(b.size == 2);
  CHECK(b.source_len == 4);
  CHECK(b.target_len == 4);
  CHECK(b.context_len == 2);
  CHECK(b.source_lengths == std::vector<std::size_t>{4, 2});
  CHECK(b.target_tokens() == 2 + 4);
  CHECK(b.target_out[2] == kPad);
  CHECK(b.source_self_mask().visible_keys(1, 0) == 2);
  CHECK(b.target_self_mask().visible_keys(0, 3) == 2);
  CHECK(b.padded_size() == 2 * 4);
}

TEST_CASE("make_batches examples") {
  const TrainingExample one = make_example({4}, {4, 5}, {6, 7});
  const auto single = make_batches({one}, 100, 1);
  REQUIRE(single.size() == 1);
  CHECK(single[0].size == 1);
  CHECK(single[0].target_tokens() == 3);
  const auto two = make_batches({one, one}, 100, 1);
  REQUIRE(two.size() == 1);
  CHECK(two[0].size == 2);
  CHECK_THROWS_AS(make_batches({one}, 2, 1), ContractError);
}

TEST_CASE("make_batches respects the budget and is deterministic in the seed") {
  std::mt19937_64 rng(5);
  std::vector<TrainingExample> ex;
  for (int i = 0; i < 200; ++i)
    ex.push_back(make_example({4}, TokenIds(1 + rng() % 9, 5), TokenIds(1 + rng() % 9, 6)));
  const auto a = make_batches(ex, 64, 3), b = make_batches(ex, 64, 3), c = make_batches(ex, 64, 4);
  std::size_t total = 0;
  for (const auto& batch : a) {
    CHECK(batch.padded_size() <= 64);
    total += batch.size;
  }
  CHECK(total == ex.size());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].target_in == b[i].target_in);
  bool differs = a.size() != c.size();
  for (std::size_t i = 0; !differs && i < a.size(); ++i) differs = a[i].target_in != c[i].target_in;
  CHECK(differs);
}
