#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "docnmt/checkpoint.hpp"
#include "docnmt/errors.hpp"

using namespace docnmt;
namespace fs = std::filesystem;

namespace {

ModelConfig small(bool context = true) {
  ModelConfig c;
  c.hidden = 8;
  c.filter = 16;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.integrate_encoder = context;
  c.integrate_decoder = context;
  c.dropout = 0;
  c.source_vocab = 10;
  c.target_vocab = 9;
  return c;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("docnmt_ck_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const Vocabulary& source_vocab() {
  static const Vocabulary v = Vocabulary::from_tokens({"a", "b", "c", "d", "e", "f"});
  return v;
}
const Vocabulary& target_vocab() {
  static const Vocabulary v = Vocabulary::from_tokens({"x", "y", "z", "w", "v"});
  return v;
}

template <typename T>
void scramble(DocTransformer<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 0.5);
  for (auto& p : model.parameters().all())
    for (auto& v : p.value.mutable_data()) v = static_cast<T>(n(rng));
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("double checkpoints round-trip bit for bit") {
  TempDir dir;
  DocTransformer<double> model(small(), 1);
  scramble(model, 2);
  write_checkpoint(dir.path / "m.ck", make_checkpoint(model, source_vocab(), target_vocab()), 8);
  const Checkpoint ck = read_checkpoint(dir.path / "m.ck");
  CHECK(ck.config == model.config());
  CHECK(ck.source_vocab == source_vocab());
  CHECK(ck.target_vocab == target_vocab());
  CHECK(ck.partitions() == std::set<Partition>{Partition::sentence, Partition::document});

  DocTransformer<double> other(small(), 99);
  load_parameters(other, ck, {Partition::sentence, Partition::document});
  for (const auto& p : model.parameters().all()) {
    const auto* q = other.parameters().find(p.name);
    REQUIRE(q != nullptr);
    CHECK(q->value.data().size() == p.value.data().size());
    bool same = true;
    for (std::size_t i = 0; i < p.value.size(); ++i) same = same && p.value.data()[i] == q->value.data()[i];
    CHECK_MESSAGE(same, p.name);
  }
}

TEST_CASE("float checkpoints round-trip bit for bit at width 4") {
  TempDir dir;
  DocTransformer<float> model(small(), 3);
  scramble(model, 4);
  write_checkpoint(dir.path / "m.ck", make_checkpoint(model, source_vocab(), target_vocab()));
  DocTransformer<float> other(small(), 5);
  load_parameters(other, read_checkpoint(dir.path / "m.ck"), {Partition::sentence, Partition::document});
  for (const auto& p : model.parameters().all()) {
    const auto& a = p.value.data();
    const auto& b = other.parameters().find(p.name)->value.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
}

TEST_CASE("a sentence-level checkpoint loads into a baseline and a document model alike") {
  TempDir dir;
  DocTransformer<double> doc(small(), 6);
  scramble(doc, 7);
  write_checkpoint(dir.path / "s.ck", make_checkpoint(doc, source_vocab(), target_vocab(), {Partition::sentence}), 8);
  const Checkpoint ck = read_checkpoint(dir.path / "s.ck");
  CHECK(ck.partitions() == std::set<Partition>{Partition::sentence});
  for (const auto& e : ck.entries) CHECK(e.partition == Partition::sentence);

  DocTransformer<double> baseline(small(false), 8);
  load_parameters(baseline, ck, {Partition::sentence});
  const TrainingExample ex = make_example({kBos}, {4, 5, 6}, {4, 7});
  const auto a = sentence_log_prob(ex, baseline, ForwardMode::sentence);
  const auto b = sentence_log_prob(ex, doc, ForwardMode::sentence);
  CHECK(a.total == doctest::Approx(b.total).epsilon(1e-12));

  // Document parameters are absent: asking for them names every one.
  DocTransformer<double> fresh(small(), 9);
  const std::string msg = error_of([&] { load_parameters(fresh, ck, {Partition::document}); });
  CHECK(msg.find("context_encoder.layer0.self_attention.w_q") != std::string::npos);
  CHECK(msg.find("decoder.layer0.gate.w_s") != std::string::npos);
  CHECK_THROWS_AS(load_parameters(fresh, ck, {Partition::document}), ConfigError);
}

TEST_CASE("shape mismatches are configuration errors naming the parameter") {
  DocTransformer<double> model(small(), 1);
  Checkpoint ck = make_checkpoint(model, source_vocab(), target_vocab());
  ModelConfig wide = small();
  wide.target_vocab = 12;
  DocTransformer<double> other(wide, 1);
  const std::string msg = error_of([&] { load_parameters(other, ck, {Partition::sentence}); });
  CHECK(msg.find("target_embedding") != std::string::npos);
  CHECK(msg.find("output.w_o") != std::string::npos);
  CHECK_THROWS_AS(load_parameters(other, ck, {Partition::sentence}), ConfigError);
}

TEST_CASE("unreadable checkpoints") {
  TempDir dir;
  CHECK_THROWS_AS(read_checkpoint(dir.path / "missing.ck"), ConfigError);

  std::ofstream(dir.path / "junk.ck") << "NOTACHECKPOINT and more bytes";
  CHECK_THROWS_AS(read_checkpoint(dir.path / "junk.ck"), DataError);

  DocTransformer<float> model(small(), 1);
  write_checkpoint(dir.path / "full.ck", make_checkpoint(model, source_vocab(), target_vocab()));
  const auto size = fs::file_size(dir.path / "full.ck");
  for (auto cut : {size / 2, size - 1, std::uintmax_t{12}}) {
    fs::copy_file(dir.path / "full.ck", dir.path / "cut.ck", fs::copy_options::overwrite_existing);
    fs::resize_file(dir.path / "cut.ck", cut);
    CHECK_THROWS_AS(read_checkpoint(dir.path / "cut.ck"), DataError);
  }
}

TEST_CASE("unsupported value width is rejected") {
  TempDir dir;
  DocTransformer<float> model(small(), 1);
  CHECK_THROWS_AS(write_checkpoint(dir.path / "x.ck", make_checkpoint(model, source_vocab(), target_vocab()), 2),
                  ContractError);
}
