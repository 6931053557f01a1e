#include <doctest.h>

#include <cmath>
#include <limits>
#include <map>
#include <random>

#include "docnmt/errors.hpp"
#include "docnmt/training.hpp"

using namespace docnmt;

namespace {

ModelConfig small(bool context = true) {
  ModelConfig c;
  c.hidden = 16;
  c.filter = 32;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.integrate_encoder = context;
  c.integrate_decoder = context;
  c.dropout = 0;
  c.source_vocab = 14;
  c.target_vocab = 14;
  return c;
}

// Ten documents of five sentences; the target reverses the source.
std::vector<ParallelDocument> toy_corpus(std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::vector<ParallelDocument> docs;
  for (std::size_t d = 0; d < 10; ++d) {
    ParallelDocument doc;
    doc.id = d;
    for (int k = 0; k < 5; ++k) {
      TokenIds s(2 + rng() % 4);
      for (auto& t : s) t = static_cast<TokenId>(4 + rng() % 10);
      doc.source.push_back(s);
      doc.target.emplace_back(s.rbegin(), s.rend());
    }
    docs.push_back(doc);
  }
  return docs;
}

TrainOptions quick(std::size_t steps) {
  TrainOptions o;
  o.max_steps = steps;
  o.token_budget = 128;
  o.warmup = 20;
  o.lr_scale = 1.0;
  o.log_interval = 5;
  return o;
}

template <typename T>
std::map<std::string, std::vector<T>> snapshot(const DocTransformer<T>& model) {
  std::map<std::string, std::vector<T>> out;
  for (const auto& p : model.parameters().all()) out[p.name] = {p.value.data().begin(), p.value.data().end()};
  return out;
}

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::from_tokens({"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"});
  return v;
}

}  // namespace

TEST_CASE("learning rate schedule") {
  const double d = 64, w = 400;
  CHECK(learning_rate(1, 400, 64) == doctest::Approx(std::pow(d, -0.5) * std::pow(w, -1.5)));
  CHECK(learning_rate(400, 400, 64) == doctest::Approx(std::pow(d, -0.5) / 20.0));
  CHECK(learning_rate(100, 400, 64) == doctest::Approx(learning_rate(400, 400, 64) / 4));
  CHECK(learning_rate(1600, 400, 64) == doctest::Approx(learning_rate(400, 400, 64) / 2));
  CHECK(learning_rate(400, 400, 64, 2.0) == doctest::Approx(2 * learning_rate(400, 400, 64)));
  // Both branches agree at the knee and the curve is monotone either side.
  for (std::size_t s = 2; s <= 400; ++s) CHECK(learning_rate(s, 400, 64) > learning_rate(s - 1, 400, 64));
  for (std::size_t s = 401; s <= 2000; ++s) CHECK(learning_rate(s, 400, 64) < learning_rate(s - 1, 400, 64));
  CHECK_THROWS_AS(learning_rate(0, 400, 64), ContractError);
}

TEST_CASE("nll of uniform logits is log V") {
  DocTransformer<double> model(small(false), 1);
  for (auto& v : model.parameters().find("output.w_o")->value.mutable_data()) v = 0;
  const std::vector<TrainingExample> ex = {make_example({kBos}, {4, 5}, {6, 7, 8})};
  const auto loss = nll_loss(make_batch(ex), model, ForwardMode::sentence);
  CHECK(loss.item() == doctest::Approx(std::log(14.0)).epsilon(1e-12));
}

TEST_CASE("batched nll is the token-weighted mean of the single losses") {
  DocTransformer<double> model(small(), 2);
  const std::vector<TrainingExample> ex = {make_example({4, 5}, {4, 5, 6}, {7}),
                                           make_example({kBos}, {8}, {9, 10, 11, 12})};
  for (auto mode : {ForwardMode::sentence, ForwardMode::document}) {
    const double a = nll_loss(make_batch(std::span(ex).subspan(0, 1)), model, mode).item();
    const double b = nll_loss(make_batch(std::span(ex).subspan(1, 1)), model, mode).item();
    const double both = nll_loss(make_batch(ex), model, mode).item();
    CHECK(both == doctest::Approx((2 * a + 5 * b) / 7).epsilon(1e-12));
    CHECK(evaluate_loss(model, ex, mode) == doctest::Approx(both).epsilon(1e-12));
  }
}

TEST_CASE("label smoothing raises the loss of a confident model") {
  DocTransformer<double> model(small(false), 3);
  const std::vector<TrainingExample> ex = {make_example({kBos}, {4, 5}, {6, 7})};
  const Batch b = make_batch(ex);
  const double plain = nll_loss(b, model, ForwardMode::sentence).item();
  const double smooth = nll_loss(b, model, ForwardMode::sentence, {}, 0.1).item();
  CHECK(smooth != doctest::Approx(plain));
}

TEST_CASE("gradient clipping rescales to the requested norm") {
  DocTransformer<double> model(small(false), 4);
  const std::vector<TrainingExample> ex = {make_example({kBos}, {4, 5}, {6, 7})};
  model.parameters().zero_grad();
  nll_loss(make_batch(ex), model, ForwardMode::sentence).backward();
  const double before = clip_grad_norm(model.parameters(), 1e-3);
  CHECK(before > 1e-3);
  double sq = 0;
  for (const auto& p : model.parameters().all())
    if (p.value.has_grad())
      for (double g : p.value.grad()) sq += g * g;
  CHECK(std::sqrt(sq) == doctest::Approx(1e-3).epsilon(1e-9));
  CHECK(clip_grad_norm(model.parameters(), 1.0) == doctest::Approx(1e-3).epsilon(1e-9));
}

TEST_CASE("Adam keeps no state for frozen parameters") {
  DocTransformer<double> model(small(), 5);
  set_trainable(model.parameters(), {Partition::document});
  Adam<double> adam(model.parameters());
  const std::vector<TrainingExample> ex = {make_example({4, 5}, {4, 5}, {6, 7})};
  model.parameters().zero_grad();
  nll_loss(make_batch(ex), model, ForwardMode::document).backward();
  adam.step(1e-3);
  CHECK(adam.steps() == 1);
  CHECK(adam.state_size() == model.parameters().count(Partition::document));
  for (const auto& p : model.parameters().all())
    CHECK_MESSAGE(adam.has_state(p.name) == (p.partition == Partition::document), p.name);
}

TEST_CASE("step one trains sentence parameters only") {
  DocTransformer<float> model(small(), 6);
  const auto before = snapshot(model);
  const auto docs = toy_corpus();
  const auto examples = sentence_examples(docs);
  const double start = evaluate_loss(model, examples, ForwardMode::sentence);
  const auto result = train_step_one(model, docs, quick(60));
  CHECK(result.steps == 60);
  CHECK(result.log.size() == 12);
  CHECK(evaluate_loss(model, examples, ForwardMode::sentence) < start - 0.3);
  const auto after = snapshot(model);
  for (const auto& p : model.parameters().all()) {
    if (p.partition == Partition::document)
      CHECK_MESSAGE(after.at(p.name) == before.at(p.name), p.name);
    else
      CHECK_MESSAGE(after.at(p.name) != before.at(p.name), p.name);
  }
}

TEST_CASE("step two freezes sentence parameters bit for bit") {
  DocTransformer<float> first(small(), 7);
  const auto docs = toy_corpus();
  train_step_one(first, docs, quick(30));
  const Checkpoint ck = make_checkpoint(first, vocab(), vocab(), {Partition::sentence});

  DocTransformer<float> model(small(), 8);
  const auto examples = document_examples(docs, 2);
  auto options = quick(40);
  const auto result = train_step_two(model, ck, docs, options);
  CHECK(result.steps == 40);
  const auto loaded = snapshot(first), after = snapshot(model);
  DocTransformer<float> init(small(), 8);
  const auto fresh = snapshot(init);
  for (const auto& p : model.parameters().all()) {
    if (p.partition == Partition::sentence)
      CHECK_MESSAGE(after.at(p.name) == loaded.at(p.name), p.name);
    else
      CHECK_MESSAGE(after.at(p.name) != fresh.at(p.name), p.name);
  }
  // With theta_s loaded and theta_d at init the document loss starts near the
  // sentence loss; training theta_d lowers it.
  DocTransformer<float> start(small(), 8);
  load_parameters(start, ck, {Partition::sentence});
  CHECK(evaluate_loss(model, examples, ForwardMode::document) <
        evaluate_loss(start, examples, ForwardMode::document));

  Checkpoint incomplete = ck;
  incomplete.entries.pop_back();
  DocTransformer<float> other(small(), 8);
  CHECK_THROWS_AS(train_step_two(other, incomplete, docs, options), ConfigError);
  Checkpoint empty = ck;
  empty.entries.clear();
  CHECK_THROWS_AS(train_step_two(other, empty, docs, options), ConfigError);
}

TEST_CASE("joint training moves every parameter and is deterministic") {
  const auto docs = toy_corpus();
  DocTransformer<float> a(small(), 9);
  const auto before = snapshot(a);
  direct_joint_train(a, docs, quick(1));
  for (const auto& [name, values] : snapshot(a)) CHECK_MESSAGE(values != before.at(name), name);

  DocTransformer<float> c(small(), 9);
  direct_joint_train(c, docs, quick(1));
  CHECK(snapshot(c) == snapshot(a));

  auto opts = quick(10);
  opts.seed = 4;
  DocTransformer<float> d(small(), 9), e(small(), 9);
  direct_joint_train(d, docs, opts);
  direct_joint_train(e, docs, opts);
  CHECK(snapshot(d) == snapshot(e));
}

TEST_CASE("dev evaluation and keep_best") {
  const auto docs = toy_corpus(1), dev = toy_corpus(2);
  DocTransformer<float> model(small(), 10);
  auto opts = quick(30);
  opts.eval_interval = 10;
  opts.keep_best = true;
  const auto r = train_step_one(model, docs, opts, &dev);
  REQUIRE(r.dev_loss.has_value());
  REQUIRE(r.best_dev_loss.has_value());
  CHECK(*r.dev_loss == doctest::Approx(*r.best_dev_loss).epsilon(1e-9));
  CHECK(*r.dev_loss == doctest::Approx(evaluate_loss(model, sentence_examples(dev), ForwardMode::sentence)).epsilon(1e-6));
}

TEST_CASE("non-finite losses abort training") {
  DocTransformer<float> model(small(), 11);
  model.parameters().find("output.w_o")->value.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(train_step_one(model, toy_corpus(), quick(3)), NumericError);
}

TEST_CASE("epochs bound training") {
  DocTransformer<float> model(small(), 12);
  auto opts = quick(100000);
  opts.max_epochs = 2;
  const auto r = train_step_one(model, toy_corpus(), opts);
  CHECK(r.epoch_losses.size() == 2);
  CHECK(r.steps < 100000);
  CHECK(r.target_tokens > 0);
}

TEST_CASE("gate values stay inside the unit interval") {
  DocTransformer<float> model(small(), 13);
  const auto values = collect_gate_values(model, document_examples(toy_corpus(), 2));
  REQUIRE(!values.empty());
  for (float v : values) CHECK((v > 0 && v < 1));
}

TEST_CASE("train plans round-trip through text and validate") {
  TrainPlan plan;
  plan.stage = TrainStage::two;
  plan.train_source = "a.src";
  plan.train_target = "a.tgt";
  plan.init_checkpoint = "one.ck";
  plan.options.max_steps = 77;
  plan.options.lr_scale = 0.4;
  plan.options.keep_best = true;
  plan.vocab_size = 123;
  const TrainPlan back = TrainPlan::from_text(plan.to_text());
  CHECK(back.to_text() == plan.to_text());
  CHECK(back.options.max_steps == 77);
  CHECK(back.stage == TrainStage::two);
  CHECK_NOTHROW(back.validate());

  TrainPlan missing = plan;
  missing.init_checkpoint.clear();
  CHECK_THROWS_AS(missing.validate(), ConfigError);
  TrainPlan no_corpus;
  CHECK_THROWS_AS(no_corpus.validate(), ConfigError);
  CHECK_THROWS_AS(plan.set("no_such_key", "1"), ConfigError);
  CHECK_THROWS_AS(parse_stage("three"), ConfigError);
  CHECK(stage_name(parse_stage("joint")) == "joint");
}

TEST_CASE("metrics lines") {
  CHECK(metrics_header() == "step,loss,learning_rate,tokens_per_second");
  const std::string line = metrics_line({10, 2.5, 0.001, 1234.5});
  CHECK(line.rfind("10,", 0) == 0);
  CHECK(std::count(line.begin(), line.end(), ',') == 3);
}
