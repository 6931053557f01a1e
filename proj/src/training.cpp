#include "docnmt/training.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <type_traits>

#include "docnmt/errors.hpp"

#if defined(__SSE__)
#include <xmmintrin.h>
#endif
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace docnmt {

double learning_rate(std::size_t step, std::size_t warmup, std::size_t dim, double scale) {
  if (step == 0) throw ContractError("learning_rate: step must be >= 1");
  if (warmup == 0) throw ContractError("learning_rate: warmup must be >= 1");
  if (dim == 0) throw ContractError("learning_rate: dimension must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return scale * std::pow(static_cast<double>(dim), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename T>
Adam<T>::Adam(ParameterSet<T>& params, AdamConfig config) : params_(params), config_(config) {
  for (const auto& p : params_.all()) {
    if (!p.value.requires_grad()) continue;
    state_[p.name] = Moments{std::vector<double>(p.value.size(), 0.0),
                             std::vector<double>(p.value.size(), 0.0)};
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++steps_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (auto& p : params_.all()) {
    auto it = state_.find(p.name);
    if (it == state_.end() || !p.value.has_grad()) continue;
    auto& [m, v] = it->second;
    auto value = p.value.mutable_data();
    const auto grad = p.value.grad();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = grad[i];
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      value[i] = static_cast<T>(value[i] - lr * m_hat / (std::sqrt(v_hat) + config_.epsilon));
    }
  }
}

template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  double total = 0.0;
  for (const auto& p : params.all()) {
    if (!p.value.requires_grad() || !p.value.has_grad()) continue;
    for (T g : p.value.grad()) total += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params.all()) {
      if (!p.value.requires_grad() || !p.value.has_grad()) continue;
      for (T& g : p.value.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
void set_trainable(ParameterSet<T>& params, const std::set<Partition>& trainable) {
  for (auto& p : params.all()) {
    p.value.set_requires_grad(trainable.contains(p.partition));
    p.value.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Tensor<T> nll_loss(const Batch& batch, const DocTransformer<T>& model, ForwardMode mode,
                   const Dropout& drop, double label_smoothing) {
  const std::size_t tokens = batch.target_tokens();
  if (tokens == 0) throw ContractError("nll_loss: batch has no target tokens");
  const Tensor<T> logits = model.forward(batch, mode, drop);
  const Tensor<T> total = nll_sum(logits, std::span<const TokenId>(batch.target_out), kPad,
                                  label_smoothing);
  return scale(total, static_cast<T>(1.0 / static_cast<double>(tokens)));
}

template <typename T>
double evaluate_loss(const DocTransformer<T>& model, const std::vector<TrainingExample>& examples,
                     ForwardMode mode, std::size_t token_budget) {
  if (examples.empty()) throw ContractError("evaluate_loss: no examples");
  NoGradGuard no_grad;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const Batch& batch : make_batches(examples, token_budget, 0)) {
    const Tensor<T> logits = model.forward(batch, mode);
    total += static_cast<double>(
        nll_sum(logits, std::span<const TokenId>(batch.target_out), kPad).item());
    tokens += batch.target_tokens();
  }
  return total / static_cast<double>(tokens);
}

template <typename T>
std::vector<T> collect_gate_values(const DocTransformer<T>& model,
                                   const std::vector<TrainingExample>& examples,
                                   std::size_t token_budget) {
  NoGradGuard no_grad;
  GateTrace<T> trace;
  for (const Batch& batch : make_batches(examples, token_budget, 0)) {
    model.forward(batch, ForwardMode::document, {}, &trace);
  }
  return trace.values;
}

// ---------------------------------------------------------------------------
// Training loops

namespace {

// Sets flush-to-zero and denormals-are-zero for the current thread while
// alive. Tiny Adam moments otherwise drag single-precision training into slow
// denormal arithmetic.
class FlushDenormals {
 public:
#if defined(__SSE__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }
  ~FlushDenormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

template <typename T>
std::vector<std::vector<T>> snapshot(const ParameterSet<T>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params.all()) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

template <typename T>
void restore(ParameterSet<T>& params, const std::vector<std::vector<T>>& values) {
  auto& all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    std::copy(values[i].begin(), values[i].end(), all[i].value.mutable_data().begin());
  }
}

}  // namespace

template <typename T>
TrainResult train(DocTransformer<T>& model, const std::vector<TrainingExample>& examples,
                  ForwardMode mode, const std::set<Partition>& trainable,
                  const TrainOptions& options, const std::vector<TrainingExample>* dev,
                  const std::function<void(const StepRecord&)>& on_log) {
  if (examples.empty()) throw ConfigError("train: the training corpus is empty");
  if (options.max_steps == 0 && options.max_epochs == 0) {
    throw ConfigError("train: set max_steps or max_epochs");
  }
  if (options.token_budget == 0) throw ConfigError("train: token_budget must be positive");

  std::optional<FlushDenormals> flush;
  if constexpr (std::is_same_v<T, float>) flush.emplace();

  ParameterSet<T>& params = model.parameters();
  set_trainable(params, trainable);
  Adam<T> adam(params);
  std::mt19937_64 dropout_rng(options.seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL);
  const Dropout drop{model.config().dropout, &dropout_rng};

  using Clock = std::chrono::steady_clock;
  TrainResult result;
  std::optional<std::vector<std::vector<T>>> best;
  double window_loss = 0.0;
  std::size_t window_steps = 0;
  std::size_t window_tokens = 0;
  double window_seconds = 0.0;
  double total_seconds = 0.0;

  const auto evaluate_dev = [&] {
    if (!dev || dev->empty()) return;
    const double loss = evaluate_loss(model, *dev, mode, options.token_budget);
    result.dev_loss = loss;
    if (!result.best_dev_loss || loss < *result.best_dev_loss) {
      result.best_dev_loss = loss;
      if (options.keep_best) best = snapshot(params);
    }
  };

  std::size_t step = 0;
  for (std::size_t epoch = 0;; ++epoch) {
    if (options.max_epochs > 0 && epoch >= options.max_epochs) break;
    if (options.max_steps > 0 && step >= options.max_steps) break;
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (const Batch& batch : make_batches(examples, options.token_budget, options.seed + epoch)) {
      if (options.max_steps > 0 && step >= options.max_steps) break;
      ++step;
      const auto start = Clock::now();
      params.zero_grad();
      const Tensor<T> loss = nll_loss(batch, model, mode, drop, options.label_smoothing);
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw NumericError("train: non-finite loss at step " + std::to_string(step));
      }
      loss.backward();
      clip_grad_norm(params, options.clip_norm);
      const double lr = learning_rate(step, options.warmup, model.config().hidden, options.lr_scale);
      adam.step(lr);
      const double seconds = std::chrono::duration<double>(Clock::now() - start).count();

      const std::size_t tokens = batch.target_tokens();
      epoch_loss += loss_value * static_cast<double>(tokens);
      epoch_tokens += tokens;
      window_loss += loss_value;
      ++window_steps;
      window_tokens += tokens;
      window_seconds += seconds;
      total_seconds += seconds;
      result.target_tokens += tokens;

      if (options.log_interval > 0 && step % options.log_interval == 0) {
        StepRecord record{step, window_loss / static_cast<double>(window_steps), lr,
                          window_seconds > 0 ? static_cast<double>(window_tokens) / window_seconds : 0.0};
        result.log.push_back(record);
        if (on_log) on_log(record);
        window_loss = 0.0;
        window_steps = 0;
        window_tokens = 0;
        window_seconds = 0.0;
      }
      if (options.eval_interval > 0 && step % options.eval_interval == 0) evaluate_dev();
    }
    if (epoch_tokens > 0) {
      result.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_tokens));
    }
  }
  result.steps = step;
  result.tokens_per_second =
      total_seconds > 0 ? static_cast<double>(result.target_tokens) / total_seconds : 0.0;

  if (options.eval_interval == 0 || step % options.eval_interval != 0) evaluate_dev();
  if (best) {
    restore(params, *best);
    result.dev_loss = result.best_dev_loss;
  }
  params.zero_grad();
  return result;
}

template <typename T>
TrainResult train_step_one(DocTransformer<T>& model, const std::vector<ParallelDocument>& documents,
                           const TrainOptions& options, const std::vector<ParallelDocument>* dev,
                           const std::function<void(const StepRecord&)>& on_log) {
  const auto examples = sentence_examples(documents);
  std::vector<TrainingExample> dev_examples;
  if (dev) dev_examples = sentence_examples(*dev);
  return train(model, examples, ForwardMode::sentence, {Partition::sentence}, options,
               dev ? &dev_examples : nullptr, on_log);
}

template <typename T>
TrainResult train_step_two(DocTransformer<T>& model, const Checkpoint& step_one,
                           const std::vector<ParallelDocument>& documents,
                           const TrainOptions& options, const std::vector<ParallelDocument>* dev,
                           const std::function<void(const StepRecord&)>& on_log) {
  if (!step_one.partitions().contains(Partition::sentence)) {
    throw ConfigError("train_step_two: the initial checkpoint holds no sentence-level parameters");
  }
  if (!model.config().uses_context()) {
    throw ConfigError("train_step_two: the configuration integrates no context");
  }
  load_parameters(model, step_one, {Partition::sentence});
  const std::size_t window = model.config().context_window;
  const auto examples = document_examples(documents, window);
  std::vector<TrainingExample> dev_examples;
  if (dev) dev_examples = document_examples(*dev, window);
  return train(model, examples, ForwardMode::document, {Partition::document}, options,
               dev ? &dev_examples : nullptr, on_log);
}

template <typename T>
TrainResult direct_joint_train(DocTransformer<T>& model,
                               const std::vector<ParallelDocument>& documents,
                               const TrainOptions& options, const std::vector<ParallelDocument>* dev,
                               const std::function<void(const StepRecord&)>& on_log) {
  const std::size_t window = model.config().context_window;
  const auto examples = document_examples(documents, window);
  std::vector<TrainingExample> dev_examples;
  if (dev) dev_examples = document_examples(*dev, window);
  return train(model, examples, ForwardMode::document, {Partition::sentence, Partition::document},
               options, dev ? &dev_examples : nullptr, on_log);
}

// ---------------------------------------------------------------------------
// Plans

std::string_view stage_name(TrainStage stage) {
  switch (stage) {
    case TrainStage::one: return "one";
    case TrainStage::two: return "two";
    case TrainStage::joint: return "joint";
  }
  return "one";
}

TrainStage parse_stage(std::string_view text) {
  if (text == "one" || text == "1" || text == "sentence") return TrainStage::one;
  if (text == "two" || text == "2" || text == "document") return TrainStage::two;
  if (text == "joint") return TrainStage::joint;
  throw ConfigError("plan: unknown stage '" + std::string(text) + "' (expected one, two or joint)");
}

namespace {

constexpr std::array<std::string_view, 22> kPlanKeys = {
    "stage",        "train_source",   "train_target",    "sentence_source", "sentence_target",
    "dev_source",   "dev_target",     "init_checkpoint", "output",          "metrics",
    "vocab_size",   "max_steps",      "max_epochs",      "token_budget",    "warmup",
    "lr_scale",     "clip_norm",      "label_smoothing", "seed",            "log_interval",
    "eval_interval", "keep_best"};

std::size_t plan_count(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("plan: '" + std::string(key) + "' expects a count, got '" +
                      std::string(value) + "'");
  }
  return out;
}

double plan_real(std::string_view key, std::string_view value) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("plan: '" + std::string(key) + "' expects a number, got '" +
                      std::string(value) + "'");
  }
  return out;
}

}  // namespace

bool TrainPlan::is_key(std::string_view key) {
  return std::find(kPlanKeys.begin(), kPlanKeys.end(), key) != kPlanKeys.end();
}

void TrainPlan::set(std::string_view key, std::string_view value) {
  const std::string v(value);
  if (key == "stage") stage = parse_stage(value);
  else if (key == "train_source") train_source = v;
  else if (key == "train_target") train_target = v;
  else if (key == "sentence_source") sentence_source = v;
  else if (key == "sentence_target") sentence_target = v;
  else if (key == "dev_source") dev_source = v;
  else if (key == "dev_target") dev_target = v;
  else if (key == "init_checkpoint") init_checkpoint = v;
  else if (key == "output") output = v;
  else if (key == "metrics") metrics = v;
  else if (key == "vocab_size") vocab_size = plan_count(key, value);
  else if (key == "max_steps") options.max_steps = plan_count(key, value);
  else if (key == "max_epochs") options.max_epochs = plan_count(key, value);
  else if (key == "token_budget") options.token_budget = plan_count(key, value);
  else if (key == "warmup") options.warmup = plan_count(key, value);
  else if (key == "lr_scale") options.lr_scale = plan_real(key, value);
  else if (key == "clip_norm") options.clip_norm = plan_real(key, value);
  else if (key == "label_smoothing") options.label_smoothing = plan_real(key, value);
  else if (key == "seed") options.seed = plan_count(key, value);
  else if (key == "log_interval") options.log_interval = plan_count(key, value);
  else if (key == "eval_interval") options.eval_interval = plan_count(key, value);
  else if (key == "keep_best") options.keep_best = parse_bool(value);
  else throw ConfigError("plan: unknown key '" + std::string(key) + "'");
}

std::string TrainPlan::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "stage=" << stage_name(stage) << '\n'
     << "train_source=" << train_source << '\n'
     << "train_target=" << train_target << '\n'
     << "sentence_source=" << sentence_source << '\n'
     << "sentence_target=" << sentence_target << '\n'
     << "dev_source=" << dev_source << '\n'
     << "dev_target=" << dev_target << '\n'
     << "init_checkpoint=" << init_checkpoint << '\n'
     << "output=" << output << '\n'
     << "metrics=" << metrics << '\n'
     << "vocab_size=" << vocab_size << '\n'
     << "max_steps=" << options.max_steps << '\n'
     << "max_epochs=" << options.max_epochs << '\n'
     << "token_budget=" << options.token_budget << '\n'
     << "warmup=" << options.warmup << '\n'
     << "lr_scale=" << options.lr_scale << '\n'
     << "clip_norm=" << options.clip_norm << '\n'
     << "label_smoothing=" << options.label_smoothing << '\n'
     << "seed=" << options.seed << '\n'
     << "log_interval=" << options.log_interval << '\n'
     << "eval_interval=" << options.eval_interval << '\n'
     << "keep_best=" << (options.keep_best ? "true" : "false") << '\n';
  return os.str();
}

TrainPlan TrainPlan::from_text(std::string_view text) {
  TrainPlan plan;
  for (const auto& [k, v] : parse_key_values(text)) plan.set(k, v);
  return plan;
}

void TrainPlan::validate() const {
  if (train_source.empty() || train_target.empty()) {
    throw ConfigError("plan: train_source and train_target are required");
  }
  if (sentence_source.empty() != sentence_target.empty()) {
    throw ConfigError("plan: sentence_source and sentence_target must be given together");
  }
  if (!sentence_source.empty() && stage != TrainStage::one) {
    throw ConfigError("plan: a sentence-level corpus is only used by stage one");
  }
  if (dev_source.empty() != dev_target.empty()) {
    throw ConfigError("plan: dev_source and dev_target must be given together");
  }
  if (stage == TrainStage::two && init_checkpoint.empty()) {
    throw ConfigError(
        "plan: stage two trains document-level parameters on top of a stage-one model; "
        "pass the stage-one checkpoint with init_checkpoint (--init-checkpoint)");
  }
  if (options.max_steps == 0 && options.max_epochs == 0) {
    throw ConfigError("plan: set max_steps or max_epochs");
  }
  if (options.token_budget == 0) throw ConfigError("plan: token_budget must be positive");
  if (options.warmup == 0) throw ConfigError("plan: warmup must be positive");
  if (options.label_smoothing < 0.0 || options.label_smoothing >= 1.0) {
    throw ConfigError("plan: label_smoothing must lie in [0, 1)");
  }
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

std::string metrics_header() { return "step,loss,learning_rate,tokens_per_second"; }

std::string metrics_line(const StepRecord& r) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.8g,%.1f", r.step, r.loss, r.learning_rate,
                r.tokens_per_second);
  return buf;
}

// ---------------------------------------------------------------------------

template class Adam<float>;
template class Adam<double>;

#define DOCNMT_INSTANTIATE_TRAINING(T)                                                          \
  template double clip_grad_norm(ParameterSet<T>&, double);                                     \
  template void set_trainable(ParameterSet<T>&, const std::set<Partition>&);                    \
  template Tensor<T> nll_loss(const Batch&, const DocTransformer<T>&, ForwardMode,              \
                              const Dropout&, double);                                          \
  template double evaluate_loss(const DocTransformer<T>&, const std::vector<TrainingExample>&,  \
                                ForwardMode, std::size_t);                                      \
  template std::vector<T> collect_gate_values(const DocTransformer<T>&,                         \
                                              const std::vector<TrainingExample>&, std::size_t); \
  template TrainResult train(DocTransformer<T>&, const std::vector<TrainingExample>&,           \
                             ForwardMode, const std::set<Partition>&, const TrainOptions&,      \
                             const std::vector<TrainingExample>*,                               \
                             const std::function<void(const StepRecord&)>&);                    \
  template TrainResult train_step_one(DocTransformer<T>&, const std::vector<ParallelDocument>&, \
                                      const TrainOptions&, const std::vector<ParallelDocument>*, \
                                      const std::function<void(const StepRecord&)>&);           \
  template TrainResult train_step_two(DocTransformer<T>&, const Checkpoint&,                    \
                                      const std::vector<ParallelDocument>&,                     \
                                      const TrainOptions&, const std::vector<ParallelDocument>*, \
                                      const std::function<void(const StepRecord&)>&);           \
  template TrainResult direct_joint_train(DocTransformer<T>&,                                   \
                                          const std::vector<ParallelDocument>&,                 \
                                          const TrainOptions&,                                  \
                                          const std::vector<ParallelDocument>*,                 \
                                          const std::function<void(const StepRecord&)>&);

DOCNMT_INSTANTIATE_TRAINING(float)
DOCNMT_INSTANTIATE_TRAINING(double)

}  // namespace docnmt
