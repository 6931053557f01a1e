#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "docnmt/checkpoint.hpp"
#include "docnmt/corpus.hpp"
#include "docnmt/doc_nmt_model.hpp"

namespace docnmt {

// scale * D^-0.5 * min(step^-0.5, step * warmup^-1.5). step 0 is a ContractError.
double learning_rate(std::size_t step, std::size_t warmup, std::size_t dim, double scale = 1.0);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-9;
};

// Adam over a fixed list of trainable parameters. Frozen parameters never get
// moment buffers.
template <typename T>
class Adam {
 public:
  explicit Adam(ParameterSet<T>& params, AdamConfig config = {});

  // Applies one update with the gradients currently stored on the parameters.
  // Parameters without a gradient are left untouched.
  void step(double lr);

  std::size_t steps() const { return steps_; }
  bool has_state(const std::string& name) const { return state_.contains(name); }
  std::size_t state_size() const { return state_.size(); }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  ParameterSet<T>& params_;
  AdamConfig config_;
  std::size_t steps_ = 0;
  std::unordered_map<std::string, Moments> state_;
};

// Rescales trainable gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm);

// Marks exactly the parameters of `trainable` partitions as requiring gradients.
template <typename T>
void set_trainable(ParameterSet<T>& params, const std::set<Partition>& trainable);

// Mean over non-PAD target tokens of -log P(y_j | ...).
template <typename T>
Tensor<T> nll_loss(const Batch& batch, const DocTransformer<T>& model, ForwardMode mode,
                   const Dropout& drop = {}, double label_smoothing = 0.0);

// Token-weighted mean loss over `examples`, without dropout or gradients.
template <typename T>
double evaluate_loss(const DocTransformer<T>& model, const std::vector<TrainingExample>& examples,
                     ForwardMode mode, std::size_t token_budget = 4096);

// Gate activations over every non-padding position of `examples`.
template <typename T>
std::vector<T> collect_gate_values(const DocTransformer<T>& model,
                                   const std::vector<TrainingExample>& examples,
                                   std::size_t token_budget = 4096);

struct TrainOptions {
  std::size_t max_steps = 1000;
  std::size_t max_epochs = 0;  // 0: bounded by max_steps only
  std::size_t token_budget = 2048;
  std::size_t warmup = 400;
  double lr_scale = 1.0;
  double clip_norm = 5.0;
  double label_smoothing = 0.0;
  std::uint64_t seed = 1;
  std::size_t log_interval = 10;
  std::size_t eval_interval = 0;  // dev evaluation cadence in steps; 0: at the end only
  bool keep_best = false;         // restore the lowest-dev-loss weights at the end
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0;
  double learning_rate = 0;
  double tokens_per_second = 0;
};

struct TrainResult {
  std::size_t steps = 0;
  std::vector<StepRecord> log;          // one record per log_interval steps
  std::vector<double> epoch_losses;     // mean training loss per epoch
  std::optional<double> dev_loss;       // of the returned weights
  std::optional<double> best_dev_loss;
  double tokens_per_second = 0;         // target tokens over wall time of the steps
  std::size_t target_tokens = 0;
};

// Generic loop: optimizes the `trainable` partitions in `mode`. A non-finite
// loss throws NumericError.
template <typename T>
TrainResult train(DocTransformer<T>& model, const std::vector<TrainingExample>& examples,
                  ForwardMode mode, const std::set<Partition>& trainable,
                  const TrainOptions& options,
                  const std::vector<TrainingExample>* dev = nullptr,
                  const std::function<void(const StepRecord&)>& on_log = {});

// Step one: sentence pairs of every document (plus any extra sentence-level
// documents), document modules inactive, theta_s only.
template <typename T>
TrainResult train_step_one(DocTransformer<T>& model, const std::vector<ParallelDocument>& documents,
                           const TrainOptions& options,
                           const std::vector<ParallelDocument>* dev = nullptr,
                           const std::function<void(const StepRecord&)>& on_log = {});

// Step two: theta_s loaded from `step_one` and frozen, theta_d trained on
// document examples with their context window.
template <typename T>
TrainResult train_step_two(DocTransformer<T>& model, const Checkpoint& step_one,
                           const std::vector<ParallelDocument>& documents,
                           const TrainOptions& options,
                           const std::vector<ParallelDocument>* dev = nullptr,
                           const std::function<void(const StepRecord&)>& on_log = {});

// Both partitions from scratch on document examples.
template <typename T>
TrainResult direct_joint_train(DocTransformer<T>& model,
                               const std::vector<ParallelDocument>& documents,
                               const TrainOptions& options,
                               const std::vector<ParallelDocument>* dev = nullptr,
                               const std::function<void(const StepRecord&)>& on_log = {});

enum class TrainStage { one, two, joint };

std::string_view stage_name(TrainStage stage);
TrainStage parse_stage(std::string_view text);

// Everything a training run needs besides the model configuration. Stored as
// key=value lines; every key has a matching dashed command-line flag.
struct TrainPlan {
  TrainStage stage = TrainStage::one;
  std::string train_source, train_target;        // document corpus
  std::string sentence_source, sentence_target;  // optional extra sentence corpus (step one)
  std::string dev_source, dev_target;
  std::string init_checkpoint;                   // required by step two
  std::string output = "model.ckpt";
  std::string metrics;                           // CSV metrics log; empty: none
  std::size_t vocab_size = 8000;
  TrainOptions options;

  void set(std::string_view key, std::string_view value);
  static bool is_key(std::string_view key);
  std::string to_text() const;
  static TrainPlan from_text(std::string_view text);

  // ConfigError on missing corpus paths or a step-two plan without checkpoint.
  void validate() const;
};

// Keeps large freed blocks inside the heap instead of returning them to the
// system, so per-step activation and gradient buffers do not page-fault anew
// on every step. Process-wide; call once from main. No-op outside glibc.
void tune_allocator();

std::string metrics_header();
std::string metrics_line(const StepRecord& record);

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace docnmt
