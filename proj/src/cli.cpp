#include "docnmt/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "docnmt/checkpoint.hpp"
#include "docnmt/decoding.hpp"
#include "docnmt/errors.hpp"

namespace docnmt {

// ---------------------------------------------------------------------------
// Integration and ablation grid

Integration parse_integration(std::string_view text) {
  if (text == "none") return Integration::none;
  if (text == "encoder") return Integration::encoder;
  if (text == "decoder") return Integration::decoder;
  if (text == "both") return Integration::both;
  throw ConfigError("unknown integration '" + std::string(text) +
                    "' (expected none, encoder, decoder or both)");
}

std::string_view integration_name(Integration integration) {
  switch (integration) {
    case Integration::none: return "none";
    case Integration::encoder: return "encoder";
    case Integration::decoder: return "decoder";
    case Integration::both: return "both";
  }
  return "none";
}

void apply_integration(ModelConfig& config, Integration integration) {
  config.integrate_encoder = integration == Integration::encoder || integration == Integration::both;
  config.integrate_decoder = integration == Integration::decoder || integration == Integration::both;
}

std::string AblationPoint::label() const {
  return "window=" + std::to_string(window) + " layers=" + std::to_string(context_layers) +
         " integration=" + std::string(integration_name(integration)) +
         " gating=" + (gating ? "on" : "off");
}

std::vector<AblationPoint> AblationGrid::expand() const {
  if (windows.empty() || context_layers.empty() || integrations.empty() || gating.empty()) {
    throw ConfigError("ablate: the grid is empty; every axis needs at least one value");
  }
  std::vector<AblationPoint> points;
  for (std::size_t w : windows)
    for (std::size_t n : context_layers)
      for (Integration i : integrations)
        for (bool g : gating) points.push_back({w, n, i, g});
  return points;
}

std::string ablation_header() {
  return "window,context_layers,integration,gating,dev_loss,disambiguation_accuracy,bleu";
}

std::string ablation_line(const AblationRow& row) {
  char buf[96];
  std::string acc = "NA";
  if (row.disambiguation) {
    std::snprintf(buf, sizeof(buf), "%.4f", *row.disambiguation);
    acc = buf;
  }
  std::snprintf(buf, sizeof(buf), "%.6f", row.dev_loss);
  const AblationPoint& p = row.point;
  std::string line = std::to_string(p.window) + "," + std::to_string(p.context_layers) + "," +
                     std::string(integration_name(p.integration)) + "," + (p.gating ? "on" : "off") +
                     "," + buf + "," + acc + ",";
  std::snprintf(buf, sizeof(buf), "%.2f", row.bleu);
  return line + buf;
}

namespace {

bool has_ambiguous_words(const std::vector<TextDocument>& docs) {
  for (const auto& d : docs)
    for (const auto& s : d.source)
      for (const auto& w : s)
        if (classify_source_word(w).kind == WordKind::ambiguous) return true;
  return false;
}

std::vector<std::vector<Sentence>> translate_corpus(const DocTransformer<float>& model,
                                                    const std::vector<ParallelDocument>& docs,
                                                    const Vocabulary& target_vocab,
                                                    ForwardMode mode, const DecodeConfig& config,
                                                    std::size_t window) {
  std::vector<std::vector<Sentence>> out;
  for (const auto& doc : docs) {
    std::vector<Sentence> sentences;
    for (const auto& ids : translate_document(model, doc.source, mode, config, window, worker_threads())) {
      sentences.push_back(target_vocab.decode(ids));
    }
    out.push_back(std::move(sentences));
  }
  return out;
}

}  // namespace

std::vector<AblationRow> run_ablation(const AblationData& data, const AblationGrid& grid,
                                      const AblationSettings& settings, std::ostream* progress) {
  const auto points = grid.expand();
  if (data.train.empty() || data.dev.empty()) {
    throw ConfigError("ablate: need training and development documents");
  }
  std::vector<TextDocument> all = data.train;
  all.insert(all.end(), data.sentences.begin(), data.sentences.end());
  const Vocabulary sv = build_vocabulary(all, CorpusSide::source, settings.vocab_size);
  const Vocabulary tv = build_vocabulary(all, CorpusSide::target, settings.vocab_size);
  const auto train = encode_corpus(data.train, sv, tv);
  const auto everything = encode_corpus(all, sv, tv);
  const auto dev = encode_corpus(data.dev, sv, tv);

  ModelConfig base = settings.base;
  base.source_vocab = sv.size();
  base.target_vocab = tv.size();
  base.validate();
  const std::uint64_t seed = settings.step_one.seed;

  if (progress) *progress << "ablate: training the sentence-level model\n";
  DocTransformer<float> sentence_model(base, seed);
  train_step_one(sentence_model, everything, settings.step_one);
  const Checkpoint step_one = make_checkpoint(sentence_model, sv, tv, {Partition::sentence});

  DecodeConfig decode;
  decode.beam_size = settings.beam;
  decode.alpha = settings.alpha;
  const bool synthetic = has_ambiguous_words(data.dev);
  std::vector<Sentence> references;
  for (const auto& d : data.dev) references.insert(references.end(), d.target.begin(), d.target.end());

  std::vector<AblationRow> rows;
  for (const auto& point : points) {
    if (progress) *progress << "ablate: " << point.label() << "\n";
    ModelConfig config = base;
    config.context_window = point.window;
    config.context_layers = point.context_layers;
    config.gating = point.gating;
    apply_integration(config, point.integration);
    config.validate();
    DocTransformer<float> model(config, seed);
    if (point.integration == Integration::none) {
      load_parameters(model, step_one, {Partition::sentence});
    } else {
      train_step_two(model, step_one, train, settings.step_two);
    }
    AblationRow row;
    row.point = point;
    row.dev_loss = evaluate_loss(model, document_examples(dev, point.window), ForwardMode::document,
                                 settings.step_two.token_budget);
    const auto translations = translate_corpus(model, dev, tv, ForwardMode::document, decode, point.window);
    if (synthetic) {
      row.disambiguation = disambiguation_accuracy(translations, data.dev, data.sense_window).accuracy();
    }
    std::vector<Sentence> candidates;
    for (const auto& d : translations) candidates.insert(candidates.end(), d.begin(), d.end());
    row.bleu = bleu(candidates, references).score;
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Command line

namespace {

using Settings = std::map<std::string, std::string>;

struct Key {
  const char* name;
  const char* help;
};

const std::vector<Key> kGlobalKeys = {
    {"seed", "random seed (initialisation, batching, dropout, synthetic data)"},
    {"profile", "model size profile: desk or paper"},
};

const std::vector<Key> kModelKeys = {
    {"hidden", "model dimension"},
    {"filter", "feed-forward inner dimension"},
    {"heads", "attention heads"},
    {"encoder_layers", "source encoder layers"},
    {"decoder_layers", "decoder layers"},
    {"context_layers", "context encoder layers"},
    {"context_window", "preceding source sentences used as context"},
    {"integrate_encoder", "context attention in the source encoder (true/false)"},
    {"integrate_decoder", "context attention in the decoder (true/false)"},
    {"gating", "gate the context sub-layers (true/false)"},
    {"dropout", "dropout rate"},
};

const std::vector<Key> kPlanKeys = {
    {"train_source", "training document corpus, source side"},
    {"train_target", "training document corpus, target side"},
    {"sentence_source", "extra sentence-level corpus, source side"},
    {"sentence_target", "extra sentence-level corpus, target side"},
    {"dev_source", "development corpus, source side"},
    {"dev_target", "development corpus, target side"},
    {"init_checkpoint", "sentence-level checkpoint to start from"},
    {"output", "output path"},
    {"metrics", "CSV file receiving one line per log interval"},
    {"vocab_size", "maximum vocabulary size per language"},
    {"max_steps", "optimizer steps"},
    {"max_epochs", "epoch limit, 0 for none"},
    {"token_budget", "padded tokens per batch"},
    {"warmup", "warm-up steps of the learning-rate schedule"},
    {"lr_scale", "learning-rate multiplier"},
    {"clip_norm", "gradient norm limit"},
    {"label_smoothing", "label smoothing mass"},
    {"log_interval", "steps between metric lines"},
    {"eval_interval", "steps between development evaluations, 0 for the end only"},
    {"keep_best", "keep the weights with the lowest development loss (true/false)"},
};

const std::vector<Key> kDecodeKeys = {
    {"checkpoint", "trained checkpoint"},
    {"input", "source documents, blank-line separated"},
    {"output", "translation output, '-' for standard output"},
    {"beam", "beam size"},
    {"alpha", "length penalty exponent"},
    {"max_length", "generated token limit, 0 for 2 * source length + 10"},
    {"context_window", "preceding source sentences used as context"},
    {"mode", "auto, sentence or document"},
};

const std::vector<Key> kBleuKeys = {
    {"candidate", "system output, one sentence per line"},
    {"reference", "reference translation, one sentence per line"},
};

const std::vector<Key> kSynthKeys = {
    {"synth_fillers", "distinct filler words"},
    {"synth_ambiguous", "distinct ambiguous words"},
    {"synth_cues", "cue words per sense"},
    {"synth_min_sentences", "minimum sentences per document"},
    {"synth_max_sentences", "maximum sentences per document"},
    {"synth_min_length", "minimum filler words per sentence"},
    {"synth_max_length", "maximum filler words per sentence"},
    {"synth_ambiguous_rate", "chance that a sentence with a cue in reach is ambiguous"},
    {"synth_zipf", "filler frequency exponent"},
};

const std::vector<Key> kSynthGenKeys = {
    {"documents", "documents to generate"},
    {"sentences", "extra sentence pairs to generate, written to <output>.sent.*"},
    {"output", "output prefix; writes <output>.src and <output>.tgt"},
    {"context_window", "cue reach in sentences"},
};

const std::vector<Key> kAblateKeys = {
    {"grid_window", "comma-separated context windows"},
    {"grid_context_layers", "comma-separated context encoder depths"},
    {"grid_integration", "comma-separated integrations: none, encoder, decoder, both"},
    {"grid_gating", "comma-separated gating switches: on, off"},
    {"doc_steps", "document-level steps per grid point"},
    {"doc_lr_scale", "document-level learning-rate multiplier"},
    {"beam", "beam size"},
    {"alpha", "length penalty exponent"},
    {"synth_documents", "synthetic training documents when no corpus is given"},
    {"synth_dev_documents", "synthetic development documents"},
    {"synth_sentences", "synthetic sentence pairs for the sentence-level stage"},
};

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

std::string undashed(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

bool known_key(const std::string& key) {
  for (const auto* list : {&kGlobalKeys, &kModelKeys, &kPlanKeys, &kDecodeKeys, &kBleuKeys,
                           &kSynthKeys, &kSynthGenKeys, &kAblateKeys}) {
    for (const Key& k : *list)
      if (key == k.name) return true;
  }
  return false;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t to_count(const std::string& key, const std::string& value) {
  std::size_t n = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, n);
  if (ec != std::errc() || ptr != end || value.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  }
  return n;
}

double to_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> items;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    items.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return items;
}

class Options {
 public:
  explicit Options(Settings values) : values_(std::move(values)) {}

  bool has(const std::string& key) const { return values_.contains(key); }
  std::string text(const std::string& key, const std::string& fallback = "") const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  std::size_t count(const std::string& key, std::size_t fallback) const {
    return has(key) ? to_count(key, text(key)) : fallback;
  }
  double real(const std::string& key, double fallback) const {
    return has(key) ? to_real(key, text(key)) : fallback;
  }
  std::string required(const std::string& key) const {
    if (!has(key) || text(key).empty()) throw ConfigError("missing --" + dashed(key));
    return text(key);
  }
  const Settings& all() const { return values_; }

 private:
  Settings values_;
};

ModelConfig model_config(const Options& opts) {
  ModelConfig config = ModelConfig::profile(opts.text("profile", "desk"));
  for (const Key& k : kModelKeys)
    if (opts.has(k.name)) config.set(k.name, opts.text(k.name));
  return config;
}

TrainPlan train_plan(const Options& opts, TrainStage stage) {
  TrainPlan plan;
  plan.stage = stage;
  for (const Key& k : kPlanKeys)
    if (opts.has(k.name)) plan.set(k.name, opts.text(k.name));
  if (opts.has("seed")) plan.set("seed", opts.text("seed"));
  return plan;
}

SyntheticTask synthetic_task(const Options& opts) {
  SyntheticTask task;
  if (opts.has("seed")) task.seed = opts.count("seed", task.seed);
  task.window = opts.count("context_window", task.window);
  task.fillers = opts.count("synth_fillers", task.fillers);
  task.ambiguous = opts.count("synth_ambiguous", task.ambiguous);
  task.cues = opts.count("synth_cues", task.cues);
  task.min_sentences = opts.count("synth_min_sentences", task.min_sentences);
  task.max_sentences = opts.count("synth_max_sentences", task.max_sentences);
  task.min_length = opts.count("synth_min_length", task.min_length);
  task.max_length = opts.count("synth_max_length", task.max_length);
  task.ambiguous_rate = opts.real("synth_ambiguous_rate", task.ambiguous_rate);
  task.zipf = opts.real("synth_zipf", task.zipf);
  return task;
}

// Writes the metrics CSV as training proceeds and echoes progress.
class MetricsLog {
 public:
  MetricsLog(const std::string& path, std::ostream& progress) : progress_(progress) {
    if (path.empty()) return;
    file_.open(path);
    if (!file_) throw DataError("cannot write metrics file '" + path + "'");
    file_ << metrics_header() << '\n';
  }

  std::function<void(const StepRecord&)> callback() {
    return [this](const StepRecord& r) {
      if (file_.is_open()) file_ << metrics_line(r) << '\n' << std::flush;
      char buf[128];
      std::snprintf(buf, sizeof(buf), "step %zu  loss %.4f  lr %.3g  %.0f tok/s\n", r.step, r.loss,
                    r.learning_rate, r.tokens_per_second);
      progress_ << buf;
    };
  }

 private:
  std::ofstream file_;
  std::ostream& progress_;
};

void report_training(std::ostream& out, TrainStage stage, const TrainResult& result,
                     const std::string& output) {
  char buf[256];
  const double last = result.log.empty() ? (result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back())
                                         : result.log.back().loss;
  std::snprintf(buf, sizeof(buf), "%s: %zu steps, final loss %.4f, %.0f target tokens/s",
                std::string(stage_name(stage)).c_str(), result.steps, last, result.tokens_per_second);
  out << buf;
  if (result.dev_loss) {
    std::snprintf(buf, sizeof(buf), ", dev loss %.4f", *result.dev_loss);
    out << buf;
  }
  out << "\nwrote " << output << '\n';
}

std::vector<TextDocument> load_optional_pair(const std::string& source, const std::string& target,
                                             const char* what) {
  if (source.empty() && target.empty()) return {};
  if (source.empty() || target.empty()) {
    throw ConfigError(std::string(what) + ": give both the source and the target file");
  }
  return load_document_corpus(source, target);
}

int cmd_train(TrainStage stage, const Options& opts, std::ostream& out, std::ostream& err) {
  TrainPlan plan = train_plan(opts, stage);
  plan.validate();
  const auto docs = load_document_corpus(plan.train_source, plan.train_target);
  const auto dev_text = load_optional_pair(plan.dev_source, plan.dev_target, "development corpus");
  MetricsLog metrics(plan.metrics, err);

  Vocabulary sv, tv;
  ModelConfig config;
  std::optional<Checkpoint> init;
  if (stage == TrainStage::two) {
    init = read_checkpoint(plan.init_checkpoint);
    if (!init->partitions().contains(Partition::sentence)) {
      throw ConfigError("'" + plan.init_checkpoint + "' holds no sentence-level parameters");
    }
    sv = init->source_vocab;
    tv = init->target_vocab;
    config = init->config;
    for (const Key& k : kModelKeys)
      if (opts.has(k.name)) config.set(k.name, opts.text(k.name));
  } else {
    std::vector<TextDocument> all = docs;
    if (stage == TrainStage::one) {
      const auto extra = load_optional_pair(plan.sentence_source, plan.sentence_target, "sentence corpus");
      all.insert(all.end(), extra.begin(), extra.end());
    }
    sv = build_vocabulary(all, CorpusSide::source, plan.vocab_size);
    tv = build_vocabulary(all, CorpusSide::target, plan.vocab_size);
    config = model_config(opts);
  }
  config.source_vocab = sv.size();
  config.target_vocab = tv.size();
  config.validate();

  const auto dev = encode_corpus(dev_text, sv, tv);
  const auto* dev_ptr = dev.empty() ? nullptr : &dev;
  DocTransformer<float> model(config, plan.options.seed);
  TrainResult result;
  Checkpoint checkpoint;
  switch (stage) {
    case TrainStage::one: {
      std::vector<TextDocument> all = docs;
      const auto extra = load_optional_pair(plan.sentence_source, plan.sentence_target, "sentence corpus");
      all.insert(all.end(), extra.begin(), extra.end());
      result = train_step_one(model, encode_corpus(all, sv, tv), plan.options, dev_ptr,
                              metrics.callback());
      checkpoint = make_checkpoint(model, sv, tv, {Partition::sentence});
      break;
    }
    case TrainStage::two:
      result = train_step_two(model, *init, encode_corpus(docs, sv, tv), plan.options, dev_ptr,
                              metrics.callback());
      checkpoint = make_checkpoint(model, sv, tv);
      break;
    case TrainStage::joint:
      result = direct_joint_train(model, encode_corpus(docs, sv, tv), plan.options, dev_ptr,
                                  metrics.callback());
      checkpoint = make_checkpoint(model, sv, tv);
      break;
  }
  write_checkpoint(plan.output, checkpoint);
  report_training(out, stage, result, plan.output);
  return kExitOk;
}

void print_documents(std::ostream& os, const std::vector<std::vector<Sentence>>& docs) {
  for (std::size_t d = 0; d < docs.size(); ++d) {
    if (d) os << '\n';
    for (const auto& s : docs[d]) os << join(s) << '\n';
  }
}

int cmd_translate(const Options& opts, std::ostream& out, std::ostream& err) {
  const Checkpoint checkpoint = read_checkpoint(opts.required("checkpoint"));
  const auto input = load_documents(opts.required("input"));
  const bool has_document = checkpoint.partitions().contains(Partition::document) &&
                            checkpoint.config.uses_context();
  const std::string mode_name = opts.text("mode", "auto");
  ForwardMode mode;
  if (mode_name == "auto") {
    mode = has_document ? ForwardMode::document : ForwardMode::sentence;
  } else if (mode_name == "sentence") {
    mode = ForwardMode::sentence;
  } else if (mode_name == "document") {
    if (!has_document) throw ConfigError("translate: checkpoint has no document-level parameters");
    mode = ForwardMode::document;
  } else {
    throw ConfigError("translate: unknown mode '" + mode_name + "'");
  }

  DocTransformer<float> model(checkpoint.config, 0);
  load_parameters(model, checkpoint,
                  has_document ? std::set<Partition>{Partition::sentence, Partition::document}
                               : std::set<Partition>{Partition::sentence});
  DecodeConfig decode;
  decode.beam_size = opts.count("beam", decode.beam_size);
  decode.alpha = opts.real("alpha", decode.alpha);
  decode.max_length = opts.count("max_length", decode.max_length);
  decode.validate();
  const std::size_t window = opts.count("context_window", checkpoint.config.context_window);
  const std::size_t threads = worker_threads();

  std::vector<std::vector<Sentence>> output;
  output.reserve(input.size());
  for (std::size_t d = 0; d < input.size(); ++d) {
    std::vector<TokenIds> ids;
    for (const auto& s : input[d]) ids.push_back(checkpoint.source_vocab.encode(s));
    std::vector<Sentence> translated;
    for (const auto& t : translate_document(model, ids, mode, decode, window, threads)) {
      translated.push_back(checkpoint.target_vocab.decode(t));
    }
    output.push_back(std::move(translated));
    err << "translated document " << d + 1 << "/" << input.size() << '\n';
  }
  const std::string path = opts.text("output", "-");
  if (path == "-") {
    print_documents(out, output);
  } else {
    write_documents(path, output);
  }
  return kExitOk;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

bool blank(const std::string& line) { return line.find_first_not_of(" \t") == std::string::npos; }

int cmd_bleu(const Options& opts, std::ostream& out) {
  const auto cand = read_lines(opts.required("candidate"));
  const auto ref = read_lines(opts.required("reference"));
  if (cand.size() != ref.size()) {
    throw DataError("bleu: candidate has " + std::to_string(cand.size()) +
                    " lines but reference has " + std::to_string(ref.size()));
  }
  std::vector<std::string> c, r;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (blank(cand[i]) && blank(ref[i])) continue;  // document separators
    c.push_back(cand[i]);
    r.push_back(ref[i]);
  }
  out << bleu(c, r).to_string() << '\n';
  return kExitOk;
}

void write_corpus(const std::string& prefix, const std::vector<TextDocument>& docs) {
  std::vector<std::vector<Sentence>> src, tgt;
  for (const auto& d : docs) {
    src.push_back(d.source);
    tgt.push_back(d.target);
  }
  write_documents(prefix + ".src", src);
  write_documents(prefix + ".tgt", tgt);
}

// Sentence pairs go out as one document so no blank lines separate them.
TextDocument merge_documents(const std::vector<TextDocument>& docs) {
  TextDocument merged;
  for (const auto& d : docs) {
    merged.source.insert(merged.source.end(), d.source.begin(), d.source.end());
    merged.target.insert(merged.target.end(), d.target.begin(), d.target.end());
  }
  return merged;
}

int cmd_synth_gen(const Options& opts, std::ostream& out) {
  const SyntheticTask task = synthetic_task(opts);
  const std::string prefix = opts.text("output", "synthetic");
  const std::size_t documents = opts.count("documents", 100);
  const auto docs = generate_synthetic_corpus(task, documents);
  write_corpus(prefix, docs);
  out << "wrote " << docs.size() << " documents to " << prefix << ".src/.tgt\n";
  if (const std::size_t sentences = opts.count("sentences", 0); sentences > 0) {
    write_corpus(prefix + ".sent", {merge_documents(generate_sentence_corpus(task, sentences))});
    out << "wrote " << sentences << " sentence pairs to " << prefix << ".sent.src/.tgt\n";
  }
  return kExitOk;
}

AblationGrid ablation_grid(const Options& opts, const ModelConfig& base) {
  AblationGrid grid;
  grid.windows = {base.context_window};
  grid.context_layers = {base.context_layers};
  if (opts.has("grid_window")) {
    grid.windows.clear();
    for (const auto& v : split_list(opts.text("grid_window"))) grid.windows.push_back(to_count("grid_window", v));
  }
  if (opts.has("grid_context_layers")) {
    grid.context_layers.clear();
    for (const auto& v : split_list(opts.text("grid_context_layers")))
      grid.context_layers.push_back(to_count("grid_context_layers", v));
  }
  if (opts.has("grid_integration")) {
    grid.integrations.clear();
    for (const auto& v : split_list(opts.text("grid_integration"))) grid.integrations.push_back(parse_integration(v));
  }
  if (opts.has("grid_gating")) {
    grid.gating.clear();
    for (const auto& v : split_list(opts.text("grid_gating"))) {
      if (v == "on") grid.gating.push_back(true);
      else if (v == "off") grid.gating.push_back(false);
      else grid.gating.push_back(parse_bool(v));
    }
  }
  return grid;
}

int cmd_ablate(const Options& opts, std::ostream& out, std::ostream& err) {
  const TrainPlan plan = train_plan(opts, TrainStage::one);
  AblationSettings settings;
  settings.base = model_config(opts);
  settings.step_one = plan.options;
  settings.step_two = plan.options;
  settings.step_two.max_steps = opts.count("doc_steps", plan.options.max_steps);
  settings.step_two.lr_scale = opts.real("doc_lr_scale", 0.4);
  settings.vocab_size = plan.vocab_size;
  settings.beam = opts.count("beam", settings.beam);
  settings.alpha = opts.real("alpha", settings.alpha);
  const AblationGrid grid = ablation_grid(opts, settings.base);
  grid.expand();  // reject an empty grid before any data work

  AblationData data;
  if (!plan.train_source.empty() || !plan.train_target.empty()) {
    data.train = load_document_corpus(plan.train_source, plan.train_target);
    data.sentences = load_optional_pair(plan.sentence_source, plan.sentence_target, "sentence corpus");
    data.dev = load_optional_pair(plan.dev_source, plan.dev_target, "development corpus");
    if (data.dev.empty()) throw ConfigError("ablate: a development corpus is required");
  } else {
    SyntheticTask task = synthetic_task(opts);
    if (!opts.has("seed")) task.seed = plan.options.seed;
    data.train = generate_synthetic_corpus(task, opts.count("synth_documents", 200));
    data.sentences = generate_sentence_corpus(task, opts.count("synth_sentences", 20000));
    SyntheticTask dev_task = task;
    dev_task.seed = task.seed + 1000;
    data.dev = generate_synthetic_corpus(dev_task, opts.count("synth_dev_documents", 50), data.train.size());
    data.sense_window = task.window;
  }
  const auto rows = run_ablation(data, grid, settings, &err);

  std::ofstream file;
  std::ostream* sink = &out;
  if (opts.has("output") && opts.text("output") != "-") {
    file.open(opts.text("output"));
    if (!file) throw DataError("cannot write '" + opts.text("output") + "'");
    sink = &file;
  }
  *sink << ablation_header() << '\n';
  for (const auto& row : rows) *sink << ablation_line(row) << '\n';
  return kExitOk;
}

struct Command {
  Command(std::string n, std::string h, std::vector<const std::vector<Key>*> k)
      : name(std::move(n)), help(std::move(h)), keys(std::move(k)) {}

  std::string name;
  std::string help;
  std::vector<const std::vector<Key>*> keys;
  CLI::App* app = nullptr;
  Settings flags;  // filled by the parser
  std::map<std::string, CLI::Option*> options;
};

Settings merged_settings(const Command& command, const std::string& config_path, const Settings& global_flags,
                         const std::map<std::string, CLI::Option*>& global_options) {
  Settings settings;
  if (!config_path.empty()) {
    for (const auto& [raw, value] : parse_key_values(read_text(config_path))) {
      const std::string key = undashed(raw);
      if (!known_key(key)) throw ConfigError("config file: unknown key '" + raw + "'");
      settings[key] = value;
    }
  }
  for (const auto& [key, opt] : global_options)
    if (opt->count() > 0) settings[key] = global_flags.at(key);
  for (const auto& [key, opt] : command.options)
    if (opt->count() > 0) settings[key] = command.flags.at(key);
  return settings;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Document-level neural machine translation with a context encoder"};
  app.name("docnmt");
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  Settings global_flags;
  std::map<std::string, CLI::Option*> global_options;
  app.add_option("--config", config_path, "key=value settings file; flags take precedence");
  for (const Key& k : kGlobalKeys) {
    global_options[k.name] = app.add_option("--" + dashed(k.name), global_flags[k.name], k.help);
  }

  std::vector<Command> commands = {
      {"train-sentence", "train the sentence-level model (first stage)", {&kModelKeys, &kPlanKeys}},
      {"train-document", "train the document-level modules on top of a sentence-level checkpoint",
       {&kModelKeys, &kPlanKeys}},
      {"train-joint", "train every parameter at once on document data", {&kModelKeys, &kPlanKeys}},
      {"translate", "translate documents with a checkpoint", {&kDecodeKeys}},
      {"bleu", "corpus BLEU of a candidate file against a reference file", {&kBleuKeys}},
      {"synth-gen", "write a synthetic context-dependent corpus", {&kSynthGenKeys, &kSynthKeys}},
      {"ablate", "compare context configurations on one dataset",
       {&kModelKeys, &kPlanKeys, &kAblateKeys, &kSynthKeys}},
  };
  for (auto& command : commands) {
    command.app = app.add_subcommand(command.name, command.help);
    for (const auto* list : command.keys) {
      for (const Key& k : *list) {
        if (command.options.contains(k.name)) continue;
        command.options[k.name] = command.app->add_option("--" + dashed(k.name), command.flags[k.name], k.help);
      }
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      if (const auto subs = app.get_subcommands(); !subs.empty()) out << subs.front()->help();
      return kExitOk;
    }
    err << "docnmt: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    for (const auto& command : commands) {
      if (!command.app->parsed()) continue;
      const Options opts(merged_settings(command, config_path, global_flags, global_options));
      if (command.name == "train-sentence") return cmd_train(TrainStage::one, opts, out, err);
      if (command.name == "train-document") return cmd_train(TrainStage::two, opts, out, err);
      if (command.name == "train-joint") return cmd_train(TrainStage::joint, opts, out, err);
      if (command.name == "translate") return cmd_translate(opts, out, err);
      if (command.name == "bleu") return cmd_bleu(opts, out);
      if (command.name == "synth-gen") return cmd_synth_gen(opts, out);
      if (command.name == "ablate") return cmd_ablate(opts, out, err);
    }
  } catch (const NumericError& e) {
    err << "docnmt: numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "docnmt: " << e.what() << '\n';
    return kExitData;
  } catch (const ConfigError& e) {
    err << "docnmt: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "docnmt: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "docnmt: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "docnmt: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace docnmt
