#include "docnmt/evaluation.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>

#include "docnmt/errors.hpp"

namespace docnmt {

// ---------------------------------------------------------------------------
// BLEU

namespace {

using NGram = std::vector<std::string>;

std::map<NGram, std::size_t> count_ngrams(const Sentence& words, std::size_t n) {
  std::map<NGram, std::size_t> counts;
  if (words.size() < n) return counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    ++counts[NGram(words.begin() + static_cast<std::ptrdiff_t>(i),
                   words.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

Sentence lower(const Sentence& words) {
  Sentence out;
  out.reserve(words.size());
  for (const auto& w : words) {
    std::string s = w;
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

std::string BleuReport::to_string() const {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "BLEU = %.2f, %.2f/%.2f/%.2f/%.2f, BP = %.2f", score,
                100.0 * precisions[0], 100.0 * precisions[1], 100.0 * precisions[2],
                100.0 * precisions[3], brevity_penalty);
  return buf;
}

BleuReport bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references) {
  if (candidates.size() != references.size()) {
    throw ContractError("bleu: " + std::to_string(candidates.size()) + " candidate lines vs " +
                        std::to_string(references.size()) + " reference lines");
  }
  BleuReport report;
  for (std::size_t line = 0; line < candidates.size(); ++line) {
    const Sentence cand = lower(candidates[line]);
    const Sentence ref = lower(references[line]);
    report.candidate_length += cand.size();
    report.reference_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cand_counts = count_ngrams(cand, n);
      const auto ref_counts = count_ngrams(ref, n);
      for (const auto& [gram, count] : cand_counts) {
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) report.matches[n - 1] += std::min(count, it->second);
      }
      if (cand.size() >= n) report.totals[n - 1] += cand.size() - n + 1;
    }
  }
  double log_sum = 0.0;
  bool zero = report.candidate_length == 0;
  for (std::size_t n = 0; n < 4; ++n) {
    report.precisions[n] = report.totals[n] == 0
                               ? 0.0
                               : static_cast<double>(report.matches[n]) / report.totals[n];
    if (report.matches[n] == 0) zero = true;
    else log_sum += std::log(report.precisions[n]);
  }
  if (report.candidate_length == 0) {
    report.brevity_penalty = 0.0;
  } else if (report.candidate_length >= report.reference_length) {
    report.brevity_penalty = 1.0;
  } else {
    report.brevity_penalty = std::exp(1.0 - static_cast<double>(report.reference_length) /
                                                 static_cast<double>(report.candidate_length));
  }
  report.score = zero ? 0.0 : 100.0 * report.brevity_penalty * std::exp(log_sum / 4.0);
  return report;
}

BleuReport bleu(const std::vector<std::string>& candidates,
                const std::vector<std::string>& references) {
  std::vector<Sentence> c, r;
  for (const auto& s : candidates) c.push_back(tokenize(s));
  for (const auto& s : references) r.push_back(tokenize(s));
  return bleu(c, r);
}

// ---------------------------------------------------------------------------
// Synthetic task

namespace {

bool parse_index(std::string_view digits, std::size_t& out) {
  if (digits.empty()) return false;
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out);
  return ec == std::errc() && ptr == digits.data() + digits.size();
}

std::string filler(std::size_t i) { return "s" + std::to_string(i); }
std::string ambiguous_word(std::size_t i) { return "amb" + std::to_string(i); }
std::string cue(int sense, std::size_t i) {
  return std::string(sense == 0 ? "cueA" : "cueB") + std::to_string(i);
}

class Generator {
 public:
  Generator(const SyntheticTask& task, std::uint64_t seed) : task_(task), rng_(seed) {
    if (task.fillers == 0 || task.ambiguous == 0 || task.cues == 0) {
      throw ConfigError("synthetic task: fillers, ambiguous words and cues must be nonzero");
    }
    if (task.min_sentences < 2 || task.max_sentences < task.min_sentences) {
      throw ConfigError("synthetic task: need 2 <= min_sentences <= max_sentences");
    }
    if (task.max_length < task.min_length || task.window == 0) {
      throw ConfigError("synthetic task: bad length range or zero window");
    }
    std::vector<double> weights(task.fillers);
    for (std::size_t i = 0; i < task.fillers; ++i) {
      weights[i] = 1.0 / std::pow(static_cast<double>(i + 1), task.zipf);
    }
    filler_dist_ = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
  }

  std::size_t uniform(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }
  bool chance(double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < p; }

  Sentence fillers() {
    Sentence words;
    const std::size_t n = uniform(task_.min_length, task_.max_length);
    for (std::size_t i = 0; i < n; ++i) words.push_back(filler(filler_dist_(rng_)));
    return words;
  }

  // Inserts `word` at a uniformly chosen position.
  void insert(Sentence& words, std::string word) {
    const std::size_t at = uniform(0, words.size());
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(at), std::move(word));
  }

  Sentence cue_sentence(int sense) {
    Sentence s = fillers();
    insert(s, cue(sense, uniform(0, task_.cues - 1)));
    return s;
  }

  Sentence ambiguous_sentence() {
    Sentence s = fillers();
    insert(s, ambiguous_word(uniform(0, task_.ambiguous - 1)));
    return s;
  }

  const SyntheticTask& task() const { return task_; }

 private:
  const SyntheticTask& task_;
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> filler_dist_;
};

Sentence render(const Sentence& source, int sense) {
  Sentence out;
  out.reserve(source.size());
  for (const auto& w : source) out.push_back(render_target_word(w, sense));
  return out;
}

}  // namespace

WordInfo classify_source_word(const std::string& word) {
  std::size_t index = 0;
  const std::string_view w(word);
  if (w.starts_with("amb") && parse_index(w.substr(3), index)) return {WordKind::ambiguous, index, -1};
  if (w.starts_with("cueA") && parse_index(w.substr(4), index)) return {WordKind::cue, index, 0};
  if (w.starts_with("cueB") && parse_index(w.substr(4), index)) return {WordKind::cue, index, 1};
  if (w.starts_with("s") && parse_index(w.substr(1), index)) return {WordKind::filler, index, -1};
  return {};
}

std::string render_target_word(const std::string& source_word, int sense) {
  const WordInfo info = classify_source_word(source_word);
  switch (info.kind) {
    case WordKind::filler: return "t" + std::to_string(info.index);
    case WordKind::cue: return (info.sense == 0 ? "CUEA" : "CUEB") + std::to_string(info.index);
    case WordKind::ambiguous:
      if (sense < 0) throw ContractError("synthetic task: ambiguous word '" + source_word + "' without sense");
      return ambiguous_word(info.index) + (sense == 0 ? "_a" : "_b");
    case WordKind::other: break;
  }
  return source_word;
}

std::vector<TextDocument> generate_synthetic_corpus(const SyntheticTask& task, std::size_t documents,
                                                    std::size_t first_id) {
  if (documents == 0) throw ContractError("generate_synthetic_corpus: need at least one document");
  Generator gen(task, task.seed);
  std::vector<TextDocument> out;
  out.reserve(documents);
  for (std::size_t d = 0; d < documents; ++d) {
    TextDocument doc;
    doc.id = first_id + d;
    const int sense = gen.chance(0.5) ? 1 : 0;
    const std::size_t count = gen.uniform(task.min_sentences, task.max_sentences);
    std::vector<bool> has_cue;
    for (std::size_t k = 0; k < count; ++k) {
      bool cue_in_reach = false;
      for (std::size_t j = k > task.window ? k - task.window : 0; j < k; ++j) {
        cue_in_reach = cue_in_reach || has_cue[j];
      }
      // The second sentence is always ambiguous so every document has one.
      const bool ambiguous = cue_in_reach && (k == 1 || gen.chance(task.ambiguous_rate));
      Sentence src = ambiguous ? gen.ambiguous_sentence() : gen.cue_sentence(sense);
      has_cue.push_back(!ambiguous);
      doc.target.push_back(render(src, sense));
      doc.source.push_back(std::move(src));
    }
    out.push_back(std::move(doc));
  }
  return out;
}

std::vector<TextDocument> generate_sentence_corpus(const SyntheticTask& task, std::size_t sentences) {
  if (sentences == 0) throw ContractError("generate_sentence_corpus: need at least one sentence");
  Generator gen(task, task.seed ^ 0xA5A5A5A5DEADBEEFULL);
  std::vector<TextDocument> out;
  out.reserve(sentences);
  for (std::size_t i = 0; i < sentences; ++i) {
    Sentence src = gen.chance(0.5) ? gen.cue_sentence(gen.chance(0.5) ? 1 : 0) : gen.fillers();
    TextDocument doc;
    doc.id = i;
    doc.target.push_back(render(src, -1));
    doc.source.push_back(std::move(src));
    out.push_back(std::move(doc));
  }
  return out;
}

int context_sense(const std::vector<Sentence>& source, std::size_t k, std::size_t window) {
  int sense = -1;
  for (std::size_t j = k > window ? k - window : 0; j < k && j < source.size(); ++j) {
    for (const auto& w : source[j]) {
      const WordInfo info = classify_source_word(w);
      if (info.kind == WordKind::cue) sense = info.sense;
    }
  }
  return sense;
}

DisambiguationScore disambiguation_accuracy(const std::vector<std::vector<Sentence>>& translations,
                                            const std::vector<TextDocument>& corpus,
                                            std::size_t window) {
  if (translations.size() != corpus.size()) {
    throw ContractError("disambiguation_accuracy: translation and corpus document counts differ");
  }
  DisambiguationScore score;
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    const auto& source = corpus[d].source;
    if (translations[d].size() != source.size()) {
      throw ContractError("disambiguation_accuracy: sentence count mismatch in document " +
                          std::to_string(corpus[d].id));
    }
    for (std::size_t k = 0; k < source.size(); ++k) {
      const int sense = context_sense(source, k, window);
      for (const auto& w : source[k]) {
        if (classify_source_word(w).kind != WordKind::ambiguous) continue;
        ++score.total;
        if (sense < 0) continue;
        const std::string right = render_target_word(w, sense);
        const std::string wrong = render_target_word(w, 1 - sense);
        const auto& out = translations[d][k];
        const bool has_right = std::find(out.begin(), out.end(), right) != out.end();
        const bool has_wrong = std::find(out.begin(), out.end(), wrong) != out.end();
        if (has_right && !has_wrong) ++score.correct;
      }
    }
  }
  return score;
}

}  // namespace docnmt
