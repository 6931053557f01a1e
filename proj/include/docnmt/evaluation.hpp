#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "docnmt/corpus.hpp"

namespace docnmt {

struct BleuReport {
  double score = 0.0;                   // 0..100
  std::array<double, 4> precisions{};   // 0..1
  double brevity_penalty = 0.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};

  // "BLEU = 66.87, 80.00/75.00/66.67/50.00, BP = 1.00"
  std::string to_string() const;
};

// Corpus-level BLEU-4: clipped n-gram counts, brevity penalty, tokens
// lower-cased before matching, no smoothing. Unequal line counts are a
// ContractError.
BleuReport bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references);
BleuReport bleu(const std::vector<std::string>& candidates, const std::vector<std::string>& references);

// A synthetic document corpus in which some source words have two possible
// renderings. The right one is fixed by a cue word of the document's sense
// that appears in one of the preceding `window` sentences and never in the
// sentence itself.
//
// Source vocabulary: fillers "s<i>", ambiguous words "amb<i>", cues
// "cueA<i>" / "cueB<i>". Targets: "t<i>", "amb<i>_a" / "amb<i>_b", "CUEA<i>" /
// "CUEB<i>".
struct SyntheticTask {
  std::uint64_t seed = 7;
  std::size_t fillers = 500;
  std::size_t ambiguous = 6;
  std::size_t cues = 4;  // per sense
  std::size_t window = 2;
  std::size_t min_sentences = 4;
  std::size_t max_sentences = 6;
  std::size_t min_length = 3;  // filler words per sentence
  std::size_t max_length = 7;
  double ambiguous_rate = 0.6;  // chance a sentence with a cue in reach is ambiguous
  double zipf = 1.2;            // filler frequency exponent
};

enum class WordKind { filler, ambiguous, cue, other };

struct WordInfo {
  WordKind kind = WordKind::other;
  std::size_t index = 0;
  int sense = -1;  // cues only: 0 for A, 1 for B
};

WordInfo classify_source_word(const std::string& word);
std::string render_target_word(const std::string& source_word, int sense);

// Seed-deterministic; document ids start at `first_id`.
std::vector<TextDocument> generate_synthetic_corpus(const SyntheticTask& task, std::size_t documents,
                                                    std::size_t first_id = 0);

// Sentence-level pairs for step one: single-sentence documents of fillers and
// cues only (no ambiguous words).
std::vector<TextDocument> generate_sentence_corpus(const SyntheticTask& task, std::size_t sentences);

// Sense required for ambiguous words in sentence k (0-based) of `source`:
// the sense of cues found in the `window` preceding sentences, or -1.
int context_sense(const std::vector<Sentence>& source, std::size_t k, std::size_t window);

struct DisambiguationScore {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

// Every ambiguous source word counts once; it is correct when its
// context-dictated rendering appears in the translation and the other
// rendering does not. `translations` mirrors the documents of `corpus`.
DisambiguationScore disambiguation_accuracy(const std::vector<std::vector<Sentence>>& translations,
                                            const std::vector<TextDocument>& corpus,
                                            std::size_t window);

}  // namespace docnmt
