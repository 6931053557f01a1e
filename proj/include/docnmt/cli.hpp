#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "docnmt/config.hpp"
#include "docnmt/corpus.hpp"
#include "docnmt/evaluation.hpp"
#include "docnmt/training.hpp"

namespace docnmt {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

// Entry point of the `docnmt` tool. argv[0] is the program name.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// Integration target of the context sub-layers.
enum class Integration { none, encoder, decoder, both };
Integration parse_integration(std::string_view text);
std::string_view integration_name(Integration integration);
void apply_integration(ModelConfig& config, Integration integration);

struct AblationPoint {
  std::size_t window = 2;
  std::size_t context_layers = 1;
  Integration integration = Integration::both;
  bool gating = true;

  std::string label() const;  // "window=2 layers=1 integration=both gating=on"
};

struct AblationGrid {
  std::vector<std::size_t> windows{2};
  std::vector<std::size_t> context_layers{1};
  std::vector<Integration> integrations{Integration::both};
  std::vector<bool> gating{true};

  // Cartesian product; ConfigError when any axis is empty.
  std::vector<AblationPoint> expand() const;
};

struct AblationRow {
  AblationPoint point;
  double dev_loss = 0.0;
  std::optional<double> disambiguation;  // only for corpora with ambiguous words
  double bleu = 0.0;
};

struct AblationData {
  std::vector<TextDocument> train;
  std::vector<TextDocument> sentences;  // extra step-one corpus, may be empty
  std::vector<TextDocument> dev;
  std::size_t sense_window = 2;  // cue reach of a synthetic corpus, for scoring
};

struct AblationSettings {
  ModelConfig base;            // dimensions shared by every grid point
  TrainOptions step_one;
  TrainOptions step_two;
  std::size_t vocab_size = 8000;
  std::size_t beam = 4;
  double alpha = 0.6;
};

// Trains one sentence-level model, then a document-level stage for every grid
// point on top of it. The integration=none point is the sentence-level model.
std::vector<AblationRow> run_ablation(const AblationData& data, const AblationGrid& grid,
                                      const AblationSettings& settings, std::ostream* progress);

std::string ablation_header();
std::string ablation_line(const AblationRow& row);

}  // namespace docnmt
