#pragma once

// The pipeline commands. Each reads its prerequisites from, and writes its
// artifacts to, the configured output directory:
//   gen-data  corpus.jsonl, vocab.txt
//   train     model.ulfg, train_log.csv
//   trace     trace_grid.csv, trace_meta.json, critical_layers.json
//   unlearn   unlearned.ulfg, unlearn_stats.csv, alpha_curve.csv
//   evaluate  eval_report.json (unlearned), eval_memorized.json, eval_summary.json
//   pipeline  all of the above, in order

#include <filesystem>
#include <optional>
#include <ostream>
#include <string_view>

#include "ulab/config.hpp"

namespace ulab {

enum class Command : std::uint8_t { kGenData, kTrain, kTrace, kUnlearn, kEvaluate, kPipeline };

const char* command_name(Command c);
std::optional<Command> parse_command(std::string_view s);

// A prerequisite artifact is absent; the message names the file and the
// command that produces it.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace artifacts {
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kVocab = "vocab.txt";
inline constexpr const char* kModel = "model.ulfg";
inline constexpr const char* kTrainLog = "train_log.csv";
inline constexpr const char* kGrid = "trace_grid.csv";
inline constexpr const char* kTraceMeta = "trace_meta.json";
inline constexpr const char* kCritical = "critical_layers.json";
inline constexpr const char* kUnlearned = "unlearned.ulfg";
inline constexpr const char* kStats = "unlearn_stats.csv";
inline constexpr const char* kAlphaCurve = "alpha_curve.csv";
inline constexpr const char* kReport = "eval_report.json";
inline constexpr const char* kMemorizedReport = "eval_memorized.json";
inline constexpr const char* kSummary = "eval_summary.json";
}  // namespace artifacts

// Progress goes to `log`; artifacts only under config.output_dir.
void run_command(Command command, const RunConfig& config, std::ostream& log);

// (delta_l, alpha) rows over [lo, hi] at step 0.01, alpha from an epoch >= 1.
void emit_alpha_curve(const AlphaSchedule& schedule, double lo, double hi,
                      const std::filesystem::path& path);

}  // namespace ulab
