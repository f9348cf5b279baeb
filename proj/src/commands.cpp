#include "ulab/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"
#include "ulab/eval.hpp"

namespace ulab {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string fmt(const char* spec, double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string real(double v) { return fmt("%.17g", v); }

fs::path require(const RunConfig& c, const char* name, const char* producer) {
  fs::path p = c.output_dir / name;
  if (!fs::exists(p))
    throw MissingArtifact("missing " + p.string() + "; run the '" + producer + "' command first");
  return p;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

void write_json(const ordered_json& j, const fs::path& p) { open_out(p) << j.dump(2) << '\n'; }

ordered_json read_json(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("cannot parse " + p.string() + ": " + e.what());
  }
}

Corpus load_run_corpus(const RunConfig& c) {
  const fs::path corpus = require(c, artifacts::kCorpus, "gen-data");
  return load_corpus(corpus, Tokenizer::load(require(c, artifacts::kVocab, "gen-data")));
}

Transformer load_model(const RunConfig& c, const char* name, const char* producer, const Corpus& corpus) {
  Transformer m = load_checkpoint(require(c, name, producer));
  if (m.config().vocab_size != corpus.vocab.size())
    throw std::runtime_error(std::string(name) + " was trained for a vocabulary of " +
                             std::to_string(m.config().vocab_size) + " tokens, the corpus has " +
                             std::to_string(corpus.vocab.size()));
  return m;
}

void gen_data(const RunConfig& c, std::ostream& log) {
  const Corpus corpus = generate_corpus(c.corpus_seed_or_base(), c.corpus);
  save_corpus(corpus, c.output_dir / artifacts::kCorpus);
  corpus.vocab.save(c.output_dir / artifacts::kVocab);
  log << "[gen-data] " << corpus.examples.size() << " examples, vocabulary " << corpus.vocab.size() << '\n';
}

void train(const RunConfig& base, std::ostream& log) {
  const Corpus corpus = load_run_corpus(base);
  const RunConfig c = base.resolved(corpus.vocab.size());
  Transformer model(c.model);
  std::ofstream csv = open_out(c.output_dir / artifacts::kTrainLog);
  csv << "epoch,mean_loss,learning_rate,exact_fraction\n";
  const TrainReport report = train_memorization(model, corpus, c.train, [&](const TrainEpoch& e) {
    csv << e.epoch << ',' << real(e.mean_loss) << ',' << real(e.learning_rate) << ','
        << (e.exact_fraction < 0.0 ? std::string("NA") : real(e.exact_fraction)) << '\n';
    log << "[train] epoch " << e.epoch << " loss " << fmt("%.4f", e.mean_loss);
    if (e.exact_fraction >= 0.0) log << " exact " << fmt("%.3f", e.exact_fraction);
    log << '\n';
  });
  save_checkpoint(model, c.output_dir / artifacts::kModel);
  log << "[train] " << (report.converged ? "memorized every training example" : "stopped before full memorization")
      << " after " << report.epochs.size() << " epochs\n";
}

void trace(const RunConfig& base, std::ostream& log) {
  const Corpus corpus = load_run_corpus(base);
  const RunConfig c = base.resolved(corpus.vocab.size());
  const Transformer model = load_model(c, artifacts::kModel, "train", corpus);
  const TraceRun run = run_tracing(model, corpus, c.trace_split, c.trace);
  save_grid_csv(run.grid, c.output_dir / artifacts::kGrid);
  save_trace_metadata(run, c.trace, c.output_dir / artifacts::kTraceMeta);

  const std::size_t L = model.config().num_layers, half = L / 2;
  ordered_json j;
  j["critical_levels"] = run.critical_levels;
  if (!run.critical_levels.empty()) {
    const LayerRange r = critical_block_range(run.critical_levels, L);
    j["block_range"] = {r.lo, r.hi};
  } else {
    j["block_range"] = nullptr;
  }
  j["early_levels"] = {0, half};
  if (run.grid.facts > 0) {
    j["early_mean_subject_effect"] = mean_subject_effect(run.grid, 0, half);
    j["late_mean_subject_effect"] = mean_subject_effect(run.grid, half, L);
  } else {
    j["early_mean_subject_effect"] = nullptr;
    j["late_mean_subject_effect"] = nullptr;
  }
  write_json(j, c.output_dir / artifacts::kCritical);
  std::size_t skipped = 0;
  for (const auto& r : run.results) skipped += r.skipped;
  log << "[trace] " << run.results.size() - skipped << " facts traced, " << skipped << " skipped; critical levels";
  for (std::size_t l : run.critical_levels) log << ' ' << l;
  log << '\n';
}

LayerRange traced_range(const RunConfig& c) {
  const ordered_json j = read_json(require(c, artifacts::kCritical, "trace"));
  if (j.at("block_range").is_null()) throw std::runtime_error("tracing found no critical layers to unlearn");
  return {j.at("block_range").at(0).get<std::size_t>(), j.at("block_range").at(1).get<std::size_t>()};
}

void unlearn(const RunConfig& base, std::ostream& log) {
  const Corpus corpus = load_run_corpus(base);
  RunConfig c = base.resolved(corpus.vocab.size());
  Transformer model = load_model(c, artifacts::kModel, "train", corpus);
  if (!c.unlearn.layer_range) c.unlearn.layer_range = traced_range(c);
  log << "[unlearn] " << method_name(c.unlearn.method) << " on blocks " << c.unlearn.layer_range->lo << '-'
      << c.unlearn.layer_range->hi << '\n';
  std::ofstream csv = open_out(c.output_dir / artifacts::kStats);
  csv << "epoch,forget_loss,retain_loss,delta_l,alpha,forget_knowledge,retain_knowledge\n";
  run_unlearning(model, corpus, c.unlearn, [&](const EpochStats& e) {
    csv << e.epoch << ',' << real(e.forget_loss) << ',' << real(e.retain_loss) << ',' << real(e.delta_l) << ','
        << real(e.alpha) << ',' << real(e.forget_knowledge) << ',' << real(e.retain_knowledge) << '\n';
    log << "[unlearn] epoch " << e.epoch << " alpha " << fmt("%.1f", e.alpha) << " forget loss "
        << fmt("%.3f", e.forget_loss) << " retain loss " << fmt("%.3f", e.retain_loss) << " forget know "
        << fmt("%.3f", e.forget_knowledge) << " retain know " << fmt("%.3f", e.retain_knowledge) << '\n';
  });
  save_checkpoint(model, c.output_dir / artifacts::kUnlearned);
  emit_alpha_curve(c.unlearn.schedule, c.alpha_curve_lo, c.alpha_curve_hi, c.output_dir / artifacts::kAlphaCurve);
}

ordered_json summary_of(const EvalReport& r) {
  ordered_json j;
  j["final_score"] = r.final_score;
  j["task_aggregate"] = r.task_aggregate;
  j["mia_score"] = r.mia_score;
  j["utility"] = r.utility;
  j["forget_regurgitation"] = r.forget.regurgitation;
  j["forget_knowledge"] = r.forget.knowledge;
  j["retain_regurgitation"] = r.retain.regurgitation;
  j["retain_knowledge"] = r.retain.knowledge;
  return j;
}

void evaluate_command(const RunConfig& base, std::ostream& log) {
  const Corpus corpus = load_run_corpus(base);
  const RunConfig c = base.resolved(corpus.vocab.size());
  const Transformer unlearned = load_model(c, artifacts::kUnlearned, "unlearn", corpus);
  const Transformer memorized = load_model(c, artifacts::kModel, "train", corpus);
  const EvalReport after = evaluate(unlearned, corpus);
  const EvalReport before = evaluate(memorized, corpus);
  save_report(after, c.output_dir / artifacts::kReport);
  save_report(before, c.output_dir / artifacts::kMemorizedReport);
  ordered_json j;
  j["memorized"] = summary_of(before);
  j["unlearned"] = summary_of(after);
  j["utility_retention"] = before.utility > 0.0 ? ordered_json(after.utility / before.utility) : ordered_json();
  write_json(j, c.output_dir / artifacts::kSummary);
  log << "[evaluate] final " << fmt("%.3f", after.final_score) << " (task aggregate "
      << fmt("%.3f", after.task_aggregate) << ", MIA " << fmt("%.3f", after.mia_score) << ", utility "
      << fmt("%.3f", after.utility) << "); memorized model final " << fmt("%.3f", before.final_score) << '\n';
}

}  // namespace

const char* command_name(Command c) {
  switch (c) {
    case Command::kGenData: return "gen-data";
    case Command::kTrain: return "train";
    case Command::kTrace: return "trace";
    case Command::kUnlearn: return "unlearn";
    case Command::kEvaluate: return "evaluate";
    case Command::kPipeline: return "pipeline";
  }
  return "?";
}

std::optional<Command> parse_command(std::string_view s) {
  for (Command c : {Command::kGenData, Command::kTrain, Command::kTrace, Command::kUnlearn, Command::kEvaluate,
                    Command::kPipeline})
    if (s == command_name(c)) return c;
  return std::nullopt;
}

void emit_alpha_curve(const AlphaSchedule& schedule, double lo, double hi, const fs::path& path) {
  ULAB_REQUIRE(std::isfinite(lo) && std::isfinite(hi) && lo <= hi, "alpha curve: need finite lo <= hi");
  std::ofstream out = open_out(path);
  out << "delta_l,alpha\n";
  const auto first = static_cast<long long>(std::ceil(lo * 100.0 - 1e-9));
  const auto last = static_cast<long long>(std::floor(hi * 100.0 + 1e-9));
  for (long long k = first; k <= last; ++k) {
    const double delta = static_cast<double>(k) / 100.0;
    out << fmt("%.2f", delta) << ',' << fmt("%.1f", compute_alpha(delta, schedule, 1)) << '\n';
  }
}

void run_command(Command command, const RunConfig& config, std::ostream& log) {
  std::error_code ec;
  fs::create_directories(config.output_dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + config.output_dir.string());
  switch (command) {
    case Command::kGenData: gen_data(config, log); break;
    case Command::kTrain: train(config, log); break;
    case Command::kTrace: trace(config, log); break;
    case Command::kUnlearn: unlearn(config, log); break;
    case Command::kEvaluate: evaluate_command(config, log); break;
    case Command::kPipeline:
      // An explicit layer range in the config wins over the traced one
      // inside `unlearn`.
      for (Command step : {Command::kGenData, Command::kTrain, Command::kTrace, Command::kUnlearn, Command::kEvaluate})
        run_command(step, config, log);
      break;
  }
}

}  // namespace ulab
