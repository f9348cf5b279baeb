#include "ulab/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace ulab {
namespace {

// Thrown by value parsers; the caller adds the location.
struct BadValue {
  std::string what;
};

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::uint64_t to_u64(std::string_view v) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size() || v.empty())
    throw BadValue{"expected a nonnegative integer, got '" + std::string(v) + "'"};
  return out;
}

std::size_t to_size(std::string_view v) { return static_cast<std::size_t>(to_u64(v)); }

double to_real(std::string_view v) {
  double out = 0.0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size() || v.empty() || !std::isfinite(out))
    throw BadValue{"expected a finite number, got '" + std::string(v) + "'"};
  return out;
}

std::optional<LayerRange> to_layers(std::string_view v) {
  if (v == "auto") return std::nullopt;
  const auto dash = v.find('-');
  if (dash == std::string_view::npos) {
    const std::size_t k = to_size(v);
    return LayerRange{k, k};
  }
  const LayerRange r{to_size(trim(v.substr(0, dash))), to_size(trim(v.substr(dash + 1)))};
  if (r.lo > r.hi) throw BadValue{"layer range '" + std::string(v) + "' is reversed"};
  return r;
}

std::set<ParamKind> to_kinds(std::string_view v) {
  std::set<ParamKind> out;
  while (!v.empty()) {
    const auto comma = v.find_first_of(",+");
    const std::string_view item = trim(v.substr(0, comma));
    const auto kind = parse_kind(item);
    if (!kind || (*kind != ParamKind::kMhsa && *kind != ParamKind::kMlp))
      throw BadValue{"expected MHSA and/or MLP, got '" + std::string(item) + "'"};
    out.insert(*kind);
    if (comma == std::string_view::npos) break;
    v.remove_prefix(comma + 1);
  }
  if (out.empty()) throw BadValue{"expected MHSA and/or MLP"};
  return out;
}

using Setter = std::function<void(RunConfig&, std::string_view)>;

void add_optimizer(std::map<std::string, Setter>& keys, const std::string& prefix,
                   OptimizerConfig& (*get)(RunConfig&)) {
  keys[prefix + ".learning_rate"] = [get](RunConfig& c, std::string_view v) { get(c).learning_rate = to_real(v); };
  keys[prefix + ".beta1"] = [get](RunConfig& c, std::string_view v) { get(c).beta1 = to_real(v); };
  keys[prefix + ".beta2"] = [get](RunConfig& c, std::string_view v) { get(c).beta2 = to_real(v); };
  keys[prefix + ".epsilon"] = [get](RunConfig& c, std::string_view v) { get(c).epsilon = to_real(v); };
  keys[prefix + ".weight_decay"] = [get](RunConfig& c, std::string_view v) { get(c).weight_decay = to_real(v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> k;
    k["seed"] = [](RunConfig& c, std::string_view v) { c.seed = to_u64(v); };
    k["output_dir"] = [](RunConfig& c, std::string_view v) {
      if (v.empty()) throw BadValue{"empty output directory"};
      c.output_dir = std::string(v);
    };

    k["corpus.forget"] = [](RunConfig& c, std::string_view v) { c.corpus.forget = to_size(v); };
    k["corpus.retain"] = [](RunConfig& c, std::string_view v) { c.corpus.retain = to_size(v); };
    k["corpus.holdout"] = [](RunConfig& c, std::string_view v) { c.corpus.holdout = to_size(v); };
    k["corpus.utility"] = [](RunConfig& c, std::string_view v) { c.corpus.utility = to_size(v); };
    k["corpus.seed"] = [](RunConfig& c, std::string_view v) { c.corpus_seed = to_u64(v); };

    k["model.num_layers"] = [](RunConfig& c, std::string_view v) { c.model.num_layers = to_size(v); };
    k["model.d_model"] = [](RunConfig& c, std::string_view v) { c.model.d_model = to_size(v); };
    k["model.num_heads"] = [](RunConfig& c, std::string_view v) { c.model.num_heads = to_size(v); };
    k["model.d_mlp"] = [](RunConfig& c, std::string_view v) { c.model.d_mlp = to_size(v); };
    k["model.max_seq_len"] = [](RunConfig& c, std::string_view v) { c.model.max_seq_len = to_size(v); };
    k["model.seed"] = [](RunConfig& c, std::string_view v) { c.model_seed = to_u64(v); };

    k["train.max_epochs"] = [](RunConfig& c, std::string_view v) { c.train.max_epochs = to_size(v); };
    k["train.batch_size"] = [](RunConfig& c, std::string_view v) { c.train.batch_size = to_size(v); };
    k["train.min_lr_ratio"] = [](RunConfig& c, std::string_view v) { c.train.min_lr_ratio = to_real(v); };
    k["train.warmup_steps"] = [](RunConfig& c, std::string_view v) { c.train.warmup_steps = to_size(v); };
    k["train.max_grad_norm"] = [](RunConfig& c, std::string_view v) { c.train.max_grad_norm = to_real(v); };
    k["train.check_every"] = [](RunConfig& c, std::string_view v) { c.train.check_every = to_size(v); };
    k["train.seed"] = [](RunConfig& c, std::string_view v) { c.train_seed = to_u64(v); };
    add_optimizer(k, "train", [](RunConfig& c) -> OptimizerConfig& { return c.train.optimizer; });

    k["trace.noise_scale"] = [](RunConfig& c, std::string_view v) { c.trace.noise_scale = to_real(v); };
    k["trace.num_noise_samples"] = [](RunConfig& c, std::string_view v) { c.trace.num_noise_samples = to_size(v); };
    k["trace.max_facts"] = [](RunConfig& c, std::string_view v) { c.trace.max_facts = to_size(v); };
    k["trace.critical_fraction"] = [](RunConfig& c, std::string_view v) { c.trace.critical_fraction = to_real(v); };
    k["trace.seed"] = [](RunConfig& c, std::string_view v) { c.trace_seed = to_u64(v); };
    k["trace.split"] = [](RunConfig& c, std::string_view v) {
      const auto s = parse_split(v);
      if (!s) throw BadValue{"unknown split '" + std::string(v) + "'"};
      c.trace_split = *s;
    };

    k["unlearn.method"] = [](RunConfig& c, std::string_view v) {
      const auto m = parse_method(v);
      if (!m) throw BadValue{"unknown method '" + std::string(v) + "'"};
      c.unlearn.method = *m;
    };
    k["unlearn.layers"] = [](RunConfig& c, std::string_view v) { c.unlearn.layer_range = to_layers(v); };
    k["unlearn.kinds"] = [](RunConfig& c, std::string_view v) { c.unlearn.kinds = to_kinds(v); };
    k["unlearn.epochs"] = [](RunConfig& c, std::string_view v) { c.unlearn.epochs = to_size(v); };
    k["unlearn.batch_size"] = [](RunConfig& c, std::string_view v) { c.unlearn.batch_size = to_size(v); };
    k["unlearn.early_stop_knowledge"] = [](RunConfig& c, std::string_view v) {
      c.unlearn.early_stop_knowledge = to_real(v);
    };
    k["unlearn.seed"] = [](RunConfig& c, std::string_view v) { c.unlearn_seed = to_u64(v); };
    add_optimizer(k, "unlearn", [](RunConfig& c) -> OptimizerConfig& { return c.unlearn.optimizer; });
    k["unlearn.alpha.a"] = [](RunConfig& c, std::string_view v) { c.unlearn.schedule.a = to_real(v); };
    k["unlearn.alpha.b"] = [](RunConfig& c, std::string_view v) { c.unlearn.schedule.b = to_real(v); };
    k["unlearn.alpha.c"] = [](RunConfig& c, std::string_view v) { c.unlearn.schedule.c = to_real(v); };
    k["unlearn.alpha.min"] = [](RunConfig& c, std::string_view v) { c.unlearn.schedule.alpha_min = to_real(v); };
    k["unlearn.alpha.max"] = [](RunConfig& c, std::string_view v) { c.unlearn.schedule.alpha_max = to_real(v); };

    k["alpha_curve.min"] = [](RunConfig& c, std::string_view v) { c.alpha_curve_lo = to_real(v); };
    k["alpha_curve.max"] = [](RunConfig& c, std::string_view v) { c.alpha_curve_hi = to_real(v); };
    return k;
  }();
  return table;
}

}  // namespace

RunConfig RunConfig::resolved(std::size_t vocab_size) const {
  RunConfig r = *this;
  r.corpus_seed = corpus_seed.value_or(seed);
  r.model_seed = model_seed.value_or(seed);
  r.train_seed = train_seed.value_or(seed);
  r.trace_seed = trace_seed.value_or(seed);
  r.unlearn_seed = unlearn_seed.value_or(seed);
  r.model.seed = *r.model_seed;
  r.model.vocab_size = vocab_size;
  r.train.seed = *r.train_seed;
  r.trace.rng_seed = *r.trace_seed;
  r.unlearn.seed = *r.unlearn_seed;
  return r;
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "key '" + key + "' given twice");
    try {
      it->second(config, value);
    } catch (const BadValue& e) {
      throw ConfigError(where + key + ": " + e.what);
    }
  }
  return config;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str(), path.string());
}

}  // namespace ulab
