#pragma once

// Flat key=value run configuration. One key per line, '#' starts a comment,
// list values are comma separated. Unknown keys are errors.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "deepcamp/core.hpp"
#include "deepcamp/datamodel.hpp"
#include "deepcamp/pipeline.hpp"

namespace deepcamp {

struct GradCheckConfig {
  double eps = 1e-5;
  int max_params = 400;
  std::uint64_t seed = 7;
  double tolerance = 1e-3;
};

struct RunConfig {
  SynthConfig synth;
  Mode mode = Mode::Action;
  int classes = 4;
  PipelineConfig pipeline;
  GradCheckConfig gradcheck;

  LabelSpec label_spec() const { return LabelSpec::numbered(mode, classes); }

  void validate() const {
    synth.validate();
    label_spec().validate();
    pipeline.validate();
    require_config(gradcheck.eps >= 1e-6 && gradcheck.eps <= 1e-3, "gradcheck.eps must be in [1e-6, 1e-3]");
    require_config(gradcheck.max_params >= 1, "gradcheck.max_params must be >= 1");
  }
};

namespace cfgdetail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc{} || r.ptr != end) throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

inline std::string fmt_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// conv layers as kernel:out_channels:stride:pool
inline std::string fmt_convs(const std::vector<ConvLayer>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += (i ? "," : "") + std::to_string(v[i].kernel) + ":" + std::to_string(v[i].out_channels) + ":" +
         std::to_string(v[i].stride) + ":" + (v[i].pool ? "1" : "0");
  }
  return s;
}

inline std::vector<int> parse_ints(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& p : split(v, ',')) out.push_back(parse_number<int>(key, p));
  return out;
}

inline std::vector<ConvLayer> parse_convs(const std::string& key, const std::string& v) {
  std::vector<ConvLayer> out;
  for (const auto& p : split(v, ',')) {
    const auto f = split(p, ':');
    if (f.size() != 4) throw ConfigError(key + ": conv layer must be kernel:channels:stride:pool, got '" + p + "'");
    out.push_back({parse_number<int>(key, f[0]), parse_number<int>(key, f[1]), parse_number<int>(key, f[2]),
                   parse_bool(key, f[3])});
  }
  return out;
}

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline Field int_field(const std::string& key, int& x) {
  return {[&x, key](const std::string& v) { x = parse_number<int>(key, v); }, [&x] { return std::to_string(x); }};
}
inline Field u64_field(const std::string& key, std::uint64_t& x) {
  return {[&x, key](const std::string& v) { x = parse_number<std::uint64_t>(key, v); },
          [&x] { return std::to_string(x); }};
}
inline Field real_field(const std::string& key, double& x) {
  return {[&x, key](const std::string& v) { x = parse_number<double>(key, v); }, [&x] { return fmt(x); }};
}
inline Field bool_field(const std::string& key, bool& x) {
  return {[&x, key](const std::string& v) { x = parse_bool(key, v); }, [&x] { return std::string(x ? "true" : "false"); }};
}

inline void train_fields(std::map<std::string, Field>& f, const std::string& p, TrainConfig& t) {
  f[p + "learning_rate"] = real_field(p + "learning_rate", t.learning_rate);
  f[p + "batch_size"] = int_field(p + "batch_size", t.batch_size);
  f[p + "epochs"] = int_field(p + "epochs", t.epochs);
  f[p + "momentum"] = real_field(p + "momentum", t.momentum);
  f[p + "weight_decay"] = real_field(p + "weight_decay", t.weight_decay);
  f[p + "final_layer_only"] = bool_field(p + "final_layer_only", t.final_layer_only);
}

/// Every documented key bound to its slot in `c`, in sorted order.
inline std::map<std::string, Field> fields(RunConfig& c) {
  std::map<std::string, Field> f;
  auto& s = c.synth;
  f["synth.n_train"] = int_field("synth.n_train", s.n_train);
  f["synth.n_val"] = int_field("synth.n_val", s.n_val);
  f["synth.n_test"] = int_field("synth.n_test", s.n_test);
  f["synth.box_side"] = int_field("synth.box_side", s.box_side);
  f["synth.motifs_per_class"] = int_field("synth.motifs_per_class", s.motifs_per_class);
  f["synth.motif_side"] = int_field("synth.motif_side", s.motif_side);
  f["synth.noise_sigma"] = real_field("synth.noise_sigma", s.noise_sigma);
  f["synth.distractors_per_image"] = int_field("synth.distractors_per_image", s.distractors_per_image);
  f["synth.class_cue_amplitude"] = real_field("synth.class_cue_amplitude", s.class_cue_amplitude);
  f["synth.attribute_present_rate"] = real_field("synth.attribute_present_rate", s.attribute_present_rate);
  f["synth.unspecified_rate"] = real_field("synth.unspecified_rate", s.unspecified_rate);
  f["synth.seed"] = u64_field("synth.seed", s.seed);

  f["data.mode"] = {[&c](const std::string& v) {
                      if (v == "action") c.mode = Mode::Action;
                      else if (v == "attribute") c.mode = Mode::Attribute;
                      else throw ConfigError("data.mode: expected action or attribute, got '" + v + "'");
                    },
                    [&c] { return std::string(to_string(c.mode)); }};
  f["data.classes"] = int_field("data.classes", c.classes);

  auto& p = c.pipeline;
  f["grid.resize_side"] = int_field("grid.resize_side", p.grid.resize_side);
  f["grid.stride"] = int_field("grid.stride", p.grid.stride);
  f["grid.scales"] = {[&p](const std::string& v) { p.grid.scales = parse_ints("grid.scales", v); },
                      [&p] { return fmt_ints(p.grid.scales); }};

  f["arch.patch_input_side"] = int_field("arch.patch_input_side", p.arch.patch_input_side);
  f["arch.context_input_side"] = int_field("arch.context_input_side", p.arch.context_input_side);
  f["arch.in_channels"] = int_field("arch.in_channels", p.arch.in_channels);
  f["arch.patch_stream"] = {[&p](const std::string& v) { p.arch.patch_stream = parse_convs("arch.patch_stream", v); },
                            [&p] { return fmt_convs(p.arch.patch_stream); }};
  f["arch.context_stream"] = {
      [&p](const std::string& v) { p.arch.context_stream = parse_convs("arch.context_stream", v); },
      [&p] { return fmt_convs(p.arch.context_stream); }};
  f["arch.hidden"] = {[&p](const std::string& v) {
                        auto h = parse_ints("arch.hidden", v);
                        h.push_back(p.arch.head.back());
                        p.arch.head = std::move(h);
                      },
                      [&p] { return fmt_ints({p.arch.head.begin(), p.arch.head.end() - 1}); }};
  f["arch.embed_layer_index"] = int_field("arch.embed_layer_index", p.arch.embed_layer_index);

  train_fields(f, "train.", p.train);
  train_fields(f, "holistic.", p.holistic_train);
  f["holistic.crop_every"] = int_field("holistic.crop_every", p.holistic_crop_every);

  f["mining.k"] = int_field("mining.k", p.mining.k);
  f["mining.min_support"] = real_field("mining.min_support", p.mining.min_support);
  f["mining.min_confidence"] = real_field("mining.min_confidence", p.mining.min_confidence);
  f["mining.max_itemset_size"] = int_field("mining.max_itemset_size", p.mining.max_itemset_size);
  f["mining.clusters_per_category"] = int_field("mining.clusters_per_category", p.mining.clusters_per_category);
  f["mining.merge_overlap_threshold"] = real_field("mining.merge_overlap_threshold", p.mining.merge_overlap_threshold);
  f["mining.max_patterns_per_category"] =
      int_field("mining.max_patterns_per_category", p.mining.max_patterns_per_category);

  f["harvest.policy"] = {[&p](const std::string& v) {
                           if (v == "percentile") p.harvest = Percentile{};
                           else if (v == "absolute") p.harvest = Absolute{};
                           else throw ConfigError("harvest.policy: expected percentile or absolute, got '" + v + "'");
                         },
                         [&p] { return std::string(std::holds_alternative<Percentile>(p.harvest) ? "percentile" : "absolute"); }};
  f["harvest.value"] = {[&p](const std::string& v) {
                          const double x = parse_number<double>("harvest.value", v);
                          if (auto* q = std::get_if<Percentile>(&p.harvest)) q->q = x;
                          else std::get<Absolute>(p.harvest).threshold = x;
                        },
                        [&p] {
                          if (const auto* q = std::get_if<Percentile>(&p.harvest)) return fmt(q->q);
                          return fmt(std::get<Absolute>(p.harvest).threshold);
                        }};

  f["detector.lambda_frac"] = real_field("detector.lambda_frac", p.lambda_frac);
  f["detector.negative_cap"] = int_field("detector.negative_cap", p.negative_cap);

  f["classifier.reg"] = real_field("classifier.reg", p.classifier.reg);
  f["classifier.epochs"] = int_field("classifier.epochs", p.classifier.epochs);
  f["classifier.eta0"] = real_field("classifier.eta0", p.classifier.eta0);
  f["classifier.seed"] = u64_field("classifier.seed", p.classifier.seed);

  f["pipeline.max_iterations"] = int_field("pipeline.max_iterations", p.max_iterations);
  f["pipeline.convergence_epsilon"] = real_field("pipeline.convergence_epsilon", p.convergence_epsilon);
  f["pipeline.seed"] = u64_field("pipeline.seed", p.seed);
  f["pipeline.use_context"] = bool_field("pipeline.use_context", p.use_context);
  f["pipeline.warm_start"] = bool_field("pipeline.warm_start", p.warm_start);
  f["pipeline.unspecified_fill"] = real_field("pipeline.unspecified_fill", p.unspecified_fill);
  f["pipeline.deterministic"] = bool_field("pipeline.deterministic", p.deterministic);

  f["gradcheck.eps"] = real_field("gradcheck.eps", c.gradcheck.eps);
  f["gradcheck.max_params"] = int_field("gradcheck.max_params", c.gradcheck.max_params);
  f["gradcheck.seed"] = u64_field("gradcheck.seed", c.gradcheck.seed);
  f["gradcheck.tolerance"] = real_field("gradcheck.tolerance", c.gradcheck.tolerance);
  return f;
}

}  // namespace cfgdetail

/// Applies key=value lines on top of `base`. Errors name the offending key
/// (or line number for malformed lines); the result is validated.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  auto f = cfgdetail::fields(base);
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  // harvest.policy must be applied before harvest.value
  std::vector<std::pair<std::string, std::string>> entries;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = cfgdetail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const auto key = cfgdetail::trim(line.substr(0, eq));
    const auto value = cfgdetail::trim(line.substr(eq + 1));
    if (!f.count(key)) throw ConfigError("unknown config key '" + key + "'");
    entries.emplace_back(key, value);
  }
  std::stable_partition(entries.begin(), entries.end(), [](const auto& e) { return e.first == "harvest.policy"; });
  for (const auto& [k, v] : entries) f.at(k).set(v);
  base.validate();
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Full echo of every key, sorted; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const RunConfig& c) {
  RunConfig copy = c;
  std::string out;
  for (const auto& [k, fld] : cfgdetail::fields(copy)) out += k + "=" + fld.get() + "\n";
  return out;
}

}  // namespace deepcamp
