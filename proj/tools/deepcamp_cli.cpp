// deepcamp command-line front end.
//
// Exit codes: 0 success, 1 other failure (or gradcheck above tolerance),
// 2 missing file, 3 invalid config, 4 pipeline collapse.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "deepcamp/config.hpp"
#include "deepcamp/pipeline.hpp"

#ifndef DEEPCAMP_VERSION
#define DEEPCAMP_VERSION "0.1.0-unknown"
#endif

namespace fs = std::filesystem;
using namespace deepcamp;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitMissingFile = 2;
constexpr int kExitBadConfig = 3;
constexpr int kExitCollapse = 4;

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw IoError(std::string(what) + " not found: " + p.string());
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f.precision(17);
  return f;
}

void write_csv_reports(const fs::path& p, const LabelSpec& spec, const std::vector<EvalReport>& rows) {
  auto f = open_out(p);
  f << EvalReport::csv_header(spec.class_names) << "\n";
  for (const auto& r : rows) f << r.csv_row() << "\n";
}

void write_grid(std::ostream& out, const Grid& g) {
  out.precision(17);
  for (int r = 0; r < g.side; ++r) {
    for (int c = 0; c < g.side; ++c) out << (c ? " " : "") << g.at(r, c);
    out << "\n";
  }
}

void write_cluster_report(const fs::path& p, const ModelBundle& b) {
  auto f = open_out(p);
  for (const auto& c : b.clusters) {
    f << "cluster " << c.cluster_id << "\n";
    f << "  category: " << b.spec.class_names.at(c.category) << "\n";
    f << "  members: " << c.members.size() << "\n";
    if (c.harvest_threshold) f << "  harvest_threshold: " << *c.harvest_threshold << "\n";
    f << "  patterns: " << c.patterns.size() << "\n";
    for (const auto& pat : c.patterns) {
      f << "    {";
      for (std::size_t i = 0; i < pat.itemset.size(); ++i) f << (i ? "," : "") << pat.itemset[i];
      f << "} support=" << pat.support << " confidence=" << pat.confidence << "\n";
    }
    f << "  top_members:";
    if (auto it = b.top_members.find(c.cluster_id); it != b.top_members.end())
      for (const auto& [pid, s] : it->second) f << " " << pid << "(" << s << ")";
    f << "\n\n";
  }
}

void write_membership(const fs::path& p, const ModelBundle& b, const PatchBank* bank, const Dataset* ds) {
  auto f = open_out(p);
  f << "cluster_id,category,patch_id";
  if (bank) f << ",sample_id,row,col,scale";
  f << "\n";
  for (const auto& c : b.clusters) {
    for (auto pid : c.members) {
      f << c.cluster_id << ',' << b.spec.class_names.at(c.category) << ',' << pid;
      if (bank) {
        const auto& e = bank->entries[bank->entry_of.at(pid)];
        f << ',' << ds->samples[e.sample_pos].sample_id << ',' << e.row << ',' << e.col << ',' << e.scale;
      }
      f << "\n";
    }
  }
}

/// 20-bin histogram per cluster over train patches of the cluster's
/// category split by membership.
void write_score_distribution(const fs::path& p, const PipelineState& st, const Pipeline& pl, const Dataset& ds) {
  constexpr int kBins = 20;
  auto f = open_out(p);
  f << "cluster_id,bin,bin_lo,bin_hi,member_count,nonmember_count\n";
  const auto& bank = pl.bank();
  for (std::size_t j = 0; j < st.clusters.size(); ++j) {
    const auto& c = st.clusters[j];
    std::vector<double> mem, non;
    for (std::size_t e = 0; e < bank.entries.size(); ++e) {
      const auto& s = ds.samples[bank.entries[e].sample_pos];
      if (s.split != Split::Train) continue;
      const bool pos = ds.spec.mode == Mode::Action ? s.action_label == c.category : s.attribute_labels[c.category] > 0;
      if (!pos) continue;
      const double sc = score(*c.detector, st.features.row(e));
      (std::binary_search(c.members.begin(), c.members.end(), bank.entries[e].patch_id) ? mem : non).push_back(sc);
    }
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto* v : {&mem, &non})
      for (double x : *v) lo = std::min(lo, x), hi = std::max(hi, x);
    if (!(hi > lo)) hi = lo + 1.0;
    const double w = (hi - lo) / kBins;
    std::vector<int> hm(kBins, 0), hn(kBins, 0);
    auto bin = [&](double x) { return std::clamp(static_cast<int>((x - lo) / w), 0, kBins - 1); };
    for (double x : mem) ++hm[bin(x)];
    for (double x : non) ++hn[bin(x)];
    for (int b = 0; b < kBins; ++b)
      f << c.cluster_id << ',' << b << ',' << lo + b * w << ',' << lo + (b + 1) * w << ',' << hm[b] << ',' << hn[b] << "\n";
  }
}

void write_representations(const fs::path& p, const PipelineState& st, const Pipeline& pl, const Dataset& ds) {
  auto f = open_out(p);
  bool header = false;
  for (auto split : {Split::Train, Split::Val, Split::Test}) {
    const auto enc = pl.encode_split(st, split);
    for (std::size_t i = 0; i < enc.reps.size(); ++i) {
      if (!header) {
        f << "sample_id,split";
        for (std::size_t k = 0; k < enc.reps[i].size(); ++k) f << ",r" << k;
        f << "\n";
        header = true;
      }
      f << ds.samples[enc.sample_pos[i]].sample_id << ',' << to_string(split);
      for (double v : enc.reps[i]) f << ',' << v;
      f << "\n";
    }
  }
}

void write_tiles(const fs::path& dir, const ModelBundle& b) {
  fs::create_directories(dir);
  for (const auto& [cid, tiles] : b.top_tiles) {
    const auto& members = b.top_members.at(cid);
    for (std::size_t r = 0; r < tiles.size(); ++r) {
      std::ostringstream name;
      name << "cluster_" << std::setw(3) << std::setfill('0') << cid << "_rank_" << r << ".grid";
      auto f = open_out(dir / name.str());
      f << "# patch_id=" << members[r].first << " score=" << members[r].second << " side=" << tiles[r].side << "\n";
      write_grid(f, tiles[r]);
    }
  }
}

int cmd_gen_data(const fs::path& config, const fs::path& out) {
  require_file(config, "config");
  const auto cfg = load_config(config);
  const auto ds = generate_synthetic_dataset(cfg.synth, cfg.label_spec());
  save_dataset(ds, out);
  std::cout << "wrote " << ds.samples.size() << " samples to " << out.string() << "\n";
  return 0;
}

int cmd_run(const fs::path& config, const fs::path& data, const fs::path& out, bool deterministic) {
  const auto started = timestamp();
  require_file(config, "config");
  require_file(data, "dataset");
  auto cfg = load_config(config);
  if (deterministic) cfg.pipeline.deterministic = true;
  const auto ds = load_dataset(data);
  if (ds.spec.mode != cfg.mode || ds.spec.count() != cfg.classes)
    throw ConfigError("data.mode/data.classes: config does not match dataset label space");
  fs::create_directories(out);

  auto log = open_out(out / "progress.log");
  Pipeline pl(ds, cfg.pipeline, [&log](const std::string& line) {
    log << line << "\n";
    log.flush();
    std::cerr << line << "\n";
  });
  auto result = pl.run();
  const auto& bundle = result.bundle;

  std::vector<std::string> outputs;
  auto emit = [&](const std::string& name) {
    outputs.push_back(name);
    return out / name;
  };

  save_bundle(bundle, emit("bundle.dcmp"));

  std::vector<EvalReport> iters;
  for (const auto& r : result.last_state.records) iters.push_back(r.report);
  write_csv_reports(emit("iterations.csv"), ds.spec, iters);

  std::vector<EvalReport> final_rows;
  for (auto split : {Split::Val, Split::Test}) final_rows.push_back(evaluate_bundle(bundle, ds, split));
  write_csv_reports(emit("eval.csv"), ds.spec, final_rows);

  std::vector<EvalReport> baseline;
  for (auto split : {Split::Val, Split::Test}) baseline.push_back(pl.evaluate_holistic(split));
  write_csv_reports(emit("baseline.csv"), ds.spec, baseline);

  write_cluster_report(emit("clusters.txt"), bundle);
  write_membership(emit("membership.csv"), bundle, &pl.bank(), &ds);
  write_score_distribution(emit("score_distribution.csv"), result.final_state, pl, ds);
  write_representations(emit("representation.csv"), result.final_state, pl, ds);
  {
    auto f = open_out(emit("config.txt"));
    f << to_text(cfg);
  }
  outputs.push_back("progress.log");
  outputs.push_back("manifest.txt");

  auto m = open_out(out / "manifest.txt");
  m << "version=" << DEEPCAMP_VERSION << "\n";
  m << "started=" << started << "\n";
  m << "finished=" << timestamp() << "\n";
  m << "seed=" << cfg.pipeline.seed << "\n";
  m << "data=" << fs::absolute(data).string() << "\n";
  m << "deterministic=" << (cfg.pipeline.deterministic ? "true" : "false") << "\n";
  m << "selected_iteration=" << bundle.selected_iteration << "\n";
  m << "holistic_val_map=" << bundle.holistic_metric << "\n";
  m << "metric_history=";
  for (std::size_t i = 0; i < result.last_state.records.size(); ++i)
    m << (i ? "," : "") << result.last_state.records[i].iteration << ":" << result.last_state.records[i].val_map;
  m << "\n";
  m << "outputs=";
  for (std::size_t i = 0; i < outputs.size(); ++i) m << (i ? "," : "") << outputs[i];
  m << "\n[config]\n" << to_text(cfg);

  std::cout << "selected iteration " << bundle.selected_iteration << ", test mAP " << final_rows[1].map << "\n";
  return 0;
}

int cmd_eval(const fs::path& bundle_path, const fs::path& data, const std::string& split_name,
             const std::string& out) {
  require_file(bundle_path, "bundle");
  require_file(data, "dataset");
  const auto split = parse_split(split_name);
  const auto b = load_bundle(bundle_path);
  const auto ds = load_dataset(data);
  const auto r = evaluate_bundle(b, ds, split);
  std::ostringstream csv;
  csv << EvalReport::csv_header(b.spec.class_names) << "\n" << r.csv_row() << "\n";
  if (out.empty()) {
    std::cout << csv.str();
  } else {
    fs::create_directories(out);
    auto f = open_out(fs::path(out) / ("eval_" + split_name + ".csv"));
    f << csv.str();
  }
  return 0;
}

int cmd_export_clusters(const fs::path& bundle_path, const fs::path& out) {
  require_file(bundle_path, "bundle");
  const auto b = load_bundle(bundle_path);
  fs::create_directories(out);
  write_cluster_report(out / "clusters.txt", b);
  write_membership(out / "membership.csv", b, nullptr, nullptr);
  write_tiles(out / "tiles", b);
  std::cout << "exported " << b.clusters.size() << " clusters to " << out.string() << "\n";
  return 0;
}

int cmd_gradcheck(const fs::path& config) {
  require_file(config, "config");
  const auto cfg = load_config(config);
  NetArch arch = cfg.pipeline.arch;
  arch.head.back() = cfg.classes;
  const auto net = init_network(arch, cfg.gradcheck.seed);
  Rng rng(derive_seed(cfg.gradcheck.seed, 1));
  Grid patch(arch.patch_input_side), context(arch.context_input_side);
  for (auto& v : patch.px) v = rng.uniform();
  for (auto& v : context.px) v = rng.uniform();
  GradCheckOptions opt;
  opt.max_params = cfg.gradcheck.max_params;
  opt.seed = cfg.gradcheck.seed;

  const double e_soft = gradient_check(net, patch, context, Target::of_label(0), Loss::Softmax, cfg.gradcheck.eps, opt);
  std::vector<std::int8_t> labels(cfg.classes, -1);
  labels[0] = 1;
  if (cfg.classes > 2) labels[2] = 0;
  const double e_sig = gradient_check(net, patch, context, Target::of_attributes(labels), Loss::PerClassCrossEntropy,
                                      cfg.gradcheck.eps, opt);
  const double worst = std::max(e_soft, e_sig);
  std::cout.precision(6);
  std::cout << "softmax_max_rel_error=" << std::scientific << e_soft << "\n";
  std::cout << "sigmoid_max_rel_error=" << e_sig << "\n";
  std::cout << "max_rel_error=" << worst << "\n";
  return worst > cfg.gradcheck.tolerance ? kExitFailure : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deepcamp: iterative mid-level discriminative patterns"};
  app.set_version_flag("--version", DEEPCAMP_VERSION);
  app.require_subcommand(1);

  std::string config, out, data, bundle, split = "test";
  bool deterministic = false;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config, "config file")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* run = app.add_subcommand("run", "run the iterative pipeline");
  run->add_option("--config", config, "config file")->required();
  run->add_option("--data", data, "dataset directory or file")->required();
  run->add_option("--out", out, "output directory")->required();
  run->add_flag("--deterministic", deterministic, "single-threaded, fixed reduction order");

  auto* eval = app.add_subcommand("eval", "evaluate a model bundle");
  eval->add_option("--bundle", bundle, "bundle file")->required();
  eval->add_option("--data", data, "dataset directory or file")->required();
  eval->add_option("--split", split, "val or test")->check(CLI::IsMember({"val", "test"}));
  eval->add_option("--out", out, "write eval_<split>.csv here instead of stdout");

  auto* exp = app.add_subcommand("export-clusters", "dump clusters and top tiles");
  exp->add_option("--bundle", bundle, "bundle file")->required();
  exp->add_option("--out", out, "output directory")->required();

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("--config", config, "config file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(config, out);
    if (*run) return cmd_run(config, data, out, deterministic);
    if (*eval) return cmd_eval(bundle, data, split, out);
    if (*exp) return cmd_export_clusters(bundle, out);
    if (*grad) return cmd_gradcheck(config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const IoError& e) {
    std::cerr << "missing file: " << e.what() << "\n";
    return kExitMissingFile;
  } catch (const PipelineCollapseError& e) {
    std::cerr << "pipeline collapse: " << e.what() << "\n";
    return kExitCollapse;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
