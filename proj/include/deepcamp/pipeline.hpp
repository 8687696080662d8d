#pragma once

// Iterative mid-level pattern learning:
//   initial holistic features -> mined clusters -> loop {
//     train patch network on cluster labels, re-extract features,
//     update clusters, retrain detectors, score, harvest }
// with validation-driven stopping and best-iteration selection.

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "deepcamp/clusters.hpp"
#include "deepcamp/container.hpp"
#include "deepcamp/core.hpp"
#include "deepcamp/datamodel.hpp"
#include "deepcamp/detectors.hpp"
#include "deepcamp/embednet.hpp"
#include "deepcamp/encoder.hpp"
#include "deepcamp/metrics.hpp"
#include "deepcamp/mining.hpp"
#include "deepcamp/patchgrid.hpp"

namespace deepcamp {

struct PipelineConfig {
  GridConfig grid;
  NetArch arch;  // head.back() is replaced by the output count of each network
  TrainConfig train{.learning_rate = 0.01, .batch_size = 100, .epochs = 5, .momentum = 0.9, .weight_decay = 5e-4};
  TrainConfig holistic_train{.learning_rate = 0.05, .batch_size = 100, .epochs = 10, .momentum = 0.9,
                             .weight_decay = 5e-4};
  MiningConfig mining;
  HarvestPolicy harvest = Percentile{10.0};
  // every n-th grid patch of a train box joins initial training with the box label; 0 disables
  int holistic_crop_every = 4;
  double lambda_frac = 1e-3;
  int negative_cap = 2000;
  ClassifierConfig classifier;
  int max_iterations = 3;
  double convergence_epsilon = 0.002;
  std::uint64_t seed = 1;
  bool use_context = true;
  bool warm_start = true;
  double unspecified_fill = 0.5;
  bool deterministic = true;

  void validate() const {
    grid.validate();
    validate_arch(arch);
    train.validate();
    holistic_train.validate();
    mining.validate();
    deepcamp::validate(harvest);
    require_config(holistic_crop_every >= 0, "holistic: crop_every must be >= 0");
    require_config(lambda_frac > 0.0, "detector: lambda_frac must be > 0");
    require_config(negative_cap >= 2, "detector: negative_cap must be >= 2");
    require_config(classifier.reg > 0.0 && classifier.epochs >= 1 && classifier.eta0 > 0.0,
                   "classifier: reg, epochs, eta0 must be positive");
    require_config(max_iterations >= 1, "pipeline: max_iterations must be >= 1");
    require_config(convergence_epsilon >= 0.0, "pipeline: convergence_epsilon must be >= 0");
    require_config(unspecified_fill >= 0.0 && unspecified_fill <= 1.0, "pipeline: unspecified_fill must be in [0,1]");
  }
};

/// Network-ready patches and box views for every sample of a dataset.
struct PatchBank {
  struct Entry {
    std::int64_t patch_id = 0;
    std::size_t sample_pos = 0;  // index into Dataset::samples
    int row = 0, col = 0, scale = 0;
  };
  std::vector<Entry> entries;
  std::vector<Grid> pixels;            // patch_input_side
  std::vector<Grid> contexts;          // per sample, context_input_side (zeros when context is disabled)
  std::vector<BoxViews> boxes;         // per sample, holistic views
  std::vector<std::size_t> first;      // per sample, first entry index; first[n] = entries.size()
  std::map<std::int64_t, std::size_t> entry_of;

  std::size_t sample_count() const { return boxes.size(); }
};

inline PatchBank build_patch_bank(const Dataset& ds, const GridConfig& grid, const NetArch& arch, bool use_context) {
  PatchBank bank;
  const std::int64_t per = grid.patches_per_sample();
  for (std::size_t si = 0; si < ds.samples.size(); ++si) {
    const auto& s = ds.samples[si];
    bank.first.push_back(bank.entries.size());
    bank.boxes.push_back(box_views(s, arch));
    bank.contexts.push_back(use_context ? bank.boxes.back().context_view : Grid(arch.context_input_side, 0.0));
    for (auto& p : extract_patches(s, grid, static_cast<std::int64_t>(si) * per)) {
      bank.entry_of[p.patch_id] = bank.entries.size();
      bank.entries.push_back({p.patch_id, si, p.row, p.col, p.scale});
      bank.pixels.push_back(resize_patch(p, arch.patch_input_side));
    }
  }
  bank.first.push_back(bank.entries.size());
  return bank;
}

struct IterationRecord {
  int iteration = 0;
  double val_map = 0.0;
  double cluster_nmi = 0.0;
  double cluster_purity = 0.0;
  std::size_t clusters = 0;
  std::size_t members = 0;
  std::size_t eliminated = 0;
  EvalReport report;  // validation split
  double patch_train_loss_initial = 0.0;
  double patch_train_loss_final = 0.0;
};

struct PipelineState {
  int iteration = 0;
  EmbedNetwork holistic;
  std::optional<EmbedNetwork> patch_net;  // absent at iteration 0
  FeatureMatrix features;                 // every patch of the bank, current network
  std::vector<PatternCluster> clusters;   // with detectors and harvest thresholds
  std::set<std::int64_t> eliminated;
  std::vector<double> history;            // validation mAP per completed iteration
  double initial_metric = 0.0;            // iteration 0 validation mAP
  double holistic_metric = 0.0;           // holistic-only validation mAP
  std::vector<IterationRecord> records;   // iteration 0 first
  std::map<std::int64_t, std::int64_t> last_id_map;  // previous -> current cluster id
  std::size_t last_label_space = 0;                   // output size of the latest patch network

  std::size_t total_clusters() const { return clusters.size(); }
};

/// Everything needed to encode and classify new samples.
struct ModelBundle {
  LabelSpec spec;
  GridConfig grid;
  bool use_context = true;
  EmbedNetwork holistic;
  std::optional<EmbedNetwork> patch_net;
  std::vector<PatternCluster> clusters;
  LinearClassifier classifier;
  int selected_iteration = 0;
  std::vector<double> history;
  double initial_metric = 0.0;
  double holistic_metric = 0.0;
  // top-scoring member tiles per cluster, for inspection
  std::map<std::int64_t, std::vector<std::pair<std::int64_t, double>>> top_members;
  std::map<std::int64_t, std::vector<Grid>> top_tiles;
};

using ProgressSink = std::function<void(const std::string&)>;

/// Per-sample representation inputs for one split.
struct EncodedSplit {
  std::vector<std::size_t> sample_pos;
  std::vector<std::vector<double>> reps;
};

class Pipeline {
 public:
  Pipeline(const Dataset& ds, PipelineConfig cfg, ProgressSink progress = {})
      : ds_(ds), cfg_(std::move(cfg)), progress_(std::move(progress)) {
    cfg_.validate();
    ds_.spec.validate();
  }

  const PipelineConfig& config() const { return cfg_; }
  const PatchBank& bank() const { return bank_; }

  PipelineState initialize() {
    if (ds_.split(Split::Train).empty()) throw PreconditionError("pipeline: empty train split");
    if (ds_.split(Split::Val).empty()) throw PreconditionError("pipeline: empty val split");
    PipelineState st;
    auto t0 = clock::now();

    bank_ = build_patch_bank(ds_, cfg_.grid, cfg_.arch, cfg_.use_context);
    log(0, "extract_patches", t0);

    t0 = clock::now();
    std::vector<std::vector<Grid>> crops;
    std::vector<const PersonSample*> train_samples;
    for (std::size_t si = 0; si < ds_.samples.size(); ++si) {
      if (ds_.samples[si].split != Split::Train) continue;
      train_samples.push_back(&ds_.samples[si]);
      auto& list = crops.emplace_back();
      if (cfg_.holistic_crop_every > 0)
        for (auto e = bank_.first[si]; e < bank_.first[si + 1]; e += cfg_.holistic_crop_every)
          list.push_back(bank_.pixels[e]);
    }
    TrainConfig htc = cfg_.holistic_train;
    htc.shuffle_seed = derive_seed(cfg_.seed, 101);
    st.holistic = train_initial_holistic(train_samples, ds_.spec, cfg_.arch, htc, derive_seed(cfg_.seed, 100),
                                         cfg_.unspecified_fill, nullptr, crops);
    log(0, "train_holistic", t0);

    t0 = clock::now();
    holistic_embedding_.clear();
    for (std::size_t si = 0; si < bank_.sample_count(); ++si) {
      holistic_embedding_.push_back(
          forward(st.holistic, bank_.boxes[si].patch_view, bank_.boxes[si].context_view).embedding);
    }
    train_positions_.clear();
    for (std::size_t si = 0; si < ds_.samples.size(); ++si)
      if (ds_.samples[si].split == Split::Train) train_positions_.push_back(si);
    log(0, "holistic_embeddings", t0);

    t0 = clock::now();
    st.features = embed_holistic_patches(st.holistic);
    log(0, "initial_features", t0);

    t0 = clock::now();
    const auto train_feats = train_rows(st.features);
    auto transactions = binarize(train_feats, cfg_.mining.k);
    std::vector<PatternCluster> clusters;
    for (int cat = 0; cat < ds_.spec.count(); ++cat) {
      auto labeled = label_transactions(transactions, cat);
      std::vector<AssociationPattern> patterns;
      if (std::any_of(labeled.begin(), labeled.end(), [](const Transaction& t) { return t.label == 1; })) {
        patterns = mine_patterns(labeled, 1, cfg_.mining);
      }
      for (auto& p : patterns) p.target = cat;
      for (auto& t : labeled) t.label = t.label == 1 ? cat : -1;
      auto cs = patterns_to_clusters(patterns, labeled, cfg_.mining, static_cast<std::int64_t>(clusters.size()));
      if (cs.empty()) {
        throw StateError("initialize: category '" + ds_.spec.class_names[cat] + "' produced no clusters");
      }
      for (auto& c : cs) clusters.push_back(std::move(c));
    }
    log(0, "mine_clusters", t0);

    t0 = clock::now();
    st.clusters = fit_detectors(std::move(clusters), st.features, st.eliminated);
    require_every_category(st.clusters, "initialize");
    harvest_into(st);
    require_every_category(st.clusters, "initialize");
    renumber(st);
    log(0, "detectors_harvest", t0);

    t0 = clock::now();
    st.holistic_metric = holistic_validation_metric();
    IterationRecord rec = record_for(st);
    rec.report = validation_report(st, rec);
    rec.val_map = rec.report.map;
    st.initial_metric = rec.val_map;
    st.records.push_back(rec);
    log(0, "validate", t0, rec.val_map);
    return st;
  }

  PipelineState run_iteration(PipelineState st) {
    if (st.clusters.empty()) throw PreconditionError("run_iteration: state has no clusters");
    const int it = st.iteration + 1;
    auto t0 = clock::now();

    // 1. train the patch network on current cluster labels
    const auto labels = exclusive_labels(st);
    TrainingSet set;
    set.contexts = bank_.contexts;
    for (const auto& [pid, label] : labels) {
      const auto e = bank_.entry_of.at(pid);
      set.add(bank_.pixels[e], static_cast<int>(bank_.entries[e].sample_pos), Target::of_label(label));
    }
    NetArch arch = cfg_.arch;
    arch.head.back() = static_cast<int>(st.clusters.size());
    auto net = init_network(arch, derive_seed(cfg_.seed, 200 + it));
    if (cfg_.warm_start) {
      // fine-tune: every layer but the output starts from the previous network
      const EmbedNetwork& src = st.patch_net ? *st.patch_net : st.holistic;
      const auto keep = net.layout.head.back().w;
      if (src.layout.head.back().w != keep) throw StateError("warm start: architectures differ below the output layer");
      std::copy_n(src.weights.begin(), keep, net.weights.begin());
    }
    TrainConfig tc = cfg_.train;
    tc.loss = Loss::Softmax;
    tc.shuffle_seed = derive_seed(cfg_.seed, 300 + it);
    const auto hist = train(net, set, tc);
    st.last_label_space = static_cast<std::size_t>(arch.head.back());
    log(it, "train_cnn", t0, hist.final_loss);

    // 2. re-extract features
    t0 = clock::now();
    st.features = embed_patches(net);
    st.patch_net = std::move(net);
    log(it, "extract_features", t0);

    // 3. update clusters: refit detectors on the new features, then reassign
    t0 = clock::now();
    auto refit = fit_detectors(st.clusters, st.features, st.eliminated);
    if (refit.empty()) throw PipelineCollapseError(collapse_message(it, "detector refit"));
    set_thresholds(refit, st.features);
    auto updated = update_clusters(train_rows(st.features), refit, update_candidates(refit, st.eliminated), cfg_.mining);
    if (updated.empty()) throw PipelineCollapseError(collapse_message(it, "update_clusters"));
    log(it, "update_clusters", t0);

    // 4-6. retrain detectors, score, harvest
    t0 = clock::now();
    st.clusters = fit_detectors(std::move(updated), st.features, st.eliminated);
    if (st.clusters.empty()) throw PipelineCollapseError(collapse_message(it, "detector training"));
    harvest_into(st);
    if (st.clusters.empty()) throw PipelineCollapseError(collapse_message(it, "harvest"));
    renumber(st);
    log(it, "detectors_harvest", t0);

    t0 = clock::now();
    st.iteration = it;
    IterationRecord rec = record_for(st);
    rec.report = validation_report(st, rec);
    rec.val_map = rec.report.map;
    rec.patch_train_loss_initial = hist.initial_loss;
    rec.patch_train_loss_final = hist.final_loss;
    st.history.push_back(rec.val_map);
    st.records.push_back(rec);
    log(it, "validate", t0, rec.val_map);
    return st;
  }

  struct RunResult {
    PipelineState final_state;     // best-validation iteration
    PipelineState last_state;      // where the loop stopped
    ModelBundle bundle;
  };

  RunResult run() {
    auto st = initialize();
    std::optional<PipelineState> best;
    // gain is measured between completed iterations, so at least two run
    // when the budget allows
    for (int i = 0; i < cfg_.max_iterations; ++i) {
      st = run_iteration(std::move(st));
      const double m = st.history.back();
      if (!best || m > best->history.back()) best = st;
      if (st.history.size() >= 2 && m - st.history[st.history.size() - 2] < cfg_.convergence_epsilon) break;
    }
    RunResult r{*best, st, make_bundle(*best)};
    return r;
  }

  // ------------------------------------------------------------------------
  // Evaluation helpers (public for tests and the CLI)

  /// Features of every bank patch under a patch network (patch + box context).
  FeatureMatrix embed_patches(const EmbedNetwork& net) const {
    EmbeddingInput in;
    in.contexts = bank_.contexts;
    in.patches = bank_.pixels;
    for (const auto& e : bank_.entries) {
      in.context_of.push_back(static_cast<int>(e.sample_pos));
      in.ids.push_back(e.patch_id);
    }
    return extract_embeddings(net, in);
  }

  /// Features of every bank patch under the holistic network, each patch fed
  /// to both streams.
  FeatureMatrix embed_holistic_patches(const EmbedNetwork& holistic) const {
    FeatureMatrix fm;
    fm.dim = holistic.arch.embedding_dim();
    for (std::size_t e = 0; e < bank_.entries.size(); ++e) {
      const Grid ctx = resize_bilinear(bank_.pixels[e], holistic.arch.context_input_side);
      fm.append(bank_.entries[e].patch_id, forward(holistic, bank_.pixels[e], ctx).embedding);
    }
    return fm;
  }

  EncodedSplit encode_split(const PipelineState& st, Split split) const {
    return encode_samples(st.features, detectors_of(st.clusters), split);
  }

  /// Per-class AP on a split for scores produced by a classifier.
  EvalReport evaluate(const LinearClassifier& clf, const EncodedSplit& enc, Split split, int iteration) const {
    return evaluate_scores(ds_, clf, enc.sample_pos, enc.reps, split, iteration);
  }

  /// Cluster NMI/purity against planted motifs over current cluster members.
  std::pair<double, double> cluster_quality(const PipelineState& st) const {
    std::vector<int> assigned, truth;
    const auto labels = exclusive_labels(st);
    for (const auto& [pid, label] : labels) {
      const auto& e = bank_.entries[bank_.entry_of.at(pid)];
      assigned.push_back(label);
      truth.push_back(ds_.oracle.window_identity(ds_.samples[e.sample_pos].sample_id, e.row, e.col, e.scale,
                                                 cfg_.grid.resize_side));
    }
    if (assigned.empty()) return {0.0, 0.0};
    return {nmi(assigned, truth), purity(assigned, truth)};
  }

  /// Holistic-only classifier trained on train-split embeddings.
  LinearClassifier holistic_classifier() const {
    std::vector<std::vector<double>> reps;
    std::vector<std::size_t> pos;
    for (auto si : train_positions_) {
      reps.push_back(holistic_embedding_[si]);
      pos.push_back(si);
    }
    return train_classifier(reps, targets_for(pos), ds_.spec.mode, cfg_.classifier);
  }

  EvalReport evaluate_holistic(Split split) const {
    const auto clf = holistic_classifier();
    std::vector<std::size_t> pos;
    std::vector<std::vector<double>> reps;
    for (std::size_t si = 0; si < ds_.samples.size(); ++si) {
      if (ds_.samples[si].split != split) continue;
      pos.push_back(si);
      reps.push_back(holistic_embedding_[si]);
    }
    return evaluate_scores(ds_, clf, pos, reps, split, 0);
  }

  ModelBundle make_bundle(const PipelineState& st) const {
    ModelBundle b;
    b.spec = ds_.spec;
    b.grid = cfg_.grid;
    b.use_context = cfg_.use_context;
    b.holistic = st.holistic;
    b.patch_net = st.patch_net;
    b.clusters = st.clusters;
    const auto enc = encode_split(st, Split::Train);
    b.classifier = train_classifier(enc.reps, targets_for(enc.sample_pos), ds_.spec.mode, cfg_.classifier);
    b.selected_iteration = st.iteration;
    b.history = st.history;
    b.initial_metric = st.initial_metric;
    b.holistic_metric = st.holistic_metric;
    const auto row_of = index_of(st.features.ids);
    for (const auto& c : st.clusters) {
      std::vector<std::pair<std::int64_t, double>> ranked;
      for (auto pid : c.members) ranked.emplace_back(pid, score(*c.detector, st.features.row(row_of.at(pid))));
      std::sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
        return x.second != y.second ? x.second > y.second : x.first < y.first;
      });
      if (ranked.size() > 8) ranked.resize(8);
      for (const auto& [pid, s] : ranked) b.top_tiles[c.cluster_id].push_back(bank_.pixels[bank_.entry_of.at(pid)]);
      b.top_members[c.cluster_id] = std::move(ranked);
    }
    return b;
  }

  std::vector<std::vector<std::int8_t>> targets_for(const std::vector<std::size_t>& positions) const {
    std::vector<std::vector<std::int8_t>> t;
    for (auto si : positions) {
      const auto& s = ds_.samples[si];
      if (ds_.spec.mode == Mode::Action) {
        std::vector<std::int8_t> row(ds_.spec.count(), -1);
        row[s.action_label] = 1;
        t.push_back(std::move(row));
      } else {
        t.push_back(s.attribute_labels);
      }
    }
    return t;
  }

  static EvalReport evaluate_scores(const Dataset& ds, const LinearClassifier& clf,
                                    const std::vector<std::size_t>& positions,
                                    const std::vector<std::vector<double>>& reps, Split split, int iteration) {
    EvalReport r;
    r.iteration = iteration;
    r.split = to_string(split);
    const int C = ds.spec.count();
    std::vector<std::vector<double>> scores;
    for (const auto& rep : reps) scores.push_back(predict(clf, rep));
    std::size_t correct = 0;
    std::vector<double> aps;
    for (int c = 0; c < C; ++c) {
      std::vector<double> sc;
      std::vector<bool> pos;
      for (std::size_t i = 0; i < positions.size(); ++i) {
        const auto& s = ds.samples[positions[i]];
        if (ds.spec.mode == Mode::Action) {
          sc.push_back(scores[i][c]);
          pos.push_back(s.action_label == c);
        } else if (s.attribute_labels[c] != 0) {
          sc.push_back(scores[i][c]);
          pos.push_back(s.attribute_labels[c] > 0);
        }
      }
      if (std::find(pos.begin(), pos.end(), true) == pos.end()) {
        r.per_class_ap.push_back(std::nan(""));
        continue;
      }
      r.per_class_ap.push_back(average_precision(sc, pos));
      aps.push_back(r.per_class_ap.back());
    }
    r.map = mean(aps);
    if (ds.spec.mode == Mode::Action && !positions.empty()) {
      for (std::size_t i = 0; i < positions.size(); ++i) {
        const auto& s = scores[i];
        const int pred = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
        correct += pred == ds.samples[positions[i]].action_label;
      }
      r.accuracy = static_cast<double>(correct) / static_cast<double>(positions.size());
    }
    return r;
  }

 private:
  using clock = std::chrono::steady_clock;

  void log(int it, const char* stage, clock::time_point t0, double metric = std::nan("")) const {
    if (!progress_) return;
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(clock::now() - t0).count();
    std::ostringstream s;
    s << "iteration=" << it << " stage=" << stage << " wall_ms=" << ms;
    if (!std::isnan(metric)) s << " metric=" << metric;
    progress_(s.str());
  }

  std::string collapse_message(int it, const char* where) const {
    return "pipeline collapse at iteration " + std::to_string(it) + " during " + where +
           ": every cluster was emptied";
  }

  bool is_positive(const PersonSample& s, int cat) const {
    return ds_.spec.mode == Mode::Action ? s.action_label == cat : s.attribute_labels[cat] > 0;
  }
  bool is_negative(const PersonSample& s, int cat) const {
    return ds_.spec.mode == Mode::Action ? s.action_label != cat : s.attribute_labels[cat] < 0;
  }

  const PersonSample& sample_of(std::int64_t pid) const {
    return ds_.samples[bank_.entries[bank_.entry_of.at(pid)].sample_pos];
  }

  FeatureMatrix train_rows(const FeatureMatrix& all) const {
    FeatureMatrix fm;
    fm.dim = all.dim;
    for (auto si : train_positions_)
      for (auto e = bank_.first[si]; e < bank_.first[si + 1]; ++e) fm.append(all.ids[e], all.row(e));
    return fm;
  }

  /// Transactions labelled 1 (target category) / 0 (other); for attributes,
  /// samples with an unspecified label for `cat` are left out.
  std::vector<Transaction> label_transactions(const std::vector<Transaction>& ts, int cat) const {
    std::vector<Transaction> out;
    for (const auto& t : ts) {
      const auto& s = sample_of(t.patch_id);
      if (is_positive(s, cat)) {
        out.push_back(t);
        out.back().label = 1;
      } else if (is_negative(s, cat)) {
        out.push_back(t);
        out.back().label = 0;
      }
    }
    return out;
  }

  static std::vector<LdaModel> detectors_of(const std::vector<PatternCluster>& cs) {
    std::vector<LdaModel> out;
    for (const auto& c : cs) out.push_back(*c.detector);
    return out;
  }

  /// Trains one detector per cluster on `features`. Negatives: surviving
  /// train patches from negative samples of the category plus same-category
  /// patches outside every cluster of the category, capped by seeded
  /// subsampling. Clusters with fewer than 2 surviving members are dropped.
  std::vector<PatternCluster> fit_detectors(std::vector<PatternCluster> clusters, const FeatureMatrix& features,
                                            const std::set<std::int64_t>& eliminated) const {
    const auto row_of = index_of(features.ids);
    std::map<int, std::set<std::int64_t>> assigned;
    for (const auto& c : clusters) assigned[c.category].insert(c.members.begin(), c.members.end());
    std::map<int, std::vector<std::size_t>> negatives;
    for (const auto& [cat, members] : assigned) {
      std::vector<std::size_t> pool;
      for (auto si : train_positions_) {
        const auto& s = ds_.samples[si];
        const bool neg = is_negative(s, cat), pos = is_positive(s, cat);
        if (!neg && !pos) continue;
        for (auto e = bank_.first[si]; e < bank_.first[si + 1]; ++e) {
          const auto pid = bank_.entries[e].patch_id;
          if (eliminated.count(pid)) continue;
          if (neg || !members.count(pid)) pool.push_back(row_of.at(pid));
        }
      }
      if (pool.size() > static_cast<std::size_t>(cfg_.negative_cap)) {
        Rng rng(derive_seed(cfg_.seed, 400 + static_cast<std::uint64_t>(cat)));
        rng.shuffle(pool);
        pool.resize(cfg_.negative_cap);
        std::sort(pool.begin(), pool.end());
      }
      negatives[cat] = std::move(pool);
    }
    std::vector<PatternCluster> out;
    for (auto& c : clusters) {
      std::vector<std::size_t> pos;
      for (auto pid : c.members)
        if (!eliminated.count(pid)) pos.push_back(row_of.at(pid));
      if (pos.size() < 2 || negatives[c.category].size() < 2) continue;
      c.detector = train_lda(features, pos, negatives[c.category], cfg_.lambda_frac, c.cluster_id);
      c.harvest_threshold.reset();
      out.push_back(std::move(c));
    }
    return out;
  }

  /// Records each cluster's harvest threshold without removing anyone.
  void set_thresholds(std::vector<PatternCluster>& clusters, const FeatureMatrix& features) const {
    const auto scores = score_patches(detectors_of(clusters), train_rows_for(clusters, features));
    const auto h = harvest(clusters, scores, cfg_.harvest);
    std::map<std::int64_t, double> th;
    const auto col_of = index_of(scores.cluster_ids);
    const auto row_of = index_of(scores.patch_ids);
    for (auto& c : clusters) {
      std::vector<double> ms;
      for (auto pid : c.members) ms.push_back(scores.at(row_of.at(pid), col_of.at(c.cluster_id)));
      if (const auto* p = std::get_if<Percentile>(&cfg_.harvest)) c.harvest_threshold = percentile(ms, p->q);
      else c.harvest_threshold = std::get<Absolute>(cfg_.harvest).threshold;
    }
    (void)h;
  }

  FeatureMatrix train_rows_for(const std::vector<PatternCluster>& clusters, const FeatureMatrix& features) const {
    std::set<std::int64_t> ids;
    for (const auto& c : clusters) ids.insert(c.members.begin(), c.members.end());
    const auto row_of = index_of(features.ids);
    FeatureMatrix fm;
    fm.dim = features.dim;
    for (auto id : ids) fm.append(id, features.row(row_of.at(id)));
    return fm;
  }

  void harvest_into(PipelineState& st) const {
    const auto scores = score_patches(detectors_of(st.clusters), train_rows_for(st.clusters, st.features));
    auto h = harvest(st.clusters, scores, cfg_.harvest);
    st.clusters = std::move(h.clusters);
    st.eliminated.insert(h.eliminated.begin(), h.eliminated.end());
  }

  void require_every_category(const std::vector<PatternCluster>& cs, const char* where) const {
    std::set<int> cats;
    for (const auto& c : cs) cats.insert(c.category);
    for (int k = 0; k < ds_.spec.count(); ++k) {
      if (!cats.count(k)) {
        throw StateError(std::string(where) + ": category '" + ds_.spec.class_names[k] + "' has no clusters");
      }
    }
  }

  /// Sorts clusters by (category, id) and renumbers 0..K-1; returns old -> new.
  static std::map<std::int64_t, std::int64_t> renumber(PipelineState& st) {
    std::stable_sort(st.clusters.begin(), st.clusters.end(), [](const PatternCluster& a, const PatternCluster& b) {
      return a.category != b.category ? a.category < b.category : a.cluster_id < b.cluster_id;
    });
    std::map<std::int64_t, std::int64_t> m;
    for (std::size_t i = 0; i < st.clusters.size(); ++i) {
      m[st.clusters[i].cluster_id] = static_cast<std::int64_t>(i);
      st.clusters[i].cluster_id = static_cast<std::int64_t>(i);
      if (st.clusters[i].detector) st.clusters[i].detector->cluster_id = static_cast<std::int64_t>(i);
    }
    st.last_id_map = m;
    return m;
  }

  /// One label per member patch: among the clusters holding it, the one whose
  /// detector scores it highest (ties to the lower position).
  std::map<std::int64_t, int> exclusive_labels(const PipelineState& st) const {
    const auto row_of = index_of(st.features.ids);
    std::map<std::int64_t, std::pair<int, double>> best;
    for (std::size_t j = 0; j < st.clusters.size(); ++j) {
      const auto& c = st.clusters[j];
      for (auto pid : c.members) {
        const double s = score(*c.detector, st.features.row(row_of.at(pid)));
        auto it = best.find(pid);
        if (it == best.end() || s > it->second.second) best[pid] = {static_cast<int>(j), s};
      }
    }
    std::map<std::int64_t, int> out;
    for (const auto& [pid, v] : best) out[pid] = v.first;
    return out;
  }

  /// Surviving members of each category's clusters; reassignment moves
  /// patches between clusters of a category but never recruits new ones.
  static std::map<int, std::vector<std::int64_t>> update_candidates(const std::vector<PatternCluster>& clusters,
                                                                    const std::set<std::int64_t>& eliminated) {
    std::map<int, std::set<std::int64_t>> pool;
    for (const auto& c : clusters)
      for (auto pid : c.members)
        if (!eliminated.count(pid)) pool[c.category].insert(pid);
    std::map<int, std::vector<std::int64_t>> out;
    for (auto& [cat, ids] : pool) out[cat].assign(ids.begin(), ids.end());
    return out;
  }

  EncodedSplit encode_samples(const FeatureMatrix& features, const std::vector<LdaModel>& detectors,
                              Split split) const {
    EncodedSplit out;
    const PyramidConfig pyr{cfg_.grid.resize_side};
    for (std::size_t si = 0; si < ds_.samples.size(); ++si) {
      if (ds_.samples[si].split != split) continue;
      FeatureMatrix local;
      local.dim = features.dim;
      for (auto e = bank_.first[si]; e < bank_.first[si + 1]; ++e) local.append(features.ids[e], features.row(e));
      const auto sm = score_patches(detectors, local);
      std::vector<ScoredPatch> ps;
      for (std::size_t r = 0; r < local.rows(); ++r) {
        const auto& e = bank_.entries[bank_.first[si] + r];
        ps.push_back({e.row + e.scale / 2.0, e.col + e.scale / 2.0, sm.row(r)});
      }
      out.sample_pos.push_back(si);
      out.reps.push_back(encode(ps, detectors.size(), holistic_embedding_[si], pyr));
    }
    return out;
  }

  EvalReport validation_report(const PipelineState& st, const IterationRecord& rec) const {
    const auto detectors = detectors_of(st.clusters);
    const auto train = encode_samples(st.features, detectors, Split::Train);
    const auto val = encode_samples(st.features, detectors, Split::Val);
    const auto clf = train_classifier(train.reps, targets_for(train.sample_pos), ds_.spec.mode, cfg_.classifier);
    auto r = evaluate_scores(ds_, clf, val.sample_pos, val.reps, Split::Val, st.iteration);
    r.cluster_nmi = rec.cluster_nmi;
    r.cluster_purity = rec.cluster_purity;
    return r;
  }

  double holistic_validation_metric() const { return evaluate_holistic(Split::Val).map; }

  IterationRecord record_for(const PipelineState& st) const {
    IterationRecord r;
    r.iteration = st.iteration;
    std::tie(r.cluster_nmi, r.cluster_purity) = cluster_quality(st);
    r.clusters = st.clusters.size();
    for (const auto& c : st.clusters) r.members += c.members.size();
    r.eliminated = st.eliminated.size();
    return r;
  }

  const Dataset& ds_;
  PipelineConfig cfg_;
  ProgressSink progress_;
  PatchBank bank_;
  std::vector<std::vector<double>> holistic_embedding_;
  std::vector<std::size_t> train_positions_;
};

// ---------------------------------------------------------------------------
// Bundle persistence and inference

inline void write_grid_config(Container& c, const GridConfig& g) {
  std::vector<std::int64_t> v{g.resize_side, g.stride};
  v.insert(v.end(), g.scales.begin(), g.scales.end());
  c.put_i64("grid", v);
}

inline GridConfig read_grid_config(const Container& c) {
  const auto& v = c.i64("grid");
  if (v.size() < 3) throw FormatError("bundle: grid record too short");
  GridConfig g;
  g.resize_side = static_cast<int>(v[0]);
  g.stride = static_cast<int>(v[1]);
  g.scales.assign(v.begin() + 2, v.end());
  return g;
}

inline Container bundle_to_container(const ModelBundle& b) {
  Container c(Container::Kind::Bundle);
  write_label_spec(c, b.spec);
  write_grid_config(c, b.grid);
  c.put_int("use_context", b.use_context ? 1 : 0);
  write_network(c, "holistic", b.holistic);
  c.put_int("has_patch_net", b.patch_net ? 1 : 0);
  if (b.patch_net) write_network(c, "patch_net", *b.patch_net);
  write_classifier(c, "classifier", b.classifier);
  c.put_int("selected_iteration", b.selected_iteration);
  c.put_f64("history", b.history, {b.history.size()});
  c.put_scalar("initial_metric", b.initial_metric);
  c.put_scalar("holistic_metric", b.holistic_metric);

  std::vector<std::int64_t> meta;  // id, category, n_members, n_patterns, has_threshold
  std::vector<std::int64_t> members, itemsets;
  std::vector<double> pattern_stats, thresholds, weights, biases, lambdas;
  std::size_t dim = 0;
  for (const auto& cl : b.clusters) {
    meta.insert(meta.end(), {cl.cluster_id, cl.category, static_cast<std::int64_t>(cl.members.size()),
                             static_cast<std::int64_t>(cl.patterns.size())});
    members.insert(members.end(), cl.members.begin(), cl.members.end());
    for (const auto& p : cl.patterns) {
      itemsets.push_back(static_cast<std::int64_t>(p.itemset.size()));
      itemsets.insert(itemsets.end(), p.itemset.begin(), p.itemset.end());
      itemsets.push_back(p.target);
      pattern_stats.insert(pattern_stats.end(), {p.support, p.confidence});
    }
    thresholds.push_back(cl.harvest_threshold.value_or(std::nan("")));
    if (!cl.detector) throw StateError("bundle: cluster without detector");
    dim = cl.detector->w.size();
    weights.insert(weights.end(), cl.detector->w.begin(), cl.detector->w.end());
    biases.push_back(cl.detector->b);
    lambdas.push_back(cl.detector->lambda);
  }
  c.put_i64("clusters.meta", meta, {b.clusters.size(), 4});
  c.put_i64("clusters.members", members);
  c.put_i64("clusters.itemsets", itemsets);
  c.put_f64("clusters.pattern_stats", pattern_stats);
  c.put_f64("clusters.thresholds", thresholds);
  c.put_f64("detectors.w", weights, {b.clusters.size(), dim});
  c.put_f64("detectors.b", biases);
  c.put_f64("detectors.lambda", lambdas);

  std::vector<std::int64_t> top_ids;
  std::vector<double> top_scores, tiles;
  std::vector<std::int64_t> top_meta;  // cluster id, count, tile side
  for (const auto& [cid, list] : b.top_members) {
    const auto& t = b.top_tiles.at(cid);
    top_meta.insert(top_meta.end(), {cid, static_cast<std::int64_t>(list.size()), t.empty() ? 0 : t[0].side});
    for (const auto& [pid, s] : list) {
      top_ids.push_back(pid);
      top_scores.push_back(s);
    }
    for (const auto& g : t) tiles.insert(tiles.end(), g.px.begin(), g.px.end());
  }
  c.put_i64("top.meta", top_meta);
  c.put_i64("top.ids", top_ids);
  c.put_f64("top.scores", top_scores);
  c.put_f64("top.tiles", tiles);
  return c;
}

inline ModelBundle bundle_from_container(const Container& c) {
  if (c.kind() != Container::Kind::Bundle) throw FormatError("container is not a model bundle");
  ModelBundle b;
  b.spec = read_label_spec(c);
  b.grid = read_grid_config(c);
  b.use_context = c.integer("use_context") != 0;
  b.holistic = read_network(c, "holistic");
  if (c.integer("has_patch_net")) b.patch_net = read_network(c, "patch_net");
  b.classifier = read_classifier(c, "classifier");
  b.selected_iteration = static_cast<int>(c.integer("selected_iteration"));
  b.history = c.f64("history");
  b.initial_metric = c.scalar("initial_metric");
  b.holistic_metric = c.scalar("holistic_metric");

  const auto& meta = c.i64("clusters.meta");
  const auto& members = c.i64("clusters.members");
  const auto& itemsets = c.i64("clusters.itemsets");
  const auto& stats = c.f64("clusters.pattern_stats");
  const auto& thresholds = c.f64("clusters.thresholds");
  const auto& wt = c.get("detectors.w");
  const auto& biases = c.f64("detectors.b");
  const auto& lambdas = c.f64("detectors.lambda");
  const std::size_t k = meta.size() / 4;
  if (wt.shape.size() != 2 || wt.shape[0] != k || biases.size() != k || thresholds.size() != k)
    throw FormatError("bundle: detector shapes");
  const std::size_t dim = wt.shape[1];
  std::size_t mp = 0, ip = 0, sp = 0;
  for (std::size_t i = 0; i < k; ++i) {
    PatternCluster cl;
    cl.cluster_id = meta[4 * i];
    cl.category = static_cast<int>(meta[4 * i + 1]);
    const auto nm = static_cast<std::size_t>(meta[4 * i + 2]);
    const auto np = static_cast<std::size_t>(meta[4 * i + 3]);
    if (mp + nm > members.size()) throw FormatError("bundle: member list truncated");
    cl.members.assign(members.begin() + mp, members.begin() + mp + nm);
    mp += nm;
    for (std::size_t p = 0; p < np; ++p) {
      AssociationPattern pat;
      if (ip >= itemsets.size()) throw FormatError("bundle: itemsets truncated");
      const auto len = static_cast<std::size_t>(itemsets[ip++]);
      if (ip + len + 1 > itemsets.size() || sp + 2 > stats.size()) throw FormatError("bundle: itemsets truncated");
      for (std::size_t q = 0; q < len; ++q) pat.itemset.push_back(static_cast<int>(itemsets[ip++]));
      pat.target = static_cast<int>(itemsets[ip++]);
      pat.support = stats[sp++];
      pat.confidence = stats[sp++];
      cl.patterns.push_back(std::move(pat));
    }
    if (!std::isnan(thresholds[i])) cl.harvest_threshold = thresholds[i];
    LdaModel m;
    m.cluster_id = cl.cluster_id;
    m.w.assign(wt.f64.begin() + i * dim, wt.f64.begin() + (i + 1) * dim);
    m.b = biases[i];
    m.lambda = lambdas.at(i);
    cl.detector = std::move(m);
    b.clusters.push_back(std::move(cl));
  }

  const auto& top_meta = c.i64("top.meta");
  const auto& top_ids = c.i64("top.ids");
  const auto& top_scores = c.f64("top.scores");
  const auto& tiles = c.f64("top.tiles");
  std::size_t idp = 0, tp = 0;
  for (std::size_t i = 0; i + 3 <= top_meta.size(); i += 3) {
    const auto cid = top_meta[i];
    const auto n = static_cast<std::size_t>(top_meta[i + 1]);
    const int side = static_cast<int>(top_meta[i + 2]);
    auto& list = b.top_members[cid];
    auto& tl = b.top_tiles[cid];
    for (std::size_t q = 0; q < n; ++q) {
      if (idp >= top_ids.size()) throw FormatError("bundle: top member list truncated");
      list.emplace_back(top_ids[idp], top_scores.at(idp));
      ++idp;
      Grid g(side);
      const std::size_t sz = static_cast<std::size_t>(side) * side;
      if (tp + sz > tiles.size()) throw FormatError("bundle: tiles truncated");
      std::copy_n(tiles.begin() + static_cast<std::ptrdiff_t>(tp), sz, g.px.begin());
      tp += sz;
      tl.push_back(std::move(g));
    }
  }
  return b;
}

inline void save_bundle(const ModelBundle& b, const std::filesystem::path& path) { bundle_to_container(b).save(path); }

inline ModelBundle load_bundle(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("bundle not found: " + path.string());
  return bundle_from_container(Container::load(path));
}

/// Representation of one sample under a bundle.
inline std::vector<double> bundle_representation(const ModelBundle& b, const PersonSample& s) {
  if (!b.patch_net) throw StateError("bundle has no patch network");
  const auto& net = *b.patch_net;
  const auto views = box_views(s, b.holistic.arch);
  const auto holistic = forward(b.holistic, views.patch_view, views.context_view).embedding;
  const Grid context = b.use_context ? resize_bilinear(s.image, net.arch.context_input_side)
                                     : Grid(net.arch.context_input_side, 0.0);
  const auto patches = extract_patches(s, b.grid);
  EmbeddingInput in;
  in.contexts = {context};
  for (const auto& p : patches) {
    in.patches.push_back(resize_patch(p, net.arch.patch_input_side));
    in.context_of.push_back(0);
    in.ids.push_back(p.patch_id);
  }
  const auto feats = extract_embeddings(net, in);
  std::vector<LdaModel> detectors;
  for (const auto& c : b.clusters) detectors.push_back(*c.detector);
  const auto sm = score_patches(detectors, feats);
  std::vector<ScoredPatch> ps;
  for (std::size_t r = 0; r < patches.size(); ++r)
    ps.push_back({patches[r].center_row(), patches[r].center_col(), sm.row(r)});
  return encode(ps, detectors.size(), holistic, PyramidConfig{b.grid.resize_side});
}

/// Scores every sample of a split with a bundle and reports per-class AP.
inline EvalReport evaluate_bundle(const ModelBundle& b, const Dataset& ds, Split split,
                                  std::vector<std::vector<double>>* scores_out = nullptr) {
  if (b.spec.count() != ds.spec.count() || b.spec.mode != ds.spec.mode)
    throw PreconditionError("evaluate: bundle label space differs from dataset");
  std::vector<std::size_t> pos;
  std::vector<std::vector<double>> reps;
  for (std::size_t si = 0; si < ds.samples.size(); ++si) {
    if (ds.samples[si].split != split) continue;
    pos.push_back(si);
    reps.push_back(bundle_representation(b, ds.samples[si]));
    if (scores_out) scores_out->push_back(predict(b.classifier, reps.back()));
  }
  auto r = Pipeline::evaluate_scores(ds, b.classifier, pos, reps, split, b.selected_iteration);
  return r;
}

}  // namespace deepcamp
