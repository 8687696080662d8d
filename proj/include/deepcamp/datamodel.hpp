#pragma once

#include <algorithm>
#include <array>
#include <numbers>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "deepcamp/container.hpp"
#include "deepcamp/core.hpp"

namespace deepcamp {

enum class Mode { Action, Attribute };
enum class Split : std::int8_t { Train = 0, Val = 1, Test = 2 };

inline const char* to_string(Mode m) { return m == Mode::Action ? "action" : "attribute"; }
inline const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}
inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "'");
}

struct LabelSpec {
  Mode mode = Mode::Action;
  std::vector<std::string> class_names;

  int count() const { return static_cast<int>(class_names.size()); }

  void validate() const {
    require_config(class_names.size() >= 2, "label spec needs at least 2 categories");
    std::set<std::string> seen(class_names.begin(), class_names.end());
    require_config(seen.size() == class_names.size(), "label spec has duplicate category names");
  }

  static LabelSpec numbered(Mode mode, int count) {
    LabelSpec s;
    s.mode = mode;
    for (int i = 0; i < count; ++i) s.class_names.push_back((mode == Mode::Action ? "action" : "attr") + std::to_string(i));
    return s;
  }

  friend bool operator==(const LabelSpec&, const LabelSpec&) = default;
};

struct PersonSample {
  std::int64_t sample_id = 0;
  Split split = Split::Train;
  Grid image;
  int action_label = -1;                    // Action mode only
  std::vector<std::int8_t> attribute_labels;  // Attribute mode only: +1, -1, 0

  friend bool operator==(const PersonSample&, const PersonSample&) = default;
};

struct SynthConfig {
  int n_train = 120;
  int n_val = 60;
  int n_test = 60;
  int box_side = 64;
  int motifs_per_class = 2;
  int motif_side = 16;
  double noise_sigma = 0.12;
  int distractors_per_image = 2;
  // Amplitude of a faint class-dependent low-frequency shading; 0 disables.
  double class_cue_amplitude = 0.12;
  // Attribute mode: probability an attribute is present, and probability its
  // label is recorded as unspecified (0).
  double attribute_present_rate = 0.5;
  double unspecified_rate = 0.15;
  std::uint64_t seed = 1;

  void validate() const {
    require_config(n_train >= 1 && n_val >= 1 && n_test >= 1, "synth: every split needs at least one sample");
    require_config(motifs_per_class >= 1, "synth: motifs_per_class must be >= 1");
    require_config(motif_side >= 2, "synth: motif_side must be >= 2");
    require_config(motif_side < box_side, "synth: motif_side must be smaller than box_side");
    require_config(noise_sigma >= 0.0, "synth: noise_sigma must be >= 0");
    require_config(distractors_per_image >= 0, "synth: distractors_per_image must be >= 0");
    require_config(class_cue_amplitude >= 0.0, "synth: class_cue_amplitude must be >= 0");
    require_config(attribute_present_rate > 0.0 && attribute_present_rate < 1.0,
                   "synth: attribute_present_rate must be in (0,1)");
    require_config(unspecified_rate >= 0.0 && unspecified_rate < 1.0, "synth: unspecified_rate must be in [0,1)");
  }
};

/// One planted motif occurrence, in original box coordinates.
struct Stamp {
  std::int64_t sample_id = 0;
  int category = 0;
  int motif_index = 0;
  int row = 0;
  int col = 0;
  int side = 0;

  friend bool operator==(const Stamp&, const Stamp&) = default;
};

inline constexpr int kBackground = -1;

/// Ground truth for cluster-quality evaluation: the motif catalog and every
/// placement. Patch-level identities are derived from placements.
struct MotifOracle {
  int motifs_per_class = 0;
  int motif_side = 0;
  int box_side = 0;
  std::vector<Grid> catalog;  // index = category * motifs_per_class + motif_index
  std::vector<Stamp> stamps;

  int identity(int category, int motif_index) const { return category * motifs_per_class + motif_index; }

  std::set<int> motif_identities() const {
    std::set<int> ids;
    for (std::size_t i = 0; i < catalog.size(); ++i) ids.insert(static_cast<int>(i));
    return ids;
  }

  std::vector<const Stamp*> stamps_of(std::int64_t sample_id) const {
    std::vector<const Stamp*> out;
    for (const auto& s : stamps)
      if (s.sample_id == sample_id) out.push_back(&s);
    return out;
  }

  /// Identity of the motif covered by a window (resized-box coordinates), or
  /// kBackground. A motif counts if at least half its area lies inside the
  /// window; the largest covered fraction wins, ties to the earlier stamp.
  int window_identity(std::int64_t sample_id, int row, int col, int side, int resize_side) const {
    const double k = static_cast<double>(resize_side) / box_side;
    int best = kBackground;
    double best_frac = 0.5 - 1e-12;
    for (const auto& s : stamps) {
      if (s.sample_id != sample_id) continue;
      const double r0 = s.row * k, c0 = s.col * k, len = s.side * k;
      const double ir = std::max(0.0, std::min(r0 + len, double(row + side)) - std::max(r0, double(row)));
      const double ic = std::max(0.0, std::min(c0 + len, double(col + side)) - std::max(c0, double(col)));
      const double frac = (ir * ic) / (len * len);
      if (frac > best_frac) {
        best_frac = frac;
        best = identity(s.category, s.motif_index);
      }
    }
    return best;
  }

  /// True when the window fully contains some stamp of the given category.
  bool window_contains_category(std::int64_t sample_id, int category, int row, int col, int side,
                                int resize_side) const {
    const double k = static_cast<double>(resize_side) / box_side;
    for (const auto& s : stamps) {
      if (s.sample_id != sample_id || s.category != category) continue;
      const double r0 = s.row * k, c0 = s.col * k, len = s.side * k;
      if (r0 >= row - 1e-9 && c0 >= col - 1e-9 && r0 + len <= row + side + 1e-9 && c0 + len <= col + side + 1e-9)
        return true;
    }
    return false;
  }

  friend bool operator==(const MotifOracle&, const MotifOracle&) = default;
};

struct Dataset {
  LabelSpec spec;
  std::vector<PersonSample> samples;
  MotifOracle oracle;
  SynthConfig synth;  // generator settings, echoed into the manifest

  std::vector<const PersonSample*> split(Split s) const {
    std::vector<const PersonSample*> out;
    for (const auto& x : samples)
      if (x.split == s) out.push_back(&x);
    return out;
  }

  const PersonSample& by_id(std::int64_t id) const {
    // ids are dense and ordered for generated and loaded datasets
    if (id >= 0 && static_cast<std::size_t>(id) < samples.size() && samples[id].sample_id == id) return samples[id];
    for (const auto& s : samples)
      if (s.sample_id == id) return s;
    throw StateError("unknown sample id " + std::to_string(id));
  }
};

namespace detail {

inline Grid make_block_motif(Rng& rng, int side, int cells) {
  // cells x cells random binary blocks scaled up to side x side
  std::vector<int> bits(static_cast<std::size_t>(cells) * cells);
  int ones = 0;
  do {
    ones = 0;
    for (auto& b : bits) {
      b = static_cast<int>(rng.below(2));
      ones += b;
    }
  } while (ones < cells || ones > cells * cells - cells);
  Grid g(side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const int br = r * cells / side, bc = c * cells / side;
      g.at(r, c) = bits[static_cast<std::size_t>(br) * cells + bc] ? 0.92 : 0.08;
    }
  return g;
}

/// Square-wave grating through the motif center.
inline Grid make_grating_motif(int side, double theta, double period, double phase) {
  Grid g(side);
  const double mid = (side - 1) / 2.0;
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double u = (c - mid) * std::cos(theta) + (r - mid) * std::sin(theta);
      g.at(r, c) = std::sin(2.0 * std::numbers::pi * u / period + phase) >= 0.0 ? 0.92 : 0.08;
    }
  return g;
}

inline int grid_distance(const Grid& a, const Grid& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) d += (a.px[i] > 0.5) != (b.px[i] > 0.5);
  return d;
}

inline bool overlaps(int r, int c, int side, const std::vector<std::array<int, 3>>& placed) {
  for (const auto& p : placed) {
    if (r < p[0] + p[2] && p[0] < r + side && c < p[1] + p[2] && p[1] < c + side) return true;
  }
  return false;
}

inline std::pair<int, int> place(Rng& rng, int box, int side, const std::vector<std::array<int, 3>>& placed) {
  const int span = box - side + 1;
  int r = 0, c = 0;
  for (int attempt = 0; attempt < 200; ++attempt) {
    r = static_cast<int>(rng.below(span));
    c = static_cast<int>(rng.below(span));
    if (!overlaps(r, c, side, placed)) break;
  }
  return {r, c};
}

inline void stamp(Grid& img, const Grid& motif, int r0, int c0) {
  for (int r = 0; r < motif.side; ++r)
    for (int c = 0; c < motif.side; ++c) img.at(r0 + r, c0 + c) = motif.at(r, c);
}

}  // namespace detail

/// Seeded synthetic person boxes with planted class motifs over noisy
/// background. Identical (cfg, spec) gives bit-identical output.
inline Dataset generate_synthetic_dataset(const SynthConfig& cfg, const LabelSpec& spec) {
  cfg.validate();
  spec.validate();
  Rng rng(cfg.seed);
  const int C = spec.count();
  const int cells = std::max(2, std::min(4, cfg.motif_side / 3));

  Dataset ds;
  ds.spec = spec;
  ds.synth = cfg;
  auto& oracle = ds.oracle;
  oracle.motifs_per_class = cfg.motifs_per_class;
  oracle.motif_side = cfg.motif_side;
  oracle.box_side = cfg.box_side;

  // Motif catalog: gratings whose orientation is spread over categories and
  // whose period is spread over motif indices, each jittered once per seed.
  const int M = cfg.motifs_per_class;
  const double min_period = 3.0, max_period = std::max(min_period + 1.0, cfg.motif_side / 2.0);
  for (int c = 0; c < C; ++c) {
    for (int k = 0; k < M; ++k) {
      const double theta = std::numbers::pi * (c + 0.3 * (rng.uniform() - 0.5)) / C;
      const double t = M == 1 ? 0.5 : static_cast<double>(k) / (M - 1);
      const double period = min_period + (max_period - min_period) * t;
      const double phase = 2.0 * std::numbers::pi * rng.uniform();
      oracle.catalog.push_back(detail::make_grating_motif(cfg.motif_side, theta, period, phase));
    }
  }

  // Faint per-class shading direction, low frequency.
  std::vector<double> cue_angle(C);
  for (int c = 0; c < C; ++c) cue_angle[c] = 2.0 * 3.14159265358979323846 * c / C;

  const int totals[3] = {cfg.n_train, cfg.n_val, cfg.n_test};
  const Split splits[3] = {Split::Train, Split::Val, Split::Test};
  std::int64_t next_id = 0;
  const int S = cfg.box_side;
  for (int si = 0; si < 3; ++si) {
    for (int i = 0; i < totals[si]; ++i) {
      PersonSample s;
      s.sample_id = next_id++;
      s.split = splits[si];
      s.image = Grid(S);
      for (auto& v : s.image.px) v = 0.5 + cfg.noise_sigma * rng.normal();

      std::vector<int> planted;  // categories whose motif gets stamped
      if (spec.mode == Mode::Action) {
        s.action_label = i % C;
        planted.push_back(s.action_label);
      } else {
        s.attribute_labels.assign(C, -1);
        for (int c = 0; c < C; ++c) {
          const bool present = rng.uniform() < cfg.attribute_present_rate;
          if (present) planted.push_back(c);
          s.attribute_labels[c] = present ? 1 : -1;
          if (rng.uniform() < cfg.unspecified_rate) s.attribute_labels[c] = 0;
        }
      }

      if (cfg.class_cue_amplitude > 0.0) {
        for (int c : planted) {
          const double a = cue_angle[c];
          for (int r = 0; r < S; ++r)
            for (int col = 0; col < S; ++col) {
              const double u = (std::cos(a) * (col - S / 2.0) + std::sin(a) * (r - S / 2.0)) / S;
              s.image.at(r, col) += cfg.class_cue_amplitude * 2.0 * u;
            }
        }
      }

      std::vector<std::array<int, 3>> placed;
      for (int c : planted) {
        const int idx = static_cast<int>(rng.below(cfg.motifs_per_class));
        auto [r, col] = detail::place(rng, S, cfg.motif_side, placed);
        placed.push_back({r, col, cfg.motif_side});
        detail::stamp(s.image, oracle.catalog[oracle.identity(c, idx)], r, col);
        oracle.stamps.push_back(Stamp{s.sample_id, c, idx, r, col, cfg.motif_side});
      }
      for (int d = 0; d < cfg.distractors_per_image; ++d) {
        Grid junk = detail::make_block_motif(rng, cfg.motif_side, cells);
        auto [r, col] = detail::place(rng, S, cfg.motif_side, placed);
        placed.push_back({r, col, cfg.motif_side});
        detail::stamp(s.image, junk, r, col);
      }
      for (auto& v : s.image.px) v = std::clamp(v, 0.0, 1.0);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

inline Dataset generate_synthetic_dataset(const SynthConfig& cfg, Mode mode, int categories) {
  return generate_synthetic_dataset(cfg, LabelSpec::numbered(mode, categories));
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string join_lines(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += '\n';
    s += v[i];
  }
  return s;
}

inline std::vector<std::string> split_lines(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur)) out.push_back(cur);
  return out;
}

inline void write_label_spec(Container& c, const LabelSpec& spec) {
  c.put_int("spec.mode", spec.mode == Mode::Action ? 0 : 1);
  c.put_text("spec.class_names", join_lines(spec.class_names));
}

inline LabelSpec read_label_spec(const Container& c) {
  LabelSpec spec;
  spec.mode = c.integer("spec.mode") == 0 ? Mode::Action : Mode::Attribute;
  spec.class_names = split_lines(c.text("spec.class_names"));
  return spec;
}

inline Container dataset_to_container(const Dataset& ds) {
  Container c(Container::Kind::Dataset);
  write_label_spec(c, ds.spec);
  const auto n = ds.samples.size();
  const int S = n ? ds.samples[0].image.side : 0;
  const int C = ds.spec.count();
  std::vector<std::int64_t> ids, split, action, attrs;
  std::vector<double> px;
  px.reserve(n * S * S);
  for (const auto& s : ds.samples) {
    if (s.image.side != S) throw FormatError("dataset: samples must share one box side");
    ids.push_back(s.sample_id);
    split.push_back(static_cast<std::int64_t>(s.split));
    action.push_back(s.action_label);
    if (ds.spec.mode == Mode::Attribute) {
      if (static_cast<int>(s.attribute_labels.size()) != C) throw FormatError("dataset: attribute vector size");
      for (auto a : s.attribute_labels) attrs.push_back(a);
    }
    px.insert(px.end(), s.image.px.begin(), s.image.px.end());
  }
  c.put_i64("samples.id", ids);
  c.put_i64("samples.split", split);
  c.put_i64("samples.action", action);
  c.put_i64("samples.attributes", attrs, {n, ds.spec.mode == Mode::Attribute ? std::uint64_t(C) : 0});
  c.put_f64("samples.pixels", px, {n, std::uint64_t(S), std::uint64_t(S)});

  const auto& o = ds.oracle;
  c.put_int("oracle.motifs_per_class", o.motifs_per_class);
  c.put_int("oracle.motif_side", o.motif_side);
  c.put_int("oracle.box_side", o.box_side);
  std::vector<double> cat;
  for (const auto& g : o.catalog) cat.insert(cat.end(), g.px.begin(), g.px.end());
  c.put_f64("oracle.catalog", cat, {o.catalog.size(), std::uint64_t(o.motif_side), std::uint64_t(o.motif_side)});
  std::vector<std::int64_t> st;
  for (const auto& s : o.stamps) st.insert(st.end(), {s.sample_id, s.category, s.motif_index, s.row, s.col, s.side});
  c.put_i64("oracle.stamps", st, {o.stamps.size(), 6});

  const auto& g = ds.synth;
  c.put_i64("synth.ints", {g.n_train, g.n_val, g.n_test, g.box_side, g.motifs_per_class, g.motif_side,
                           g.distractors_per_image, static_cast<std::int64_t>(g.seed)});
  c.put_f64("synth.reals", {g.noise_sigma, g.class_cue_amplitude, g.attribute_present_rate, g.unspecified_rate});
  return c;
}

inline Dataset dataset_from_container(const Container& c) {
  if (c.kind() != Container::Kind::Dataset) throw FormatError("container is not a dataset");
  Dataset ds;
  ds.spec = read_label_spec(c);
  const auto& ids = c.i64("samples.id");
  const auto& split = c.i64("samples.split");
  const auto& action = c.i64("samples.action");
  const auto& attrs = c.i64("samples.attributes");
  const auto& pxt = c.get("samples.pixels");
  const auto n = ids.size();
  if (pxt.shape.size() != 3 || pxt.shape[0] != n) throw FormatError("dataset: pixel tensor shape");
  const int S = static_cast<int>(pxt.shape[1]);
  const int C = ds.spec.count();
  if (split.size() != n || action.size() != n) throw FormatError("dataset: sample column lengths differ");
  if (ds.spec.mode == Mode::Attribute && attrs.size() != n * C) throw FormatError("dataset: attribute matrix shape");
  for (std::size_t i = 0; i < n; ++i) {
    PersonSample s;
    s.sample_id = ids[i];
    if (split[i] < 0 || split[i] > 2) throw FormatError("dataset: bad split tag");
    s.split = static_cast<Split>(split[i]);
    s.action_label = static_cast<int>(action[i]);
    if (ds.spec.mode == Mode::Attribute)
      for (int k = 0; k < C; ++k) s.attribute_labels.push_back(static_cast<std::int8_t>(attrs[i * C + k]));
    s.image = Grid(S);
    std::copy_n(pxt.f64.begin() + static_cast<std::ptrdiff_t>(i * S * S), S * S, s.image.px.begin());
    ds.samples.push_back(std::move(s));
  }
  auto& o = ds.oracle;
  o.motifs_per_class = static_cast<int>(c.integer("oracle.motifs_per_class"));
  o.motif_side = static_cast<int>(c.integer("oracle.motif_side"));
  o.box_side = static_cast<int>(c.integer("oracle.box_side"));
  const auto& cat = c.f64("oracle.catalog");
  const std::size_t per = static_cast<std::size_t>(o.motif_side) * o.motif_side;
  for (std::size_t i = 0; per && i < cat.size() / per; ++i) {
    Grid g(o.motif_side);
    std::copy_n(cat.begin() + static_cast<std::ptrdiff_t>(i * per), per, g.px.begin());
    o.catalog.push_back(std::move(g));
  }
  const auto& st = c.i64("oracle.stamps");
  for (std::size_t i = 0; i + 6 <= st.size(); i += 6)
    o.stamps.push_back(Stamp{st[i], int(st[i + 1]), int(st[i + 2]), int(st[i + 3]), int(st[i + 4]), int(st[i + 5])});

  const auto& gi = c.i64("synth.ints");
  const auto& gr = c.f64("synth.reals");
  if (gi.size() != 8 || gr.size() != 4) throw FormatError("dataset: synth echo shape");
  auto& g = ds.synth;
  g.n_train = int(gi[0]), g.n_val = int(gi[1]), g.n_test = int(gi[2]), g.box_side = int(gi[3]);
  g.motifs_per_class = int(gi[4]), g.motif_side = int(gi[5]), g.distractors_per_image = int(gi[6]);
  g.seed = static_cast<std::uint64_t>(gi[7]);
  g.noise_sigma = gr[0], g.class_cue_amplitude = gr[1], g.attribute_present_rate = gr[2], g.unspecified_rate = gr[3];
  return ds;
}

inline const char* kDatasetFile = "dataset.dcmp";
inline const char* kDatasetManifest = "dataset_manifest.txt";

inline std::string dataset_manifest(const Dataset& ds) {
  std::ostringstream m;
  m << "mode=" << to_string(ds.spec.mode) << "\n";
  m << "categories=" << ds.spec.count() << "\n";
  m << "class_names=";
  for (std::size_t i = 0; i < ds.spec.class_names.size(); ++i) m << (i ? "," : "") << ds.spec.class_names[i];
  m << "\n";
  m << "n_train=" << ds.split(Split::Train).size() << "\n";
  m << "n_val=" << ds.split(Split::Val).size() << "\n";
  m << "n_test=" << ds.split(Split::Test).size() << "\n";
  m << "box_side=" << ds.synth.box_side << "\n";
  m << "motifs_per_class=" << ds.oracle.motifs_per_class << "\n";
  m << "motif_side=" << ds.oracle.motif_side << "\n";
  m << "stamps=" << ds.oracle.stamps.size() << "\n";
  m << "seed=" << ds.synth.seed << "\n";
  return m.str();
}

/// Writes dataset.dcmp and dataset_manifest.txt into dir.
inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  dataset_to_container(ds).save(dir / kDatasetFile);
  std::ofstream f(dir / kDatasetManifest);
  if (!f) throw IoError("cannot write manifest in " + dir.string());
  f << dataset_manifest(ds);
}

/// Accepts either the directory written by save_dataset or the .dcmp file.
inline Dataset load_dataset(const std::filesystem::path& path) {
  auto file = std::filesystem::is_directory(path) ? path / kDatasetFile : path;
  if (!std::filesystem::exists(file)) throw IoError("dataset not found: " + file.string());
  return dataset_from_container(Container::load(file));
}

}  // namespace deepcamp
