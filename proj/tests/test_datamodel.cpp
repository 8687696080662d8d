#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "deepcamp/container.hpp"
#include "deepcamp/datamodel.hpp"
#include "deepcamp/patchgrid.hpp"
#include "support.hpp"

using namespace deepcamp;

namespace {

SynthConfig tiny_synth(std::uint64_t seed = 3) {
  SynthConfig c;
  c.n_train = 8;
  c.n_val = 4;
  c.n_test = 4;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Rng c(42), d(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(c.normal(), d.normal());
}

TEST(Rng, UniformAndBelowRanges) {
  Rng r(5);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.below(7), 7u);
  }
  EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(Rng, DerivedSeedsDiffer) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t tag = 0; tag < 64; ++tag) seen.insert(derive_seed(1, tag));
  EXPECT_EQ(seen.size(), 64u);
}

TEST(LabelSpec, RejectsSingleClassAndDuplicates) {
  EXPECT_THROW(LabelSpec::numbered(Mode::Action, 1).validate(), ConfigError);
  LabelSpec s;
  s.class_names = {"a", "a"};
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_NO_THROW(LabelSpec::numbered(Mode::Attribute, 2).validate());
}

TEST(SynthConfig, EmptySplitRejected) {
  auto c = tiny_synth();
  c.n_train = 0;
  EXPECT_THROW(generate_synthetic_dataset(c, LabelSpec::numbered(Mode::Action, 4)), ConfigError);
}

TEST(SynthConfig, MotifNotSmallerThanBoxRejected) {
  auto c = tiny_synth();
  c.motif_side = c.box_side;
  EXPECT_THROW(generate_synthetic_dataset(c, LabelSpec::numbered(Mode::Action, 4)), ConfigError);
}

TEST(Synthetic, SameSeedIsBitIdentical) {
  const auto spec = LabelSpec::numbered(Mode::Action, 4);
  const auto a = generate_synthetic_dataset(tiny_synth(), spec);
  const auto b = generate_synthetic_dataset(tiny_synth(), spec);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.oracle, b.oracle);
  EXPECT_EQ(dataset_to_container(a).serialize(), dataset_to_container(b).serialize());
  const auto c = generate_synthetic_dataset(tiny_synth(4), spec);
  EXPECT_NE(a.samples, c.samples);
}

TEST(Synthetic, FourClassesTwoMotifsGiveEightIdentities) {
  auto c = tiny_synth();
  c.motifs_per_class = 2;
  const auto ds = generate_synthetic_dataset(c, LabelSpec::numbered(Mode::Action, 4));
  EXPECT_EQ(ds.oracle.motif_identities().size(), 8u);
  std::set<int> planted;
  for (const auto& s : ds.oracle.stamps) planted.insert(ds.oracle.identity(s.category, s.motif_index));
  EXPECT_LE(planted.size(), 8u);
  for (int id : planted) EXPECT_TRUE(ds.oracle.motif_identities().count(id));
}

TEST(Synthetic, SplitCountsAndPixelRange) {
  const auto c = tiny_synth();
  const auto ds = generate_synthetic_dataset(c, LabelSpec::numbered(Mode::Action, 4));
  EXPECT_EQ(ds.split(Split::Train).size(), 8u);
  EXPECT_EQ(ds.split(Split::Val).size(), 4u);
  EXPECT_EQ(ds.split(Split::Test).size(), 4u);
  for (const auto& s : ds.samples) {
    EXPECT_EQ(s.image.side, c.box_side);
    EXPECT_GE(s.action_label, 0);
    EXPECT_LT(s.action_label, 4);
    for (double v : s.image.px) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Synthetic, EveryActionSampleHasAGridWindowHoldingItsClassMotif) {
  const auto ds = generate_synthetic_dataset(tiny_synth(), LabelSpec::numbered(Mode::Action, 4));
  const GridConfig grid;
  for (const auto& s : ds.samples) {
    bool own = false;
    for (const auto* st : ds.oracle.stamps_of(s.sample_id)) own |= st->category == s.action_label;
    EXPECT_TRUE(own) << "sample " << s.sample_id;
    bool contained = false;
    for (const auto& p : extract_patches(s, grid))
      contained |= ds.oracle.window_contains_category(s.sample_id, s.action_label, p.row, p.col, p.scale,
                                                      grid.resize_side);
    EXPECT_TRUE(contained) << "sample " << s.sample_id;
  }
}

TEST(Synthetic, AttributeLabelsFollowStamps) {
  auto c = tiny_synth();
  c.n_train = 30;
  const auto ds = generate_synthetic_dataset(c, LabelSpec::numbered(Mode::Attribute, 4));
  int unspecified = 0;
  for (const auto& s : ds.samples) {
    ASSERT_EQ(s.attribute_labels.size(), 4u);
    std::set<int> cats;
    for (const auto* st : ds.oracle.stamps_of(s.sample_id)) cats.insert(st->category);
    for (int a = 0; a < 4; ++a) {
      const int l = s.attribute_labels[a];
      EXPECT_TRUE(l == 1 || l == -1 || l == 0);
      if (l == 1) {
        EXPECT_TRUE(cats.count(a));
      }
      if (l == -1) {
        EXPECT_FALSE(cats.count(a));
      }
      unspecified += l == 0;
    }
  }
  EXPECT_GT(unspecified, 0);
}

TEST(Persistence, DatasetRoundTripIsExact) {
  const auto ds = generate_synthetic_dataset(tiny_synth(), LabelSpec::numbered(Mode::Attribute, 3));
  const auto dir = dctest::scratch("dataset_roundtrip");
  save_dataset(ds, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / kDatasetManifest));
  const auto back = load_dataset(dir);
  EXPECT_EQ(back.spec, ds.spec);
  EXPECT_EQ(back.samples, ds.samples);
  EXPECT_EQ(back.oracle, ds.oracle);
}

TEST(Persistence, WrongMagicIsFormatError) {
  Container c;
  c.put_f64("x", {1.0, 2.0});
  auto buf = c.serialize();
  buf[0] = 'X';
  EXPECT_THROW(Container::deserialize(buf), FormatError);
}

TEST(Persistence, NewerVersionIsFormatError) {
  Container c;
  c.put_i64("n", {3});
  auto buf = c.serialize();
  buf[4] = 2;  // version field, little-endian u32
  try {
    Container::deserialize(buf);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
}

TEST(Persistence, TruncatedFileIsIoError) {
  Container c;
  c.put_f64("x", std::vector<double>(16, 0.5));
  const auto buf = c.serialize();
  EXPECT_THROW(Container::deserialize(buf.substr(0, buf.size() - 5)), IoError);
  const auto dir = dctest::scratch("truncated");
  {
    std::ofstream f(dir / "t.dcmp", std::ios::binary);
    f << buf.substr(0, 20);
  }
  EXPECT_THROW(Container::load(dir / "t.dcmp"), IoError);
}

TEST(Persistence, MissingDatasetIsIoError) {
  EXPECT_THROW(load_dataset("/nonexistent/deepcamp/dir"), IoError);
}

TEST(Persistence, ContainerPreservesEveryDtype) {
  Container c;
  c.put_f64("f", {0.1, -2.5, 1e300}, {3});
  c.put_i64("i", {-7, 0, 1LL << 50});
  c.put_text("t", "hello\nworld");
  const auto back = Container::deserialize(c.serialize());
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.text("t"), "hello\nworld");
  EXPECT_EQ(back.i64("i")[2], 1LL << 50);
}
