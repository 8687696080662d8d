#pragma once

// Shared fixtures: small synthetic corpora and a cached short pipeline run.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include "deepcamp/config.hpp"
#include "deepcamp/pipeline.hpp"

namespace dctest {

/// Reduced corpus and budgets; one full run takes ~10 s on one core.
inline deepcamp::RunConfig small_run_config(std::uint64_t seed = 1) {
  deepcamp::RunConfig rc;
  rc.synth.n_train = 60;
  rc.synth.n_val = 24;
  rc.synth.n_test = 24;
  rc.synth.seed = seed;
  rc.pipeline.holistic_train.epochs = 10;
  rc.pipeline.train.epochs = 2;
  rc.pipeline.max_iterations = 2;
  rc.pipeline.seed = seed;
  return rc;
}

inline const deepcamp::Dataset& small_dataset() {
  static const deepcamp::Dataset ds = [] {
    const auto rc = small_run_config();
    return deepcamp::generate_synthetic_dataset(rc.synth, rc.label_spec());
  }();
  return ds;
}

/// One pipeline run on small_dataset(), shared by every test in a binary.
inline const deepcamp::Pipeline::RunResult& small_run() {
  static const deepcamp::Pipeline::RunResult r = [] {
    deepcamp::Pipeline p(small_dataset(), small_run_config().pipeline);
    return p.run();
  }();
  return r;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("deepcamp_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace dctest
