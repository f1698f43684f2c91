#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kra/detector.hpp"
#include "kra/rng.hpp"
#include "kra/synth_data.hpp"

namespace kra::testing {

inline Tensor random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline DatasetManifest small_manifest(std::size_t per_class) {
  DatasetManifest m;
  m.seed = 900;
  m.train = per_class;
  m.val = 10;
  m.test = 50;
  return m;
}

// A detector trained on a small split, built once per process.
inline const Detector& trained_detector(const std::string& arch) {
  static std::map<std::string, Detector> cache;
  auto it = cache.find(arch);
  if (it == cache.end()) {
    const DatasetManifest m = small_manifest(60);
    const auto train_set = generate_split(m, Split::train);
    const auto val_set = generate_split(m, Split::val);
    Detector d = Detector::initialize(find_architecture(arch), 1);
    TrainConfig c;
    c.epochs = 15;
    train(d, train_set, val_set, c);
    it = cache.emplace(arch, std::move(d)).first;
  }
  return it->second;
}

inline std::vector<LabeledImage> test_images() {
  return generate_split(small_manifest(60), Split::test);
}

}  // namespace kra::testing
