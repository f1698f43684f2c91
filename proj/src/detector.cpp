#include "kra/detector.hpp"

#include <algorithm>
#include <cmath>

#include "kra/error.hpp"
#include "kra/rng.hpp"

namespace kra {
namespace {

// Fixed input standardization, (x - 0.5) * 4. Without it the first conv layer
// is dominated by the image mean and SGD stalls on the high-frequency artifact.
constexpr double kInputCentre = 0.5;
constexpr double kInputScale = 4.0;

std::vector<Architecture> make_registry() {
  return {
      {"A", ImageDims{}, {{8, 3}, {16, 3}, {32, 3}}},
      {"B", ImageDims{}, {{8, 3}, {8, 3}, {16, 3}, {16, 3}}},
      {"C", ImageDims{}, {{16, 5}, {32, 5}, {64, 5}}},
  };
}

void remove_filter_means(Tensor& kernel) {
  const std::size_t taps = kernel.dim(2) * kernel.dim(3);
  for (std::size_t f = 0; f < kernel.size(); f += taps) {
    double mean = 0.0;
    for (std::size_t i = 0; i < taps; ++i) mean += kernel[f + i];
    mean /= static_cast<double>(taps);
    for (std::size_t i = 0; i < taps; ++i) kernel[f + i] -= mean;
  }
}

const std::vector<Architecture>& registry() {
  static const std::vector<Architecture> archs = make_registry();
  return archs;
}

}  // namespace

Prediction Classifier::predict(const Tensor& image) const {
  Prediction p;
  p.logit = logit(image);
  p.probability = ops::sigmoid(p.logit);
  p.label = label_for_logit(p.logit);
  return p;
}

std::size_t Architecture::feature_count() const {
  std::size_t h = input.height, w = input.width;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    h /= 2;
    w /= 2;
  }
  return (blocks.empty() ? input.channels : blocks.back().channels) * h * w;
}

std::vector<Shape> Architecture::parameter_shapes() const {
  std::vector<Shape> shapes;
  std::size_t in = input.channels;
  for (const auto& b : blocks) {
    shapes.push_back({b.channels, in, b.kernel, b.kernel});
    shapes.push_back({b.channels});
    in = b.channels;
  }
  shapes.push_back({1, feature_count()});
  shapes.push_back({1});
  return shapes;
}

const Architecture& find_architecture(std::string_view id) {
  for (const auto& a : registry()) {
    if (a.id == id) return a;
  }
  throw Error(ErrorCode::unknown_architecture,
              "unknown detector architecture '" + std::string(id) + "'");
}

std::vector<std::string> architecture_ids() {
  std::vector<std::string> ids;
  for (const auto& a : registry()) ids.push_back(a.id);
  return ids;
}

Detector::Detector(Architecture architecture, std::vector<Tensor> parameters)
    : arch_(std::move(architecture)), params_(std::move(parameters)) {
  std::size_t h = arch_.input.height, w = arch_.input.width;
  for (const auto& b : arch_.blocks) {
    if (h % 2 || w % 2 || b.kernel % 2 == 0) {
      throw Error(ErrorCode::invalid_argument,
                  "architecture '" + arch_.id +
                      "' needs odd kernels and even extents at every pool");
    }
    h /= 2;
    w /= 2;
  }
  const auto shapes = arch_.parameter_shapes();
  if (shapes.size() != params_.size()) {
    throw Error(ErrorCode::shape_mismatch,
                "architecture '" + arch_.id + "' expects " +
                    std::to_string(shapes.size()) + " parameter tensors");
  }
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (params_[i].shape() != shapes[i]) {
      throw Error(ErrorCode::shape_mismatch,
                  "parameter " + std::to_string(i) + " has shape " +
                      shape_string(params_[i].shape()) + ", expected " +
                      shape_string(shapes[i]));
    }
  }
}

Detector Detector::initialize(const Architecture& architecture, std::uint64_t seed) {
  Rng rng(mix_seed(seed));
  std::vector<Tensor> params;
  for (const auto& shape : architecture.parameter_shapes()) {
    Tensor t(shape);
    if (shape.size() > 1) {
      const std::size_t fan_in = t.size() / shape[0];
      const double gain = shape.size() == 4 ? 2.0 : 1.0;
      const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
      for (double& v : t.data()) v = stddev * rng.normal();
      // First-layer filters start zero-mean so the smooth texture does not
      // drown the rectified high-frequency response early in training.
      if (params.empty()) remove_filter_means(t);
    }
    params.push_back(std::move(t));
  }
  return Detector(architecture, std::move(params));
}

std::vector<std::string> Detector::tap_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < arch_.blocks.size(); ++i) {
    names.push_back("conv" + std::to_string(i + 1));
  }
  return names;
}

Detector::Graph Detector::build(Tape& tape, Tensor batch) const {
  const Shape want = input_shape();
  if (batch.rank() != 4 || batch.dim(1) != want[0] || batch.dim(2) != want[1] ||
      batch.dim(3) != want[2]) {
    throw Error(ErrorCode::shape_mismatch,
                "detector '" + arch_.id + "' expects N x " + shape_string(want) +
                    " input, got " + shape_string(batch.shape()));
  }
  Graph g;
  g.input = tape.leaf(std::move(batch));
  for (const auto& p : params_) g.parameters.push_back(tape.leaf(p));

  Var h = tape.affine(g.input, kInputScale, -kInputCentre * kInputScale);
  for (std::size_t i = 0; i < arch_.blocks.size(); ++i) {
    const auto pad = arch_.blocks[i].kernel / 2;
    h = tape.conv2d(h, g.parameters[2 * i], g.parameters[2 * i + 1], 1, pad);
    h = tape.relu(h);
    tape.tap(h, "conv" + std::to_string(i + 1));
    h = tape.avgpool2x2(h);
  }
  h = tape.flatten(h);
  const std::size_t n = g.parameters.size();
  g.logit = tape.dense(h, g.parameters[n - 2], g.parameters[n - 1]);
  return g;
}

void Detector::require_image(const Tensor& image) const {
  if (image.shape() != input_shape()) {
    throw Error(ErrorCode::shape_mismatch,
                "detector '" + arch_.id + "' expects " +
                    shape_string(input_shape()) + " image, got " +
                    shape_string(image.shape()));
  }
}

double Detector::logit(const Tensor& image) const {
  require_image(image);
  return logits(std::span(&image, 1)).front();
}

LogitGradient Detector::logit_gradient(const Tensor& image) const {
  require_image(image);
  Shape batch_shape{1};
  batch_shape.insert(batch_shape.end(), image.shape().begin(), image.shape().end());
  Tape tape;
  const Graph g = build(tape, image.reshaped(batch_shape));
  tape.backward(g.logit);
  return {tape.value(g.logit)[0], tape.grad(g.input).reshaped(image.shape())};
}

std::vector<double> Detector::logits(std::span<const Tensor> images) const {
  constexpr std::size_t kChunk = 64;
  const Shape want = input_shape();
  const std::size_t volume = shape_volume(want);
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, images.size() - start);
    Tensor h({n, want[0], want[1], want[2]});
    for (std::size_t i = 0; i < n; ++i) {
      require_image(images[start + i]);
      std::copy(images[start + i].data().begin(), images[start + i].data().end(),
                h.data().begin() + static_cast<std::ptrdiff_t>(i * volume));
    }
    for (double& v : h.data()) v = kInputScale * v - kInputCentre * kInputScale;
    for (std::size_t b = 0; b < arch_.blocks.size(); ++b) {
      h = ops::conv2d(h, params_[2 * b], params_[2 * b + 1], 1, arch_.blocks[b].kernel / 2);
      h = ops::avgpool2x2(ops::relu(h));
    }
    h = h.reshaped({n, h.size() / n});
    const Tensor z = ops::dense(h, params_[params_.size() - 2], params_.back());
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  return out;
}

Tensor Detector::flat_parameters() const {
  std::vector<double> flat;
  for (const auto& p : params_) flat.insert(flat.end(), p.data().begin(), p.data().end());
  const std::size_t n = flat.size();
  return Tensor({n}, std::move(flat));
}

void Detector::set_flat_parameters(const Tensor& flat) {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.size();
  if (flat.size() != total) {
    throw Error(ErrorCode::shape_mismatch, "flat parameter vector has wrong length");
  }
  std::size_t offset = 0;
  for (auto& p : params_) {
    std::copy_n(flat.data().begin() + static_cast<std::ptrdiff_t>(offset), p.size(),
                p.data().begin());
    offset += p.size();
  }
}

}  // namespace kra
