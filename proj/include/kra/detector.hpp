#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kra/label.hpp"
#include "kra/synth_data.hpp"
#include "kra/tape.hpp"
#include "kra/tensor.hpp"

namespace kra {

struct Prediction {
  Label label = Label::real;
  double probability = 0.5;
  double logit = 0.0;
};

// probability >= 0.5, i.e. logit >= 0, reads as fake. The boundary case
// goes to fake so clean and attacked evaluation agree on it.
inline Label label_for_logit(double logit) {
  return logit >= 0.0 ? Label::fake : Label::real;
}

struct LogitGradient {
  double logit = 0.0;
  Tensor gradient;  // d logit / d image, same shape as the image
};

// A differentiable binary classifier over C x H x W images. The attacks only
// need this much; Detector is the production implementation.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual Shape input_shape() const = 0;
  virtual double logit(const Tensor& image) const = 0;
  virtual LogitGradient logit_gradient(const Tensor& image) const = 0;

  Prediction predict(const Tensor& image) const;
};

struct ConvBlock {
  std::size_t channels = 8;
  std::size_t kernel = 3;
};

// Input standardized as (x - 0.5) * 4, then conv(k x k, same padding) ->
// ReLU -> 2x2 average pool per block, then a single dense unit producing the
// logit.
struct Architecture {
  std::string id;
  ImageDims input;
  std::vector<ConvBlock> blocks;

  std::size_t feature_count() const;
  std::vector<Shape> parameter_shapes() const;
};

const Architecture& find_architecture(std::string_view id);
std::vector<std::string> architecture_ids();

class Detector : public Classifier {
 public:
  Detector(Architecture architecture, std::vector<Tensor> parameters);

  // He-normal conv kernels with the first layer's filters shifted to zero
  // mean, zero biases. Deterministic in `seed`.
  static Detector initialize(const Architecture& architecture,
                             std::uint64_t seed);

  const Architecture& architecture() const noexcept { return arch_; }
  const std::vector<Tensor>& parameters() const noexcept { return params_; }
  std::vector<Tensor>& parameters() noexcept { return params_; }

  // "conv1" ... "convN": the post-ReLU output of each conv block.
  std::vector<std::string> tap_names() const;

  struct Graph {
    Var input;
    Var logit;  // N x 1
    std::vector<Var> parameters;
  };

  // Records the forward pass of an N x C x H x W batch on `tape` and binds
  // the conv taps.
  Graph build(Tape& tape, Tensor batch) const;

  Shape input_shape() const override { return arch_.input.shape(); }
  double logit(const Tensor& image) const override;
  LogitGradient logit_gradient(const Tensor& image) const override;

  // Tape-free batched forward; one logit per image.
  std::vector<double> logits(std::span<const Tensor> images) const;

  Tensor flat_parameters() const;
  void set_flat_parameters(const Tensor& flat);

 private:
  void require_image(const Tensor& image) const;

  Architecture arch_;
  std::vector<Tensor> params_;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 0.02;
  double momentum = 0.9;
  // Minibatch gradients with a larger global L2 norm are rescaled to it;
  // 0 disables clipping.
  double clip_norm = 1.0;
  std::uint64_t seed = 7;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;       // mean minibatch loss over the epoch
  double train_acc = 0.0;  // from the forward passes taken during the epoch
  std::optional<double> val_acc;
};

struct TrainHistory {
  std::vector<double> batch_losses;
  std::vector<EpochStats> epochs;
};

struct LossGradient {
  double loss = 0.0;
  std::vector<Tensor> gradients;  // one per detector parameter
  std::vector<double> logits;
};

// Mean binary cross-entropy of the batch and its parameter gradients.
LossGradient loss_gradient(const Detector& detector, const Tensor& batch,
                           const Tensor& labels);

Tensor stack_images(std::span<const LabeledImage> images,
                    std::span<const std::size_t> order);

// Minibatch SGD with momentum on binary cross-entropy. Deterministic for a
// given config seed. Throws divergence if the loss stops being finite.
TrainHistory train(Detector& detector, std::span<const LabeledImage> train_set,
                   std::span<const LabeledImage> val_set,
                   const TrainConfig& config);

// (correct predictions) / (total).
double accuracy(const Detector& detector, std::span<const LabeledImage> images);

std::string format_history_csv(const TrainHistory& history);

// Weights file: "KRAW", u32 format version, arch id, parameter tensors with
// shape headers as little-endian f64, trailing FNV-1a 64 checksum.
inline constexpr std::uint32_t kWeightsFormatVersion = 1;

std::string encode_weights(const Detector& detector);
Detector decode_weights(const std::string& bytes,
                        std::optional<std::string_view> expected_arch = {});
void save_weights(const Detector& detector, const std::filesystem::path& path);
Detector load_weights(const std::filesystem::path& path,
                      std::optional<std::string_view> expected_arch = {});

}  // namespace kra
