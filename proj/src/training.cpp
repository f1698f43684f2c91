#include <cmath>
#include <numeric>
#include <sstream>

#include "kra/detector.hpp"
#include "kra/error.hpp"
#include "kra/rng.hpp"

namespace kra {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) {
    throw Error(ErrorCode::invalid_argument, "learning rate must be > 0");
  }
  if (epochs < 1) throw Error(ErrorCode::invalid_argument, "epochs must be >= 1");
  if (batch_size < 1) throw Error(ErrorCode::invalid_argument, "batch size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw Error(ErrorCode::invalid_argument, "momentum must be in [0, 1)");
  }
  if (!(clip_norm >= 0.0)) throw Error(ErrorCode::invalid_argument, "clip norm must be >= 0");
}

Tensor stack_images(std::span<const LabeledImage> images,
                    std::span<const std::size_t> order) {
  if (order.empty()) throw Error(ErrorCode::invalid_argument, "empty batch");
  const Shape& s = images[order[0]].pixels.shape();
  Tensor batch({order.size(), s[0], s[1], s[2]});
  const std::size_t volume = shape_volume(s);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Tensor& px = images[order[i]].pixels;
    require_same_shape(px, images[order[0]].pixels, "stack_images");
    std::copy(px.data().begin(), px.data().end(),
              batch.data().begin() + static_cast<std::ptrdiff_t>(i * volume));
  }
  return batch;
}

LossGradient loss_gradient(const Detector& detector, const Tensor& batch,
                           const Tensor& labels) {
  Tape tape;
  const auto g = detector.build(tape, batch);
  const Var loss = tape.bce_with_logits(g.logit, labels);
  tape.backward(loss);
  LossGradient out;
  out.loss = tape.value(loss)[0];
  for (Var p : g.parameters) out.gradients.push_back(tape.grad(p));
  const auto& z = tape.value(g.logit).data();
  out.logits.assign(z.begin(), z.end());
  return out;
}

TrainHistory train(Detector& detector, std::span<const LabeledImage> train_set,
                   std::span<const LabeledImage> val_set, const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw Error(ErrorCode::invalid_argument, "empty training set");
  const auto fakes = std::count_if(train_set.begin(), train_set.end(), [](const auto& im) {
    return im.label == Label::fake;
  });
  if (2 * static_cast<std::size_t>(fakes) != train_set.size()) {
    throw Error(ErrorCode::invalid_argument, "training set is not class-balanced");
  }

  Rng rng(mix_seed(config.seed ^ 0x7472616e));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  auto& params = detector.parameters();
  std::vector<Tensor> velocity;
  for (const auto& p : params) velocity.emplace_back(p.shape());

  TrainHistory history;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    double loss_sum = 0.0;
    std::size_t batches = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, n);
      Tensor labels({n, 1});
      for (std::size_t i = 0; i < n; ++i) {
        labels[i] = train_set[idx[i]].label == Label::fake ? 1.0 : 0.0;
      }
      const LossGradient lg = loss_gradient(detector, stack_images(train_set, idx), labels);
      if (!std::isfinite(lg.loss)) {
        throw Error(ErrorCode::divergence,
                    "training diverged at epoch " + std::to_string(epoch));
      }
      for (std::size_t i = 0; i < n; ++i) {
        correct += label_for_logit(lg.logits[i]) == train_set[idx[i]].label;
      }
      double norm2 = 0.0;
      for (const auto& g : lg.gradients) norm2 += dot(g, g);
      const double norm = std::sqrt(norm2);
      const double shrink =
          config.clip_norm > 0.0 && norm > config.clip_norm ? config.clip_norm / norm : 1.0;
      for (std::size_t k = 0; k < params.size(); ++k) {
        auto v = velocity[k].data();
        auto p = params[k].data();
        const auto g = lg.gradients[k].data();
        for (std::size_t i = 0; i < p.size(); ++i) {
          v[i] = config.momentum * v[i] - config.learning_rate * shrink * g[i];
          p[i] += v[i];
        }
      }
      history.batch_losses.push_back(lg.loss);
      loss_sum += lg.loss;
      ++batches;
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = loss_sum / static_cast<double>(batches);
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    if (!val_set.empty()) stats.val_acc = accuracy(detector, val_set);
    history.epochs.push_back(stats);
  }
  return history;
}

double accuracy(const Detector& detector, std::span<const LabeledImage> images) {
  if (images.empty()) throw Error(ErrorCode::invalid_argument, "accuracy of an empty set");
  std::vector<Tensor> pixels;
  pixels.reserve(images.size());
  for (const auto& im : images) pixels.push_back(im.pixels);
  const auto z = detector.logits(pixels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    correct += label_for_logit(z[i]) == images[i].label;
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

std::string format_history_csv(const TrainHistory& history) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,loss,train_acc,val_acc\n";
  for (const auto& e : history.epochs) {
    out << e.epoch << ',' << e.loss << ',' << e.train_acc << ',';
    if (e.val_acc) out << *e.val_acc;
    out << '\n';
  }
  return out.str();
}

}  // namespace kra
