#include "kra/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "kra/error.hpp"

namespace kra {
namespace {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_height, out_width;

  std::size_t patch() const { return in_channels * kernel * kernel; }
  std::size_t positions() const { return out_height * out_width; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel,
                           const Tensor& bias, std::size_t stride,
                           std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 4) {
    throw Error(ErrorCode::shape_mismatch,
                "conv2d expects rank-4 input and kernel, got " +
                    shape_string(input.shape()) + " and " +
                    shape_string(kernel.shape()));
  }
  if (stride == 0) {
    throw Error(ErrorCode::invalid_argument, "conv2d stride must be positive");
  }
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_channels = input.dim(1);
  g.height = input.dim(2);
  g.width = input.dim(3);
  g.out_channels = kernel.dim(0);
  g.kernel = kernel.dim(2);
  g.stride = stride;
  g.padding = padding;
  if (kernel.dim(1) != g.in_channels) {
    throw Error(ErrorCode::shape_mismatch,
                "conv2d input has " + std::to_string(g.in_channels) +
                    " channels but kernel expects " +
                    std::to_string(kernel.dim(1)));
  }
  if (kernel.dim(3) != g.kernel) {
    throw Error(ErrorCode::shape_mismatch, "conv2d kernel must be square");
  }
  if (bias.size() != g.out_channels) {
    throw Error(ErrorCode::shape_mismatch,
                "conv2d bias length does not match output channels");
  }
  if (g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel) {
    throw Error(ErrorCode::shape_mismatch,
                "conv2d kernel larger than padded input");
  }
  g.out_height = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_width = (g.width + 2 * padding - g.kernel) / stride + 1;
  return g;
}

// Unfolds one image of the batch into a (C*k*k) x (H'*W') matrix.
void im2col(const ConvGeometry& g, const double* image, double* cols) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * g.positions();
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.padding);
          double* out = row + oy * g.out_width;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + g.out_width, 0.0);
            continue;
          }
          const double* src = image + (c * g.height + iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.padding);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                          ? 0.0
                          : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* cols, double* image) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * g.positions();
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = image + (c * g.height + iy) * g.width;
          const double* in = row + oy * g.out_width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) {
              dst[ix] += in[ox];
            }
          }
        }
      }
    }
  }
}

void require_pool_shape(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw Error(ErrorCode::shape_mismatch,
                "avgpool2x2 needs N x C x H x W with even H and W, got " +
                    shape_string(x.shape()));
  }
}

void require_dense_shape(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1) ||
      b.size() != w.dim(0)) {
    throw Error(ErrorCode::shape_mismatch,
                "dense: input " + shape_string(x.shape()) + ", weights " +
                    shape_string(w.shape()) + ", bias " +
                    shape_string(b.shape()));
  }
}

void require_labels(const Tensor& prediction, const Tensor& labels) {
  if (prediction.size() != labels.size()) {
    throw Error(ErrorCode::shape_mismatch,
                "loss: " + std::to_string(prediction.size()) +
                    " predictions vs " + std::to_string(labels.size()) +
                    " labels");
  }
}

// Stable sigma(z) - y for y in {0, 1}.
double logit_residual(double z, double y) {
  if (y == 1.0) return -ops::sigmoid(-z);
  if (y == 0.0) return ops::sigmoid(z);
  return ops::sigmoid(z) - y;
}

}  // namespace

namespace ops {

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  const auto g = conv_geometry(input, kernel, bias, stride, padding);
  Tensor out({g.batch, g.out_channels, g.out_height, g.out_width});
  std::vector<double> cols(g.patch() * g.positions());
  ConstMatrixMap k(kernel.data().data(), g.out_channels, g.patch());
  ConstMatrixMap colm(cols.data(), g.patch(), g.positions());
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const std::size_t out_stride = g.out_channels * g.positions();
  for (std::size_t n = 0; n < g.batch; ++n) {
    im2col(g, input.data().data() + n * in_stride, cols.data());
    MatrixMap o(out.data().data() + n * out_stride, g.out_channels,
                g.positions());
    o.noalias() = k * colm;
    for (std::size_t c = 0; c < g.out_channels; ++c) {
      o.row(c).array() += bias[c];
    }
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor avgpool2x2(const Tensor& x) {
  require_pool_shape(x);
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t h = x.dim(2), w = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), h / 2, w / 2});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = x.data().data() + p * h * w;
    double* dst = out.data().data() + p * (h / 2) * (w / 2);
    for (std::size_t y = 0; y < h / 2; ++y) {
      for (std::size_t xx = 0; xx < w / 2; ++xx) {
        const double* a = src + (2 * y) * w + 2 * xx;
        dst[y * (w / 2) + xx] = 0.25 * (a[0] + a[1] + a[w] + a[w + 1]);
      }
    }
  }
  return out;
}

Tensor dense(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  require_dense_shape(x, weights, bias);
  // Plain loops: each output is the same dot product whatever the batch
  // size, so batched and single-image logits agree bit for bit.
  const std::size_t batch = x.dim(0), features = x.dim(1), outputs = weights.dim(0);
  Tensor out({batch, outputs});
  for (std::size_t n = 0; n < batch; ++n) {
    const double* row = x.data().data() + n * features;
    for (std::size_t o = 0; o < outputs; ++o) {
      const double* w = weights.data().data() + o * features;
      double acc = 0.0;
      for (std::size_t f = 0; f < features; ++f) acc += row[f] * w[f];
      out[n * outputs + o] = acc + bias[o];
    }
  }
  return out;
}

double sigmoid(double z) noexcept {
  // Clamped so the result is strictly inside (0, 1) in double precision.
  constexpr double lo = std::numeric_limits<double>::min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  double s;
  if (z >= 0) {
    s = 1.0 / (1.0 + std::exp(-z));
  } else {
    const double e = std::exp(z);
    s = e / (1.0 + e);
  }
  return std::clamp(s, lo, hi);
}

}  // namespace ops

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  has_grads_ = false;
  return Var{nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::conv2d(Var input, Var kernel, Var bias, std::size_t stride,
                 std::size_t padding) {
  Node n;
  n.op = Op::conv2d;
  n.inputs = {input.id, kernel.id, bias.id};
  n.value = ops::conv2d(value(input), value(kernel), value(bias), stride,
                        padding);
  n.stride = stride;
  n.padding = padding;
  return push(std::move(n));
}

Var Tape::relu(Var x) {
  Node n;
  n.op = Op::relu;
  n.inputs = {x.id};
  n.value = ops::relu(value(x));
  return push(std::move(n));
}

Var Tape::avgpool2x2(Var x) {
  Node n;
  n.op = Op::avgpool;
  n.inputs = {x.id};
  n.value = ops::avgpool2x2(value(x));
  return push(std::move(n));
}

Var Tape::flatten(Var x) {
  const Tensor& v = value(x);
  if (v.rank() < 1) {
    throw Error(ErrorCode::shape_mismatch, "flatten of an empty shape");
  }
  const std::size_t batch = v.dim(0);
  Node n;
  n.op = Op::flatten;
  n.inputs = {x.id};
  n.value = v.reshaped({batch, batch ? v.size() / batch : 0});
  return push(std::move(n));
}

Var Tape::dense(Var x, Var weights, Var bias) {
  Node n;
  n.op = Op::dense;
  n.inputs = {x.id, weights.id, bias.id};
  n.value = ops::dense(value(x), value(weights), value(bias));
  return push(std::move(n));
}

Var Tape::sigmoid(Var x) {
  Node n;
  n.op = Op::sigmoid;
  n.inputs = {x.id};
  n.value = value(x);
  for (double& v : n.value.data()) v = ops::sigmoid(v);
  return push(std::move(n));
}

Var Tape::scale(Var x, double factor) { return affine(x, factor, 0.0); }

Var Tape::affine(Var x, double factor, double offset) {
  Node n;
  n.op = Op::scale;
  n.inputs = {x.id};
  n.value = factor * value(x);
  if (offset != 0.0) {
    for (double& v : n.value.data()) v += offset;
  }
  n.factor = factor;
  return push(std::move(n));
}

Var Tape::bce_loss(Var prediction, const Tensor& labels) {
  const Tensor& p = value(prediction);
  require_labels(p, labels);
  if (p.empty()) throw Error(ErrorCode::shape_mismatch, "bce_loss: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0 && p[i] < 1.0)) {
      throw Error(ErrorCode::domain,
                  "bce_loss: prediction " + std::to_string(p[i]) +
                      " outside (0, 1)");
    }
    total -= labels[i] * std::log(p[i]) + (1.0 - labels[i]) * std::log1p(-p[i]);
  }
  Node n;
  n.op = Op::bce;
  n.inputs = {prediction.id};
  n.value = Tensor::scalar(total / static_cast<double>(p.size()));
  n.aux = labels;
  return push(std::move(n));
}

Var Tape::bce_with_logits(Var logits, const Tensor& labels) {
  const Tensor& z = value(logits);
  require_labels(z, labels);
  if (z.empty()) {
    throw Error(ErrorCode::shape_mismatch, "bce_with_logits: empty batch");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double softplus = std::max(z[i], 0.0) + std::log1p(std::exp(-std::abs(z[i])));
    total += softplus - labels[i] * z[i];
  }
  Node n;
  n.op = Op::bce_logits;
  n.inputs = {logits.id};
  n.value = Tensor::scalar(total / static_cast<double>(z.size()));
  n.aux = labels;
  return push(std::move(n));
}

Var Tape::sum(Var x) {
  double total = 0.0;
  for (double v : value(x).data()) total += v;
  Node n;
  n.op = Op::sum;
  n.inputs = {x.id};
  n.value = Tensor::scalar(total);
  return push(std::move(n));
}

void Tape::tap(Var x, std::string name) {
  if (x.id >= nodes_.size()) {
    throw Error(ErrorCode::invalid_argument, "tap on a value not on this tape");
  }
  if (!taps_.emplace(name, x.id).second) {
    throw Error(ErrorCode::invalid_argument, "tap '" + name + "' already bound");
  }
}

std::vector<std::string> Tape::tap_names() const {
  std::vector<std::string> names;
  for (const auto& [name, id] : taps_) names.push_back(name);
  return names;
}

const Tensor& Tape::grad(Var x) const {
  if (!has_grads_) {
    throw Error(ErrorCode::invalid_argument, "gradient requested before backward");
  }
  return nodes_.at(x.id).grad;
}

const Tensor& Tape::tap_grad(const std::string& name) const {
  auto it = taps_.find(name);
  if (it == taps_.end()) {
    throw Error(ErrorCode::unknown_tap, "unknown tap '" + name + "'");
  }
  return grad(Var{it->second});
}

const Tensor& Tape::tap_value(const std::string& name) const {
  auto it = taps_.find(name);
  if (it == taps_.end()) {
    throw Error(ErrorCode::unknown_tap, "unknown tap '" + name + "'");
  }
  return nodes_[it->second].value;
}

void Tape::backward(Var output) {
  if (output.id >= nodes_.size()) {
    throw Error(ErrorCode::invalid_argument, "backward from unknown value");
  }
  if (nodes_[output.id].value.size() != 1) {
    throw Error(ErrorCode::shape_mismatch,
                "backward needs a scalar output, got " +
                    shape_string(nodes_[output.id].value.shape()));
  }
  for (auto& node : nodes_) {
    if (node.grad.shape() == node.value.shape()) {
      node.grad.fill(0.0);
    } else {
      node.grad = Tensor(node.value.shape());
    }
  }
  nodes_[output.id].grad[0] = 1.0;
  backward_order_.clear();
  for (std::size_t id = output.id + 1; id-- > 0;) {
    backward_order_.push_back(id);
    backward_node(id);
  }
  has_grads_ = true;
}

std::map<std::string, Tensor> Tape::backward_with_taps(
    Var output, std::span<const std::string> taps) {
  for (const auto& name : taps) {
    if (!taps_.contains(name)) {
      throw Error(ErrorCode::unknown_tap, "unknown tap '" + name + "'");
    }
  }
  backward(output);
  std::map<std::string, Tensor> out;
  for (const auto& name : taps) out[name] = tap_grad(name);
  return out;
}

void Tape::backward_node(std::size_t id) {
  Node& node = nodes_[id];
  const Tensor& dy = node.grad;
  switch (node.op) {
    case Op::leaf:
      break;

    case Op::conv2d: {
      Node& in = nodes_[node.inputs[0]];
      Node& ker = nodes_[node.inputs[1]];
      Node& bias = nodes_[node.inputs[2]];
      const auto g = conv_geometry(in.value, ker.value, bias.value,
                                   node.stride, node.padding);
      std::vector<double> cols(g.patch() * g.positions());
      std::vector<double> dcols(cols.size());
      ConstMatrixMap k(ker.value.data().data(), g.out_channels, g.patch());
      MatrixMap dk(ker.grad.data().data(), g.out_channels, g.patch());
      MatrixMap colm(cols.data(), g.patch(), g.positions());
      MatrixMap dcolm(dcols.data(), g.patch(), g.positions());
      const std::size_t in_stride = g.in_channels * g.height * g.width;
      const std::size_t out_stride = g.out_channels * g.positions();
      for (std::size_t n = 0; n < g.batch; ++n) {
        ConstMatrixMap d(dy.data().data() + n * out_stride, g.out_channels,
                         g.positions());
        im2col(g, in.value.data().data() + n * in_stride, cols.data());
        dk.noalias() += d * colm.transpose();
        for (std::size_t c = 0; c < g.out_channels; ++c) {
          bias.grad[c] += d.row(c).sum();
        }
        dcolm.noalias() = k.transpose() * d;
        col2im(g, dcols.data(), in.grad.data().data() + n * in_stride);
      }
      break;
    }

    case Op::relu: {
      Node& in = nodes_[node.inputs[0]];
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (in.value[i] > 0.0) in.grad[i] += dy[i];
      }
      break;
    }

    case Op::avgpool: {
      Node& in = nodes_[node.inputs[0]];
      const std::size_t planes = in.value.dim(0) * in.value.dim(1);
      const std::size_t h = in.value.dim(2), w = in.value.dim(3);
      for (std::size_t p = 0; p < planes; ++p) {
        double* dst = in.grad.data().data() + p * h * w;
        const double* src = dy.data().data() + p * (h / 2) * (w / 2);
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            dst[y * w + x] += 0.25 * src[(y / 2) * (w / 2) + x / 2];
          }
        }
      }
      break;
    }

    case Op::flatten: {
      Node& in = nodes_[node.inputs[0]];
      for (std::size_t i = 0; i < dy.size(); ++i) in.grad[i] += dy[i];
      break;
    }

    case Op::dense: {
      Node& in = nodes_[node.inputs[0]];
      Node& w = nodes_[node.inputs[1]];
      Node& b = nodes_[node.inputs[2]];
      const auto batch = in.value.dim(0), features = in.value.dim(1);
      const auto outputs = w.value.dim(0);
      ConstMatrixMap d(dy.data().data(), batch, outputs);
      ConstMatrixMap x(in.value.data().data(), batch, features);
      ConstMatrixMap wm(w.value.data().data(), outputs, features);
      MatrixMap dx(in.grad.data().data(), batch, features);
      MatrixMap dw(w.grad.data().data(), outputs, features);
      dx.noalias() += d * wm;
      dw.noalias() += d.transpose() * x;
      for (std::size_t o = 0; o < outputs; ++o) b.grad[o] += d.col(o).sum();
      break;
    }

    case Op::sigmoid: {
      Node& in = nodes_[node.inputs[0]];
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const double s = node.value[i];
        in.grad[i] += dy[i] * s * (1.0 - s);
      }
      break;
    }

    case Op::scale: {
      Node& in = nodes_[node.inputs[0]];
      for (std::size_t i = 0; i < dy.size(); ++i) {
        in.grad[i] += dy[i] * node.factor;
      }
      break;
    }

    case Op::bce: {
      Node& in = nodes_[node.inputs[0]];
      const double inv_n = 1.0 / static_cast<double>(in.value.size());
      for (std::size_t i = 0; i < in.value.size(); ++i) {
        const double p = in.value[i], y = node.aux[i];
        in.grad[i] += dy[0] * inv_n * (-y / p + (1.0 - y) / (1.0 - p));
      }
      break;
    }

    case Op::bce_logits: {
      Node& in = nodes_[node.inputs[0]];
      const double inv_n = 1.0 / static_cast<double>(in.value.size());
      for (std::size_t i = 0; i < in.value.size(); ++i) {
        in.grad[i] += dy[0] * inv_n * logit_residual(in.value[i], node.aux[i]);
      }
      break;
    }

    case Op::sum: {
      Node& in = nodes_[node.inputs[0]];
      for (double& g : in.grad.data()) g += dy[0];
      break;
    }
  }
}

}  // namespace kra
