#include "ron/netmodel.hpp"

#include <algorithm>
#include <cmath>

#include "ron/errors.hpp"

namespace ron {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string at_layer(std::size_t i) { return "layer " + std::to_string(i) + ": "; }

Matrix affine(const Matrix& batch, const Matrix& weight, const Vector& bias) {
  Matrix out = batch * weight.transpose();
  out.rowwise() += bias.transpose();
  return out;
}

Matrix conv_forward(const Conv2dLayer& conv, const Shape& in, const Shape& out, const Matrix& batch) {
  const Kernel& k = conv.kernel;
  Matrix result(batch.rows(), out.size());
  for (Index n = 0; n < batch.rows(); ++n) {
    for (Index o = 0; o < out.channels; ++o) {
      for (Index oy = 0; oy < out.height; ++oy) {
        for (Index ox = 0; ox < out.width; ++ox) {
          double acc = conv.bias(o);
          for (Index c = 0; c < in.channels; ++c) {
            for (Index ky = 0; ky < k.height; ++ky) {
              const Index iy = oy * conv.stride - conv.padding + ky;
              if (iy < 0 || iy >= in.height) continue;
              for (Index kx = 0; kx < k.width; ++kx) {
                const Index ix = ox * conv.stride - conv.padding + kx;
                if (ix < 0 || ix >= in.width) continue;
                acc += k.at(o, c, ky, kx) * batch(n, (c * in.height + iy) * in.width + ix);
              }
            }
          }
          result(n, (o * out.height + oy) * out.width + ox) = acc;
        }
      }
    }
  }
  return result;
}

Matrix batchnorm_forward(const BatchNormLayer& bn, const Shape& in, const Matrix& batch) {
  const Index spatial = in.height * in.width;
  Matrix out(batch.rows(), batch.cols());
  for (Index c = 0; c < in.channels; ++c) {
    const double scale = bn.gamma(c) / std::sqrt(bn.var(c) + bn.eps);
    const double shift = bn.beta(c) - scale * bn.mean(c);
    out.middleCols(c * spatial, spatial) =
        ((batch.middleCols(c * spatial, spatial).array() * scale) + shift).matrix();
  }
  return out;
}

}  // namespace

Matrix max_pool_2x2(const Shape& in, const Matrix& batch) {
  const Index oh = in.height / 2, ow = in.width / 2;
  Matrix out(batch.rows(), in.channels * oh * ow);
  for (Index n = 0; n < batch.rows(); ++n) {
    for (Index c = 0; c < in.channels; ++c) {
      for (Index y = 0; y < oh; ++y) {
        for (Index x = 0; x < ow; ++x) {
          const Index base = (c * in.height + 2 * y) * in.width + 2 * x;
          out(n, (c * oh + y) * ow + x) = std::max({batch(n, base), batch(n, base + 1),
                                                    batch(n, base + in.width),
                                                    batch(n, base + in.width + 1)});
        }
      }
    }
  }
  return out;
}

namespace {

Matrix layer_forward(const Layer& layer, const Shape& in, const Matrix& batch) {
  const Shape out = output_shape(layer, in);
  return std::visit(
      overloaded{
          [&](const DenseLayer& d) { return affine(batch, d.weight, d.bias); },
          [&](const Conv2dLayer& c) { return conv_forward(c, in, out, batch); },
          [&](const BatchNormLayer& b) { return batchnorm_forward(b, in, batch); },
          [&](const MaxPoolLayer&) { return max_pool_2x2(in, batch); },
          [&](const ActivationLayer& a) {
            Matrix m = batch;
            a.kind.apply(m);
            return m;
          },
          [&](const ResidualLayer& r) {
            Matrix sum = Matrix::Zero(batch.rows(), out.size());
            for (const auto& branch : r.branches) sum += forward_layers(branch, in, batch);
            return sum;
          },
      },
      layer.op);
}

}  // namespace

std::string Shape::str() const {
  return "(" + std::to_string(channels) + "," + std::to_string(height) + "," +
         std::to_string(width) + ")";
}

double Activation::operator()(double x) const {
  switch (type) {
    case ActivationType::identity: return x;
    case ActivationType::relu: return x > 0.0 ? x : 0.0;
    case ActivationType::leaky_relu: return x > 0.0 ? x : param * x;
    case ActivationType::elu: return x > 0.0 ? x : param * std::expm1(x);
  }
  return x;
}

void Activation::apply(Matrix& m) const {
  if (is_identity()) return;
  m = m.unaryExpr([this](double x) { return (*this)(x); });
}

std::string Activation::name() const {
  switch (type) {
    case ActivationType::identity: return "identity";
    case ActivationType::relu: return "relu";
    case ActivationType::leaky_relu: return "leaky_relu";
    case ActivationType::elu: return "elu";
  }
  return "unknown";
}

std::string Layer::tag() const {
  return std::visit(overloaded{
                        [](const DenseLayer&) { return std::string("dense"); },
                        [](const Conv2dLayer&) { return std::string("conv2d"); },
                        [](const BatchNormLayer&) { return std::string("batchnorm"); },
                        [](const MaxPoolLayer&) { return std::string("maxpool"); },
                        [](const ActivationLayer&) { return std::string("activation"); },
                        [](const ResidualLayer&) { return std::string("residual"); },
                    },
                    op);
}

Shape output_shape(const Layer& layer, const Shape& in) {
  return std::visit(
      overloaded{
          [&](const DenseLayer& d) {
            if (d.weight.cols() != in.size())
              throw ShapeError("dense expects " + std::to_string(d.weight.cols()) +
                               " inputs, got " + in.str());
            if (d.bias.size() != d.weight.rows())
              throw ShapeError("dense bias length " + std::to_string(d.bias.size()) +
                               " != " + std::to_string(d.weight.rows()));
            return Shape::flat(d.weight.rows());
          },
          [&](const Conv2dLayer& c) {
            const Kernel& k = c.kernel;
            if (k.in_channels != in.channels)
              throw ShapeError("conv2d expects " + std::to_string(k.in_channels) +
                               " input channels, got " + in.str());
            if (static_cast<Index>(k.data.size()) != k.out_channels * k.in_channels * k.height * k.width)
              throw ShapeError("conv2d kernel payload does not match its dimensions");
            if (c.bias.size() != k.out_channels)
              throw ShapeError("conv2d bias length mismatch");
            if (c.stride != 1 && c.stride != 2)
              throw UnsupportedError("conv2d stride must be 1 or 2");
            if (c.padding < 0) throw ShapeError("conv2d padding must be non-negative");
            const Index h = in.height + 2 * c.padding - k.height;
            const Index w = in.width + 2 * c.padding - k.width;
            if (h < 0 || w < 0) throw ShapeError("conv2d kernel larger than padded input " + in.str());
            return Shape{k.out_channels, h / c.stride + 1, w / c.stride + 1};
          },
          [&](const BatchNormLayer& b) {
            if (b.gamma.size() != in.channels || b.beta.size() != in.channels ||
                b.mean.size() != in.channels || b.var.size() != in.channels)
              throw ShapeError("batchnorm has " + std::to_string(b.gamma.size()) +
                               " channels, input " + in.str());
            if ((b.var.array() < 0.0).any()) throw ShapeError("batchnorm variance is negative");
            return in;
          },
          [&](const MaxPoolLayer&) {
            if (in.height < 2 || in.width < 2 || in.height % 2 != 0 || in.width % 2 != 0)
              throw UnsupportedError("maxpool needs even spatial dimensions, got " + in.str());
            return Shape{in.channels, in.height / 2, in.width / 2};
          },
          [&](const ActivationLayer&) { return in; },
          [&](const ResidualLayer& r) {
            if (r.branches.empty()) throw ShapeError("residual block has no branches");
            Shape common = in;
            for (std::size_t b = 0; b < r.branches.size(); ++b) {
              const auto shapes = infer_shapes(r.branches[b], in);
              const Shape s = shapes.empty() ? in : shapes.back();
              if (b == 0) common = s;
              else if (s.size() != common.size())
                throw ShapeError("residual branch " + std::to_string(b) + " output " + s.str() +
                                 " != branch 0 output " + common.str());
            }
            return common;
          },
      },
      layer.op);
}

std::vector<Shape> infer_shapes(const std::vector<Layer>& layers, const Shape& in) {
  std::vector<Shape> shapes;
  shapes.reserve(layers.size());
  Shape cur = in;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    try {
      cur = output_shape(layers[i], cur);
    } catch (const Error& e) {
      throw_error(e.kind(), at_layer(i) + e.what());
    }
    shapes.push_back(cur);
  }
  return shapes;
}

Shape TeacherNetwork::output_shape() const {
  const auto shapes = infer_shapes(layers, input_shape);
  return shapes.empty() ? input_shape : shapes.back();
}

void TeacherNetwork::validate() const {
  if (input_shape.size() < 1) throw ShapeError("network input dimension must be positive");
  (void)infer_shapes(layers, input_shape);
}

Matrix forward_layers(const std::vector<Layer>& layers, const Shape& in, const Matrix& batch) {
  if (batch.cols() != in.size())
    throw ShapeError("batch has " + std::to_string(batch.cols()) + " features, expected " +
                     std::to_string(in.size()));
  Matrix cur = batch;
  Shape shape = in;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    try {
      cur = layer_forward(layers[i], shape, cur);
      shape = output_shape(layers[i], shape);
    } catch (const Error& e) {
      throw_error(e.kind(), at_layer(i) + e.what());
    }
  }
  return cur;
}

Matrix forward_teacher(const TeacherNetwork& net, const Matrix& batch, long upto) {
  const long n = static_cast<long>(net.layers.size());
  if (upto >= n) throw ShapeError("layer index " + std::to_string(upto) + " out of range");
  const long last = upto < 0 ? n - 1 : upto;
  const std::vector<Layer> head(net.layers.begin(), net.layers.begin() + (last + 1));
  return forward_layers(head, net.input_shape, batch);
}

DenseLayer conv_to_dense(const Conv2dLayer& conv, const Shape& in, Index max_entries) {
  const Shape out = output_shape(Layer{conv}, in);
  const Index rows = out.size(), cols = in.size();
  if (rows > 0 && cols > max_entries / rows)
    throw ShapeError("lowered convolution would have " + std::to_string(rows) + "x" +
                     std::to_string(cols) + " entries, above the cap of " +
                     std::to_string(max_entries));
  const Kernel& k = conv.kernel;
  DenseLayer d{Matrix::Zero(rows, cols), Vector(rows)};
  for (Index o = 0; o < out.channels; ++o) {
    for (Index oy = 0; oy < out.height; ++oy) {
      for (Index ox = 0; ox < out.width; ++ox) {
        const Index r = (o * out.height + oy) * out.width + ox;
        d.bias(r) = conv.bias(o);
        for (Index c = 0; c < in.channels; ++c) {
          for (Index ky = 0; ky < k.height; ++ky) {
            const Index iy = oy * conv.stride - conv.padding + ky;
            if (iy < 0 || iy >= in.height) continue;
            for (Index kx = 0; kx < k.width; ++kx) {
              const Index ix = ox * conv.stride - conv.padding + kx;
              if (ix < 0 || ix >= in.width) continue;
              d.weight(r, (c * in.height + iy) * in.width + ix) += k.at(o, c, ky, kx);
            }
          }
        }
      }
    }
  }
  return d;
}

DenseLayer fold_batchnorm(const DenseLayer& dense, const BatchNormLayer& bn) {
  const Index rows = dense.weight.rows();
  const Index channels = bn.gamma.size();
  if (channels < 1 || rows % channels != 0 || bn.beta.size() != channels ||
      bn.mean.size() != channels || bn.var.size() != channels)
    throw ShapeError("batchnorm with " + std::to_string(channels) +
                     " channels cannot fold into a layer with " + std::to_string(rows) + " outputs");
  const Index spatial = rows / channels;
  DenseLayer out = dense;
  for (Index r = 0; r < rows; ++r) {
    const Index c = r / spatial;
    const double scale = bn.gamma(c) / std::sqrt(bn.var(c) + bn.eps);
    out.weight.row(r) *= scale;
    out.bias(r) = scale * (dense.bias(r) - bn.mean(c)) + bn.beta(c);
  }
  return out;
}

Index StudentResidual::input_dim() const {
  for (std::size_t b = 0; b < branches.size(); ++b) {
    if (!branches[b].empty()) return branches[b].front().input_dim();
    return merges[b].cols();
  }
  return 0;
}

Index StudentBlock::input_dim() const {
  return std::visit([](const auto& s) { return s.input_dim(); }, op);
}

Index StudentBlock::output_dim() const {
  return std::visit([](const auto& s) { return s.output_dim(); }, op);
}

namespace {

void check_stage(const StudentStage& s, Index in, const std::string& where) {
  if (s.input_dim() != in)
    throw ShapeError(where + "expects " + std::to_string(s.input_dim()) + " inputs, chain gives " +
                     std::to_string(in));
  if (s.bias.size() != s.weight.rows()) throw ShapeError(where + "bias length mismatch");
  if (s.pool_window != 1 && s.pool_window != 4)
    throw UnsupportedError(where + "pool window must be 1 or 4");
  if (s.weight.rows() % s.pool_window != 0)
    throw ShapeError(where + "row count is not a multiple of the pool window");
}

}  // namespace

void StudentNetwork::validate() const {
  const auto shapes = infer_shapes(prefix, input_shape);
  Index dim = shapes.empty() ? input_shape.size() : shapes.back().size();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string where = "student block " + std::to_string(i) + ": ";
    if (const auto* s = std::get_if<StudentStage>(&blocks[i].op)) {
      check_stage(*s, dim, where);
      dim = s->output_dim();
      continue;
    }
    const auto& r = std::get<StudentResidual>(blocks[i].op);
    if (r.branches.empty() || r.merges.size() != r.branches.size())
      throw ShapeError(where + "residual needs one merge matrix per branch");
    const Index out = r.merges.front().rows();
    for (std::size_t b = 0; b < r.branches.size(); ++b) {
      Index bdim = dim;
      for (const auto& s : r.branches[b]) {
        check_stage(s, bdim, where + "branch " + std::to_string(b) + ": ");
        bdim = s.output_dim();
      }
      if (r.merges[b].cols() != bdim || r.merges[b].rows() != out)
        throw ShapeError(where + "merge " + std::to_string(b) + " has wrong shape");
    }
    dim = out;
  }
  if (lift.cols() != dim)
    throw ShapeError("student lift expects " + std::to_string(lift.cols()) + " inputs, chain gives " +
                     std::to_string(dim));
}

Matrix forward_stage(const StudentStage& stage, const Matrix& batch) {
  if (batch.cols() != stage.input_dim())
    throw ShapeError("student stage expects " + std::to_string(stage.input_dim()) + " inputs, got " +
                     std::to_string(batch.cols()));
  Matrix pre = affine(batch, stage.weight, stage.bias);
  stage.activation.apply(pre);
  if (stage.pool_window == 1) return pre;
  const Index g = stage.pool_window;
  Matrix out(pre.rows(), pre.cols() / g);
  for (Index j = 0; j < out.cols(); ++j) out.col(j) = pre.middleCols(j * g, g).rowwise().maxCoeff();
  return out;
}

Matrix forward_student(const StudentNetwork& net, const Matrix& batch) {
  Matrix cur = forward_layers(net.prefix, net.input_shape, batch);
  for (const auto& block : net.blocks) {
    if (const auto* s = std::get_if<StudentStage>(&block.op)) {
      cur = forward_stage(*s, cur);
      continue;
    }
    const auto& r = std::get<StudentResidual>(block.op);
    Matrix sum = Matrix::Zero(cur.rows(), r.output_dim());
    for (std::size_t b = 0; b < r.branches.size(); ++b) {
      Matrix x = cur;
      for (const auto& s : r.branches[b]) x = forward_stage(s, x);
      sum.noalias() += x * r.merges[b].transpose();
    }
    r.activation.apply(sum);
    cur = std::move(sum);
  }
  if (cur.cols() != net.lift.cols())
    throw ShapeError("student lift expects " + std::to_string(net.lift.cols()) + " inputs, got " +
                     std::to_string(cur.cols()));
  return cur * net.lift.transpose();
}

}  // namespace ron
