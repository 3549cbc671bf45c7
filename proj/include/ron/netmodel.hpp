#pragma once

// Layer description, teacher and student networks, and their forward passes.
//
// Feature maps are vectorized channel-major, then rows, then columns:
//   flat(c, y, x) = (c * H + y) * W + x
// A batch holds one vectorized sample per row.

#include <string>
#include <variant>
#include <vector>

#include "ron/linalg.hpp"

namespace ron {

struct Shape {
  Index channels = 1;
  Index height = 1;
  Index width = 1;

  static Shape flat(Index dim) { return {dim, 1, 1}; }
  Index size() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

enum class ActivationType { identity, relu, leaky_relu, elu };

// Element-wise non-decreasing activation. `param` is the leaky slope or the
// ELU alpha.
struct Activation {
  ActivationType type = ActivationType::identity;
  double param = 0.0;

  static Activation identity() { return {}; }
  static Activation relu() { return {ActivationType::relu, 0.0}; }
  static Activation leaky_relu(double slope) { return {ActivationType::leaky_relu, slope}; }
  static Activation elu(double alpha) { return {ActivationType::elu, alpha}; }

  double operator()(double x) const;
  void apply(Matrix& m) const;
  bool is_identity() const { return type == ActivationType::identity; }
  std::string name() const;
  bool operator==(const Activation&) const = default;
};

// [out_channels × in_channels × kernel_h × kernel_w], row-major.
struct Kernel {
  Index out_channels = 0;
  Index in_channels = 0;
  Index height = 0;
  Index width = 0;
  std::vector<double> data;

  double at(Index o, Index i, Index y, Index x) const {
    return data[static_cast<std::size_t>(((o * in_channels + i) * height + y) * width + x)];
  }
  double& at(Index o, Index i, Index y, Index x) {
    return data[static_cast<std::size_t>(((o * in_channels + i) * height + y) * width + x)];
  }
};

struct DenseLayer {
  Matrix weight;  // out × in
  Vector bias;    // out
};

struct Conv2dLayer {
  Kernel kernel;
  Vector bias;  // out_channels
  Index stride = 1;
  Index padding = 0;  // zero padding on every side
};

struct BatchNormLayer {
  Vector gamma, beta, mean, var;  // per channel
  double eps = 1e-5;
};

// 2×2 window, stride 2; spatial dimensions must be even.
struct MaxPoolLayer {};

struct ActivationLayer {
  Activation kind;
};

struct Layer;

// Sum of parallel branches. An empty branch is the identity (skip path).
struct ResidualLayer {
  std::vector<std::vector<Layer>> branches;
};

struct Layer {
  std::variant<DenseLayer, Conv2dLayer, BatchNormLayer, MaxPoolLayer, ActivationLayer, ResidualLayer> op;

  std::string tag() const;
};

// Output shape of one layer; throws ShapeError or UnsupportedError.
Shape output_shape(const Layer& layer, const Shape& in);

// Shapes after every layer, checked against the declared input.
std::vector<Shape> infer_shapes(const std::vector<Layer>& layers, const Shape& in);

struct TeacherNetwork {
  Shape input_shape;
  std::vector<Layer> layers;

  Index input_dim() const { return input_shape.size(); }
  Shape output_shape() const;
  void validate() const;
};

// Runs `layers` on a batch whose rows have `in.size()` features.
Matrix forward_layers(const std::vector<Layer>& layers, const Shape& in, const Matrix& batch);

// Outputs of layer `upto` (inclusive) for every sample. upto < 0 means the
// final layer.
Matrix forward_teacher(const TeacherNetwork& net, const Matrix& batch, long upto = -1);

// 2×2 stride-2 max pooling of vectorized maps of shape `in`.
Matrix max_pool_2x2(const Shape& in, const Matrix& batch);

// Explicit matrix of a convolution acting on vectorized maps of `in` shape.
DenseLayer conv_to_dense(const Conv2dLayer& conv, const Shape& in, Index max_entries = Index{1} << 26);

// Folds batch normalization into the preceding affine layer. The channel
// count must divide the layer's output rows; rows are grouped channel-major.
DenseLayer fold_batchnorm(const DenseLayer& dense, const BatchNormLayer& bn);

// One student stage: out = pool(ψ(W·in + b)). With pool_window 4 the rows of
// W come in consecutive groups of four (the 2×2 window of each selected
// pooled coordinate) and each group is reduced by max.
struct StudentStage {
  Matrix weight;
  Vector bias;
  Activation activation;
  Index pool_window = 1;

  Index input_dim() const { return weight.cols(); }
  Index output_dim() const { return weight.rows() / pool_window; }
};

// Residual student stage: out = ψ(Σ_i merge_i · branch_i(in)); an empty
// branch passes `in` through unchanged.
struct StudentResidual {
  std::vector<std::vector<StudentStage>> branches;
  std::vector<Matrix> merges;
  Activation activation;

  Index input_dim() const;
  Index output_dim() const { return merges.empty() ? 0 : merges.front().rows(); }
};

struct StudentBlock {
  std::variant<StudentStage, StudentResidual> op;

  Index input_dim() const;
  Index output_dim() const;
};

struct StudentNetwork {
  Shape input_shape;
  std::vector<Layer> prefix;  // uncompressed teacher layers, run verbatim
  std::vector<StudentBlock> blocks;
  Matrix lift;  // D_K × P_K

  Index output_dim() const { return lift.rows(); }
  void validate() const;
};

Matrix forward_stage(const StudentStage& stage, const Matrix& batch);
Matrix forward_student(const StudentNetwork& net, const Matrix& batch);

}  // namespace ron
