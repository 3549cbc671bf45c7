#include <string>

#include "ron/compressor.hpp"
#include "ron/errors.hpp"

namespace ron {
namespace {

std::string where(std::size_t i, const Layer& l) {
  return "layer " + std::to_string(i) + " (" + l.tag() + "): ";
}

// Lowers a residual branch into plain affine stages.
std::vector<AffineStage> lower_branch(const std::vector<Layer>& layers, const Shape& in, Index conv_cap,
                                      const std::string& ctx) {
  std::vector<AffineStage> out;
  Shape cur = in;
  bool has_activation = false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const std::string w = ctx + where(i, l);
    const Shape next = output_shape(l, cur);
    if (const auto* d = std::get_if<DenseLayer>(&l.op)) {
      out.push_back({d->weight, d->bias, Activation::identity(), std::nullopt});
      has_activation = false;
    } else if (const auto* c = std::get_if<Conv2dLayer>(&l.op)) {
      DenseLayer low = conv_to_dense(*c, cur, conv_cap);
      out.push_back({std::move(low.weight), std::move(low.bias), Activation::identity(), std::nullopt});
      has_activation = false;
    } else if (const auto* b = std::get_if<BatchNormLayer>(&l.op)) {
      if (out.empty() || has_activation) throw UnsupportedError(w + "batch norm must directly follow a dense or conv layer");
      DenseLayer folded = fold_batchnorm({out.back().weight, out.back().bias}, *b);
      out.back().weight = std::move(folded.weight);
      out.back().bias = std::move(folded.bias);
    } else if (const auto* a = std::get_if<ActivationLayer>(&l.op)) {
      if (out.empty() || has_activation) throw UnsupportedError(w + "activation must follow a dense or conv layer");
      out.back().activation = a->kind;
      has_activation = true;
    } else {
      throw UnsupportedError(w + "not supported inside a compressed residual branch");
    }
    cur = next;
  }
  return out;
}

}  // namespace

std::vector<std::size_t> eligible_layers(const TeacherNetwork& net) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& op = net.layers[i].op;
    if (std::holds_alternative<DenseLayer>(op) || std::holds_alternative<Conv2dLayer>(op) ||
        std::holds_alternative<ResidualLayer>(op))
      out.push_back(i);
  }
  return out;
}

std::vector<LoweredStage> lower(const TeacherNetwork& net, std::size_t from, Index conv_cap) {
  const auto shapes = infer_shapes(net.layers, net.input_shape);
  Shape cur = from == 0 ? net.input_shape : shapes.at(from - 1);
  std::vector<LoweredStage> stages;

  for (std::size_t i = from; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    const std::string w = where(i, l);
    const Shape next = shapes[i];
    AffineStage* affine = stages.empty() ? nullptr : std::get_if<AffineStage>(&stages.back().op);
    ResidualStage* residual = stages.empty() ? nullptr : std::get_if<ResidualStage>(&stages.back().op);

    if (const auto* d = std::get_if<DenseLayer>(&l.op)) {
      stages.push_back({AffineStage{d->weight, d->bias, Activation::identity(), std::nullopt}, i, i, next});
    } else if (const auto* c = std::get_if<Conv2dLayer>(&l.op)) {
      DenseLayer low = conv_to_dense(*c, cur, conv_cap);
      stages.push_back({AffineStage{std::move(low.weight), std::move(low.bias), Activation::identity(), std::nullopt},
                        i, i, next});
    } else if (const auto* r = std::get_if<ResidualLayer>(&l.op)) {
      ResidualStage rs;
      rs.dim = next.size();
      for (std::size_t b = 0; b < r->branches.size(); ++b)
        rs.branches.push_back(lower_branch(r->branches[b], cur, conv_cap, w + "branch " + std::to_string(b) + " "));
      stages.push_back({std::move(rs), i, i, next});
    } else if (const auto* b = std::get_if<BatchNormLayer>(&l.op)) {
      if (!affine || !affine->activation.is_identity() || affine->pool_input)
        throw UnsupportedError(w + "batch norm must directly follow a dense or conv layer");
      DenseLayer folded = fold_batchnorm({affine->weight, affine->bias}, *b);
      affine->weight = std::move(folded.weight);
      affine->bias = std::move(folded.bias);
    } else if (const auto* a = std::get_if<ActivationLayer>(&l.op)) {
      // ψ and 2×2 max pooling commute for non-decreasing ψ, so the order of
      // the two within a stage does not matter.
      if (affine && affine->activation.is_identity()) {
        affine->activation = a->kind;
      } else if (residual && residual->activation.is_identity()) {
        residual->activation = a->kind;
      } else {
        throw UnsupportedError(w + "activation must follow a dense, conv or residual layer");
      }
    } else if (std::holds_alternative<MaxPoolLayer>(l.op)) {
      if (!affine || affine->pool_input)
        throw UnsupportedError(w + "max pooling must follow a dense or conv layer");
      affine->pool_input = cur;
    }
    if (stages.empty()) throw UnsupportedError(w + "cannot start a compressed stage");
    stages.back().last_layer = i;
    stages.back().out_shape = next;
    cur = next;
  }
  return stages;
}

Matrix forward_affine(const AffineStage& stage, const Matrix& batch) {
  Matrix pre = batch * stage.weight.transpose();
  pre.rowwise() += stage.bias.transpose();
  stage.activation.apply(pre);
  if (stage.pool_input) return max_pool_2x2(*stage.pool_input, pre);
  return pre;
}

Matrix forward_lowered(const LoweredStage& stage, const Matrix& batch) {
  if (const auto* a = std::get_if<AffineStage>(&stage.op)) return forward_affine(*a, batch);
  const auto& r = std::get<ResidualStage>(stage.op);
  Matrix sum = Matrix::Zero(batch.rows(), r.dim);
  for (const auto& branch : r.branches) {
    if (branch.empty()) {
      sum += batch;
      continue;
    }
    Matrix x = batch;
    for (const auto& s : branch) x = forward_affine(s, x);
    sum += x;
  }
  r.activation.apply(sum);
  return sum;
}

}  // namespace ron
