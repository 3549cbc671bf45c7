#pragma once

// FLOP accounting, accuracy, timing and singular-spectrum reports.
//
// FLOP convention: one multiply-add counts as 2 FLOPs.
//   dense            2·D_in·D_out
//   conv2d           2·k_h·k_w·C_in·C_out·H_out·W_out
//   batch norm       2·D
//   activation       D (identity: 0)
//   2×2 max pool     D_out
//   residual sum     (branches − 1)·D
// Bias additions are not counted. Absolute counts depend on this convention;
// teacher/student ratios do not.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ron/netmodel.hpp"

namespace ron {

struct FlopEntry {
  std::string label;
  std::string kind;
  std::uint64_t flops = 0;
  bool weight = false;  // matrix product, as opposed to element-wise work
};

struct FlopReport {
  std::vector<FlopEntry> layers;

  std::uint64_t total() const;
  std::uint64_t weight_total() const;
  std::string to_tsv() const;
};

FlopReport flops_teacher(const TeacherNetwork& net);
FlopReport flops_student(const StudentNetwork& net);

// teacher.total() / student.total()
double flop_reduction(const FlopReport& teacher, const FlopReport& student);
double weight_flop_reduction(const FlopReport& teacher, const FlopReport& student);

struct Accuracy {
  double top1 = 0.0;
  double top5 = 0.0;
};

// Labels are class indices. Ties in the logits rank the lower class first.
Accuracy evaluate(const Matrix& logits, const std::vector<Index>& labels);

// Class indices from a one-column matrix of integral values.
std::vector<Index> labels_from(const Matrix& column, Index classes);

// Largest |a - b| divided by max(1e-300, largest |b|), over all entries.
double max_relative_error(const Matrix& a, const Matrix& b);

// Median wall-clock milliseconds over `runs` calls after one warm-up call.
double median_runtime_ms(const std::function<void()>& fn, int runs = 11);

struct SpectrumEntry {
  Index layer = 0;             // teacher layer position
  std::string label;
  std::vector<double> values;  // σ_i / σ_1, non-increasing
  double tail_mass = 0.0;      // energy fraction outside the leading 10% of directions
  Index rank99 = 0;            // directions holding 99% of the energy
  bool skipped = false;
  std::string note;
};

struct SpectrumReport {
  std::vector<SpectrumEntry> layers;

  std::string to_tsv() const;
  std::string summary_json() const;
};

struct SpectrumOptions {
  Index calibration_limit = 2048;
  Index materialize_cap = Index{1} << 24;
  std::uint64_t seed = 0;
};

// Normalized singular values of the outputs of each requested layer over the
// batch. Layer outputs include trailing batch norm, activation and pooling
// layers. Empty `layers` selects every dense, conv2d and residual layer;
// other positions are skipped with a note.
SpectrumReport spectrum(const TeacherNetwork& net, const Matrix& data, const std::vector<std::size_t>& layers = {},
                        const SpectrumOptions& opts = {});

}  // namespace ron
