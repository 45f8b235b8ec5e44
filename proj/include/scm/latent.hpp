#pragma once

// Representation-shift diagnostic: per-layer two-component PCA on hidden
// states from two model snapshots and the distance between their centers.

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "scm/mixing.hpp"
#include "scm/model.hpp"
#include "scm/tasks.hpp"

namespace scm {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

struct StateDump {
  std::string tag;
  MixingMode mode = MixingMode::Scm;
  std::vector<Matrix> layers;  // one [positions x d_model] matrix per layer
};

// Teacher-forces every rendered exemplar and stacks all position states per
// layer (layer 0 is embedding + position). The residual stream does not
// depend on the mixing mode; `mode` is carried as metadata.
StateDump collect_states(const ModelParams& params, std::span<const TaskInstance> corpus, MixingMode mode,
                         std::string tag = {});

struct SymmetricEigen {
  std::vector<double> values;  // descending
  Matrix vectors;              // row k is the unit eigenvector for values[k]
};

// Cyclic Jacobi rotations; deterministic for a given input.
SymmetricEigen jacobi_eigen(const Matrix& symmetric, int max_sweeps = 100);

// Sample covariance (n - 1 denominator) of the rows.
Matrix covariance(const Matrix& rows, std::vector<double>* mean = nullptr);

struct Pca2 {
  Matrix components;  // [2 x d], orthonormal rows; first nonzero entry of each positive
  Matrix projected;   // [n x 2]
  std::vector<double> mean;
  std::array<double, 2> variances{};
  bool degenerate = false;  // rank < 2
};

Pca2 pca2(const Matrix& rows);

// Project rows onto a fitted basis.
Matrix project(const Pca2& fit, const Matrix& rows);

enum class CenterMode {
  PerLayer,  // one basis and one pair of centers per layer, aggregate = mean over layers
  Pooled,    // a single basis fitted on all layers' states
};

struct LayerShift {
  std::size_t layer = 0;
  std::array<double, 2> center_a{};
  std::array<double, 2> center_b{};
  double distance = 0.0;
  bool degenerate = false;
  Matrix projected_a, projected_b;  // scatter coordinates
};

struct PcaReport {
  std::string tag_a, tag_b;
  std::vector<LayerShift> layers;
  double aggregate = 0.0;
};

// Fits the basis on the union of both dumps' states so that the centers share
// one coordinate system; distance = ||center_b - center_a||_2.
PcaReport shift_report(const StateDump& a, const StateDump& b, CenterMode mode = CenterMode::PerLayer);

// Line-delimited JSON: one record per layer, then an aggregate record.
std::string report_to_jsonl(const PcaReport& report);
PcaReport report_from_jsonl(const std::string& text);
std::string scatter_to_jsonl(const PcaReport& report);

}  // namespace scm
