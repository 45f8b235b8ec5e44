#include "scm/latent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "scm/errors.hpp"

namespace scm {

StateDump collect_states(const ModelParams& params, std::span<const TaskInstance> corpus, MixingMode mode,
                         std::string tag) {
  if (corpus.empty()) throw ContractError("collect_states: empty corpus");
  const Vocab& vocab = Vocab::standard();
  const std::size_t d = params.config.d_model;
  StateDump dump;
  dump.tag = std::move(tag);
  dump.mode = mode;
  dump.layers.assign(params.config.n_layers + 1, Matrix(0, d));
  ad::NoGradGuard no_grad;
  for (const auto& task : corpus) {
    const auto tokens = vocab.encode(render_exemplar(task));
    const ForwardTrace trace = forward(params, tokens, true);
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
      auto& m = dump.layers[l];
      const auto v = trace.layers[l].values();
      m.data.insert(m.data.end(), v.begin(), v.end());
      m.rows += trace.layers[l].dim(0);
    }
  }
  return dump;
}

SymmetricEigen jacobi_eigen(const Matrix& symmetric, int max_sweeps) {
  const std::size_t n = symmetric.rows;
  if (symmetric.cols != n) throw DimensionError("jacobi_eigen: matrix is not square");
  Matrix a = symmetric;
  Matrix v(n, n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

  double scale = 0.0;
  for (double x : a.data) scale = std::max(scale, std::abs(x));
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off <= 1e-30 * scale * scale || scale == 0.0) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // A <- J^T A J with J the (p, q) rotation
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  SymmetricEigen out;
  out.vectors = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values.push_back(a(order[k], order[k]));
    for (std::size_t i = 0; i < n; ++i) out.vectors(k, i) = v(i, order[k]);
  }
  return out;
}

Matrix covariance(const Matrix& rows, std::vector<double>* mean_out) {
  if (rows.rows < 2) throw ContractError("covariance: need at least 2 rows");
  const std::size_t n = rows.rows, d = rows.cols;
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += rows(i, j);
  for (auto& m : mean) m /= static_cast<double>(n);
  Matrix cov(d, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double xj = rows(i, j) - mean[j];
      for (std::size_t k = j; k < d; ++k) cov(j, k) += xj * (rows(i, k) - mean[k]);
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = j; k < d; ++k) {
      cov(j, k) /= static_cast<double>(n - 1);
      cov(k, j) = cov(j, k);
    }
  }
  if (mean_out) *mean_out = std::move(mean);
  return cov;
}

Pca2 pca2(const Matrix& rows) {
  if (rows.rows < 3) throw ContractError("pca2: need at least 3 rows");
  if (rows.cols < 2) throw ContractError("pca2: need at least 2 columns");
  for (double x : rows.data) {
    if (!std::isfinite(x)) throw NumericError("pca2: non-finite entry");
  }
  Pca2 fit;
  const Matrix cov = covariance(rows, &fit.mean);
  const SymmetricEigen eig = jacobi_eigen(cov);
  const std::size_t d = rows.cols;
  fit.components = Matrix(2, d);
  for (std::size_t k = 0; k < 2; ++k) {
    double norm = 0.0;
    for (std::size_t i = 0; i < d; ++i) norm = std::max(norm, std::abs(eig.vectors(k, i)));
    double sign = 1.0;
    for (std::size_t i = 0; i < d; ++i) {
      if (std::abs(eig.vectors(k, i)) > 1e-12 * norm) {
        sign = eig.vectors(k, i) < 0.0 ? -1.0 : 1.0;
        break;
      }
    }
    for (std::size_t i = 0; i < d; ++i) fit.components(k, i) = sign * eig.vectors(k, i);
    fit.variances[k] = std::max(0.0, eig.values[k]);
  }
  fit.degenerate = fit.variances[1] <= 1e-12 * std::max(fit.variances[0], 1e-300);
  fit.projected = project(fit, rows);
  return fit;
}

Matrix project(const Pca2& fit, const Matrix& rows) {
  if (rows.cols != fit.components.cols) throw DimensionError("project: column count differs from basis");
  Matrix out(rows.rows, 2);
  for (std::size_t i = 0; i < rows.rows; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < rows.cols; ++j) acc += (rows(i, j) - fit.mean[j]) * fit.components(k, j);
      out(i, k) = acc;
    }
  }
  return out;
}

namespace {

std::array<double, 2> center_of(const Matrix& projected) {
  std::array<double, 2> c{0.0, 0.0};
  for (std::size_t i = 0; i < projected.rows; ++i) {
    c[0] += projected(i, 0);
    c[1] += projected(i, 1);
  }
  c[0] /= static_cast<double>(projected.rows);
  c[1] /= static_cast<double>(projected.rows);
  return c;
}

Matrix stack(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows + bottom.rows, top.cols);
  std::copy(top.data.begin(), top.data.end(), out.data.begin());
  std::copy(bottom.data.begin(), bottom.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(top.data.size()));
  return out;
}

LayerShift shift_between(const Matrix& a, const Matrix& b, std::size_t layer) {
  // Row order of the union is canonicalized so that swapping a and b refits
  // the identical basis.
  const bool a_first = std::lexicographical_compare(b.data.begin(), b.data.end(), a.data.begin(), a.data.end()) == false;
  const Pca2 fit = pca2(a_first ? stack(a, b) : stack(b, a));
  LayerShift s;
  s.layer = layer;
  s.degenerate = fit.degenerate;
  s.projected_a = project(fit, a);
  s.projected_b = project(fit, b);
  s.center_a = center_of(s.projected_a);
  s.center_b = center_of(s.projected_b);
  s.distance = std::hypot(s.center_b[0] - s.center_a[0], s.center_b[1] - s.center_a[1]);
  return s;
}

}  // namespace

PcaReport shift_report(const StateDump& a, const StateDump& b, CenterMode mode) {
  if (a.layers.size() != b.layers.size() || a.layers.empty()) {
    throw ContractError("shift_report: dumps have " + std::to_string(a.layers.size()) + " and " +
                        std::to_string(b.layers.size()) + " layers");
  }
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].cols != b.layers[l].cols) {
      throw ContractError("shift_report: layer " + std::to_string(l) + " widths differ");
    }
  }
  PcaReport report;
  report.tag_a = a.tag;
  report.tag_b = b.tag;
  if (mode == CenterMode::Pooled) {
    Matrix pa = a.layers[0], pb = b.layers[0];
    for (std::size_t l = 1; l < a.layers.size(); ++l) {
      pa = stack(pa, a.layers[l]);
      pb = stack(pb, b.layers[l]);
    }
    report.layers.push_back(shift_between(pa, pb, 0));
    report.aggregate = report.layers[0].distance;
    return report;
  }
  double total = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    report.layers.push_back(shift_between(a.layers[l], b.layers[l], l));
    total += report.layers.back().distance;
  }
  report.aggregate = total / static_cast<double>(report.layers.size());
  return report;
}

std::string report_to_jsonl(const PcaReport& report) {
  std::ostringstream os;
  for (const auto& s : report.layers) {
    nlohmann::ordered_json j;
    j["layer"] = s.layer;
    j["center_a"] = {s.center_a[0], s.center_a[1]};
    j["center_b"] = {s.center_b[0], s.center_b[1]};
    j["distance"] = s.distance;
    j["degenerate"] = s.degenerate;
    os << j.dump() << '\n';
  }
  nlohmann::ordered_json agg;
  agg["aggregate"] = report.aggregate;
  agg["tag_a"] = report.tag_a;
  agg["tag_b"] = report.tag_b;
  agg["layers"] = report.layers.size();
  os << agg.dump() << '\n';
  return os.str();
}

PcaReport report_from_jsonl(const std::string& text) {
  PcaReport report;
  std::istringstream in(text);
  std::string line;
  bool saw_aggregate = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.contains("aggregate")) {
      report.aggregate = j.at("aggregate").get<double>();
      report.tag_a = j.at("tag_a").get<std::string>();
      report.tag_b = j.at("tag_b").get<std::string>();
      saw_aggregate = true;
      continue;
    }
    LayerShift s;
    s.layer = j.at("layer").get<std::size_t>();
    s.center_a = {j.at("center_a")[0].get<double>(), j.at("center_a")[1].get<double>()};
    s.center_b = {j.at("center_b")[0].get<double>(), j.at("center_b")[1].get<double>()};
    s.distance = j.at("distance").get<double>();
    s.degenerate = j.at("degenerate").get<bool>();
    report.layers.push_back(std::move(s));
  }
  if (!saw_aggregate) throw IoError("pca report: missing aggregate record");
  return report;
}

std::string scatter_to_jsonl(const PcaReport& report) {
  std::ostringstream os;
  for (const auto& s : report.layers) {
    for (const auto* which : {&s.projected_a, &s.projected_b}) {
      const std::string& tag = which == &s.projected_a ? report.tag_a : report.tag_b;
      for (std::size_t i = 0; i < which->rows; ++i) {
        nlohmann::ordered_json j;
        j["layer"] = s.layer;
        j["model"] = tag;
        j["x"] = (*which)(i, 0);
        j["y"] = (*which)(i, 1);
        os << j.dump() << '\n';
      }
    }
  }
  return os.str();
}

}  // namespace scm
