#pragma once

#include <Eigen/Dense>

#include "json.hpp"

#include "diop/common.hpp"

namespace diop {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Mean and the top-k principal axes (rows of `components`, orthonormal,
/// descending variance).
struct PcaModel {
  Vector mean;
  Matrix components;  // k x d
  Vector variances;   // k eigenvalues of the sample covariance

  Eigen::Index k() const { return components.rows(); }
  Eigen::Index d() const { return components.cols(); }
};

/// Flips each axis so its largest-magnitude entry (first one on ties) is
/// positive.
inline void canonicalize_signs(Matrix& components) {
  for (Eigen::Index r = 0; r < components.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < components.cols(); ++c)
      if (std::abs(components(r, c)) > std::abs(components(r, best))) best = c;
    if (components(r, best) < 0) components.row(r) *= -1.0;
  }
}

/// Fits via SVD of the centred data (no explicit covariance).
inline PcaModel pca_fit(const Matrix& X, Eigen::Index k) {
  const Eigen::Index n = X.rows(), d = X.cols();
  if (n < 2) throw ValidationError("PCA needs at least 2 samples");
  if (k < 1 || k > std::min(n, d))
    throw ValidationError("PCA target dimension " + std::to_string(k) + " outside [1, min(n, d)]");
  PcaModel m;
  m.mean = X.colwise().mean().transpose();
  const Eigen::MatrixXd centered = X.rowwise() - m.mean.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  m.components = svd.matrixV().leftCols(k).transpose();
  m.variances = svd.singularValues().head(k).array().square() / static_cast<double>(n - 1);
  canonicalize_signs(m.components);
  return m;
}

inline Matrix pca_transform(const PcaModel& m, const Matrix& X) {
  if (X.cols() != m.d()) throw DimensionError("PCA input has " + std::to_string(X.cols()) +
                                              " columns, model expects " + std::to_string(m.d()));
  return (X.rowwise() - m.mean.transpose()) * m.components.transpose();
}

inline Matrix pca_inverse_transform(const PcaModel& m, const Matrix& Y) {
  if (Y.cols() != m.k()) throw DimensionError("PCA scores have the wrong width");
  Matrix out = Y * m.components;
  out.rowwise() += m.mean.transpose();
  return out;
}

inline nlohmann::ordered_json pca_to_json(const PcaModel& m) {
  nlohmann::ordered_json j;
  j["mean"] = std::vector<double>(m.mean.data(), m.mean.data() + m.mean.size());
  j["variances"] = std::vector<double>(m.variances.data(), m.variances.data() + m.variances.size());
  auto rows = nlohmann::ordered_json::array();
  for (Eigen::Index r = 0; r < m.k(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.d()));
    for (Eigen::Index c = 0; c < m.d(); ++c) row[c] = m.components(r, c);
    rows.push_back(row);
  }
  j["components"] = rows;
  return j;
}

inline PcaModel pca_from_json(const nlohmann::json& j) {
  PcaModel m;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto var = j.at("variances").get<std::vector<double>>();
  const auto rows = j.at("components").get<std::vector<std::vector<double>>>();
  m.mean = Eigen::Map<const Vector>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  m.variances = Eigen::Map<const Vector>(var.data(), static_cast<Eigen::Index>(var.size()));
  m.components.resize(static_cast<Eigen::Index>(rows.size()), m.mean.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != mean.size()) throw FormatError("PCA component has the wrong length");
    for (std::size_t c = 0; c < mean.size(); ++c) m.components(r, c) = rows[r][c];
  }
  return m;
}

}  // namespace diop
