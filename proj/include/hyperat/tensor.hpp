#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hyperat/errors.hpp"

namespace hyperat {

// Row-major dense matrix; batches are stored one example per row.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Labels = std::vector<int>;

// Non-owning (name, matrix) handles used to walk parameter structs in a fixed
// order. Optimizers and checkpoints both rely on that order being stable.
template <class T>
using NamedParams = std::vector<std::pair<std::string, Mat<T>*>>;

template <class T>
using ConstNamedParams = std::vector<std::pair<std::string, const Mat<T>*>>;

template <class T>
inline void require_shape(const Mat<T>& m, Eigen::Index rows, Eigen::Index cols,
                          const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw DimensionError(what + ": expected " + std::to_string(rows) + "x" + std::to_string(cols) +
                         ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

template <class T>
inline bool all_finite(const Mat<T>& m) {
  return m.allFinite();
}

// Row-wise softmax with max subtraction.
template <class T>
Mat<T> softmax_rows(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

template <class T>
Mat<T> log_softmax_rows(const Mat<T>& logits) {
  Mat<T> out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    const T lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = (logits.row(i).array() - lse).matrix();
  }
  return out;
}

// Backward of a row-wise softmax: given p = softmax(z) and g = dL/dp,
// returns dL/dz = p * (g - <p, g>).
template <class T>
Mat<T> softmax_backward(const Mat<T>& probs, const Mat<T>& grad_probs) {
  Mat<T> out(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const T dot = probs.row(i).dot(grad_probs.row(i));
    out.row(i) = (probs.row(i).array() * (grad_probs.row(i).array() - dot)).matrix();
  }
  return out;
}

template <class T>
std::vector<int> argmax_rows(const Mat<T>& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index j = 0;
    m.row(i).maxCoeff(&j);
    out[static_cast<std::size_t>(i)] = static_cast<int>(j);
  }
  return out;
}

template <class T, class Rng>
void fill_normal(Mat<T>& m, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

template <class T, class Rng>
void fill_uniform(Mat<T>& m, Rng& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

// Selects rows of a batch matrix.
template <class T>
Mat<T> gather_rows(const Mat<T>& m, std::span<const std::size_t> rows) {
  Mat<T> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

}  // namespace hyperat
