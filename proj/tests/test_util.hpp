#pragma once

#include <functional>
#include <random>


#include "hyperat/hyperat.hpp"

namespace testutil {

using hyperat::Mat;

// One block, d = 8, on 8x8 single-channel images.
inline hyperat::BackboneSpec tiny_spec(int depth = 1) {
  hyperat::BackboneSpec s;
  s.image_size = 8;
  s.patch_size = 4;
  s.channels = 1;
  s.embed_dim = 8;
  s.depth = depth;
  s.heads = 2;
  s.mlp_ratio = 2;
  s.num_classes = 4;
  return s;
}

template <class T>
Mat<T> random_images(int n, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  Mat<T> x(n, dim);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(u(rng));
  return x;
}

inline hyperat::Labels random_labels(int n, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  hyperat::Labels y(static_cast<std::size_t>(n));
  for (auto& v : y) v = std::uniform_int_distribution<int>(0, classes - 1)(rng);
  return y;
}

template <class T>
Mat<T> random_mat(int r, int c, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  Mat<T> m(r, c);
  hyperat::fill_normal(m, rng, sd);
  return m;
}

// Norm-wise relative error between an analytic gradient and central finite
// differences of `f` with respect to every entry of `param`.
inline double fd_relative_error(Mat<double>& param, const Mat<double>& analytic, const std::function<double()>& f,
                                double h = 1e-6) {
  Mat<double> numeric(param.rows(), param.cols());
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double saved = param.data()[i];
    param.data()[i] = saved + h;
    const double up = f();
    param.data()[i] = saved - h;
    const double down = f();
    param.data()[i] = saved;
    numeric.data()[i] = (up - down) / (2 * h);
  }
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-10});
  return (analytic - numeric).norm() / scale;
}

// Double-precision HyperAT state on the tiny backbone with non-zero B heads
// so that every generated factor carries gradient.
inline hyperat::HyperatState<double> tiny_state(std::vector<std::string> methods, std::uint64_t seed = 11,
                                                int depth = 1) {
  auto bb = hyperat::init_backbone<double>(tiny_spec(depth), seed);
  hyperat::HyperConfig hc;
  hc.embed_dim = 6;
  hc.context_dim = 10;
  hc.rank = 4;
  hc.alpha = 4;
  auto st = hyperat::make_hyperat_state<double>(std::move(bb), hyperat::MethodRegistry(std::move(methods)), hc,
                                               hyperat::DefenseParams{}, seed + 1);
  std::mt19937_64 rng(seed + 2);
  for (auto& b : st.hyper.hypernet.head_b) hyperat::fill_normal(b, rng, 0.3);
  return st;
}

}  // namespace testutil
