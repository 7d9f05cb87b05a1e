#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "hyperat/errors.hpp"
#include "hyperat/tensor.hpp"

namespace hyperat {

// Shape of the small Vision Transformer. The image is split into square
// patches, a class token is prepended, and `depth` pre-norm blocks follow.
struct BackboneSpec {
  int image_size = 28;
  int patch_size = 4;
  int channels = 1;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int num_classes = 10;

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 || heads <= 0 ||
        mlp_ratio <= 0 || num_classes <= 0) {
      throw ConfigError("backbone dimensions must be positive");
    }
    if (image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " is not divisible by patch_size " + std::to_string(patch_size));
    }
    if (embed_dim % heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                        std::to_string(heads));
    }
    if (depth < 1) throw ConfigError("depth must be >= 1");
  }

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int tokens() const { return num_patches() + 1; }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int input_dim() const { return channels * image_size * image_size; }
  int head_dim() const { return embed_dim / heads; }
  int mlp_dim() const { return mlp_ratio * embed_dim; }

  bool operator==(const BackboneSpec&) const = default;
};

enum class Position : int { AttnQkv = 0, MlpFc1 = 1, MlpFc2 = 2 };
inline constexpr int kPositionsPerLayer = 3;

inline std::string_view position_name(Position p) {
  switch (p) {
    case Position::AttnQkv: return "attn_qkv";
    case Position::MlpFc1: return "mlp_fc1";
    case Position::MlpFc2: return "mlp_fc2";
  }
  return "?";
}

// A weight matrix that receives a generated low-rank update. The matrix maps
// in_dim features to out_dim features (W0 is out_dim x in_dim).
struct InjectionSite {
  int layer = 0;
  Position position = Position::AttnQkv;
  int in_dim = 0;
  int out_dim = 0;

  int index() const { return layer * kPositionsPerLayer + static_cast<int>(position); }
  bool operator==(const InjectionSite&) const = default;
};

inline std::vector<InjectionSite> injection_sites(const BackboneSpec& spec) {
  std::vector<InjectionSite> sites;
  const int d = spec.embed_dim;
  for (int l = 0; l < spec.depth; ++l) {
    sites.push_back({l, Position::AttnQkv, d, 3 * d});
    sites.push_back({l, Position::MlpFc1, d, spec.mlp_dim()});
    sites.push_back({l, Position::MlpFc2, spec.mlp_dim(), d});
  }
  return sites;
}

template <class T>
struct BlockParams {
  Mat<T> norm1_g, norm1_b;
  Mat<T> qkv_w, qkv_b;
  Mat<T> proj_w, proj_b;
  Mat<T> norm2_g, norm2_b;
  Mat<T> fc1_w, fc1_b;
  Mat<T> fc2_w, fc2_b;
};

// All backbone parameters. Vectors are stored as 1 x n matrices so that every
// parameter can be visited uniformly.
template <class T>
struct BackboneParams {
  Mat<T> patch_w, patch_b;
  Mat<T> cls_token;
  Mat<T> pos_embed;
  std::vector<BlockParams<T>> blocks;
  Mat<T> norm_g, norm_b;
  Mat<T> head_w, head_b;

  NamedParams<T> named() {
    NamedParams<T> out;
    out.emplace_back("patch_embed.w", &patch_w);
    out.emplace_back("patch_embed.b", &patch_b);
    out.emplace_back("cls_token", &cls_token);
    out.emplace_back("pos_embed", &pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      auto& b = blocks[i];
      out.emplace_back(p + "norm1.g", &b.norm1_g);
      out.emplace_back(p + "norm1.b", &b.norm1_b);
      out.emplace_back(p + "attn.qkv.w", &b.qkv_w);
      out.emplace_back(p + "attn.qkv.b", &b.qkv_b);
      out.emplace_back(p + "attn.proj.w", &b.proj_w);
      out.emplace_back(p + "attn.proj.b", &b.proj_b);
      out.emplace_back(p + "norm2.g", &b.norm2_g);
      out.emplace_back(p + "norm2.b", &b.norm2_b);
      out.emplace_back(p + "mlp.fc1.w", &b.fc1_w);
      out.emplace_back(p + "mlp.fc1.b", &b.fc1_b);
      out.emplace_back(p + "mlp.fc2.w", &b.fc2_w);
      out.emplace_back(p + "mlp.fc2.b", &b.fc2_b);
    }
    out.emplace_back("norm.g", &norm_g);
    out.emplace_back("norm.b", &norm_b);
    out.emplace_back("head.w", &head_w);
    out.emplace_back("head.b", &head_b);
    return out;
  }

  ConstNamedParams<T> named() const {
    ConstNamedParams<T> out;
    for (auto& [name, ptr] : const_cast<BackboneParams*>(this)->named()) out.emplace_back(name, ptr);
    return out;
  }

  Mat<T>& site_weight(const InjectionSite& s) {
    auto& b = blocks.at(static_cast<std::size_t>(s.layer));
    switch (s.position) {
      case Position::AttnQkv: return b.qkv_w;
      case Position::MlpFc1: return b.fc1_w;
      case Position::MlpFc2: return b.fc2_w;
    }
    throw ConfigError("unknown injection position");
  }
  const Mat<T>& site_weight(const InjectionSite& s) const {
    return const_cast<BackboneParams*>(this)->site_weight(s);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, m] : named()) n += static_cast<std::size_t>(m->size());
    return n;
  }
};

template <class T>
BackboneParams<T> zeros_like(const BackboneParams<T>& p) {
  BackboneParams<T> out = p;
  for (auto& [name, m] : out.named()) m->setZero();
  return out;
}

// Parameter groups: embed, norm, attn_proj, site, site_bias, head.
inline std::string_view param_group(std::string_view name) {
  auto ends_with = [&](std::string_view s) {
    return name.size() >= s.size() && name.substr(name.size() - s.size()) == s;
  };
  if (name.starts_with("patch_embed") || name == "cls_token" || name == "pos_embed") return "embed";
  if (name.starts_with("head.")) return "head";
  if (name.find("norm") != std::string_view::npos) return "norm";
  if (name.find("attn.proj") != std::string_view::npos) return "attn_proj";
  if (ends_with("qkv.w") || ends_with("fc1.w") || ends_with("fc2.w")) return "site";
  if (ends_with("qkv.b") || ends_with("fc1.b") || ends_with("fc2.b")) return "site_bias";
  throw LookupError("unknown parameter name " + std::string(name));
}

// Which backbone parameter groups an optimizer may touch.
struct TrainableMask {
  std::set<std::string> groups;

  static TrainableMask all() { return {{"embed", "norm", "attn_proj", "site", "site_bias", "head"}}; }
  static TrainableMask tuning() { return {{"head", "norm"}}; }

  bool has_group(std::string_view g) const { return groups.count(std::string(g)) > 0; }
  bool operator()(std::string_view name) const { return has_group(param_group(name)); }
  bool operator==(const TrainableMask&) const = default;
};

template <class T>
struct BackboneState {
  BackboneSpec spec;
  BackboneParams<T> params;
  TrainableMask trainable = TrainableMask::tuning();
  std::vector<InjectionSite> sites;
};

namespace detail {

template <class T, class Rng>
Mat<T> xavier(int out, int in, Rng& rng) {
  Mat<T> w(out, in);
  fill_uniform(w, rng, std::sqrt(6.0 / static_cast<double>(in + out)));
  return w;
}

}  // namespace detail

template <class T>
BackboneState<T> init_backbone(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  const int d = spec.embed_dim;
  BackboneState<T> st;
  st.spec = spec;
  st.sites = injection_sites(spec);
  auto& p = st.params;
  p.patch_w = detail::xavier<T>(d, spec.patch_dim(), rng);
  p.patch_b = Mat<T>::Zero(1, d);
  p.cls_token = Mat<T>(1, d);
  fill_normal(p.cls_token, rng, 0.02);
  p.pos_embed = Mat<T>(spec.tokens(), d);
  fill_normal(p.pos_embed, rng, 0.02);
  for (int l = 0; l < spec.depth; ++l) {
    BlockParams<T> b;
    b.norm1_g = Mat<T>::Ones(1, d);
    b.norm1_b = Mat<T>::Zero(1, d);
    b.qkv_w = detail::xavier<T>(3 * d, d, rng);
    b.qkv_b = Mat<T>::Zero(1, 3 * d);
    b.proj_w = detail::xavier<T>(d, d, rng);
    b.proj_b = Mat<T>::Zero(1, d);
    b.norm2_g = Mat<T>::Ones(1, d);
    b.norm2_b = Mat<T>::Zero(1, d);
    b.fc1_w = detail::xavier<T>(spec.mlp_dim(), d, rng);
    b.fc1_b = Mat<T>::Zero(1, spec.mlp_dim());
    b.fc2_w = detail::xavier<T>(d, spec.mlp_dim(), rng);
    b.fc2_b = Mat<T>::Zero(1, d);
    p.blocks.push_back(std::move(b));
  }
  p.norm_g = Mat<T>::Ones(1, d);
  p.norm_b = Mat<T>::Zero(1, d);
  p.head_w = detail::xavier<T>(spec.num_classes, d, rng);
  p.head_b = Mat<T>::Zero(1, spec.num_classes);
  return st;
}

// Additive updates to the injection-site weights, indexed by
// InjectionSite::index(). An empty matrix means "no update at this site".
template <class T>
using SiteDeltas = std::vector<Mat<T>>;

struct GradRequest {
  bool input = false;
  bool params = false;  // only groups enabled in the trainable mask
  bool sites = false;   // dL/dW at every injection site
};

template <class T>
struct BackboneGrads {
  Mat<T> input;
  BackboneParams<T> params;
  SiteDeltas<T> sites;
};

namespace detail {

template <class T>
constexpr T kLayerNormEps = static_cast<T>(1e-6);

template <class T>
void layer_norm_forward(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>& y, Mat<T>& xhat,
                        Mat<T>& rstd) {
  const auto n = x.cols();
  xhat.resize(x.rows(), n);
  rstd.resize(x.rows(), 1);
  y.resize(x.rows(), n);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + kLayerNormEps<T>);
    rstd(i, 0) = r;
    xhat.row(i) = ((x.row(i).array() - mean) * r).matrix();
  }
  y.noalias() = (xhat.array().rowwise() * g.row(0).array()).matrix();
  y.rowwise() += b.row(0);
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const Mat<T>& rstd, const Mat<T>& g,
                           Mat<T>* dg, Mat<T>* db) {
  if (dg) *dg += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (db) *db += dy.colwise().sum();
  Mat<T> dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const T m1 = dxhat.row(i).mean();
    const T m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<T>(dy.cols());
    dx.row(i) = ((dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * rstd(i, 0)).matrix();
  }
  return dx;
}

template <class T>
T gelu(T u) {
  return T(0.5) * u * (T(1) + std::erf(u / std::sqrt(T(2))));
}

template <class T>
T gelu_grad(T u) {
  const T cdf = T(0.5) * (T(1) + std::erf(u / std::sqrt(T(2))));
  const T pdf = std::exp(T(-0.5) * u * u) / std::sqrt(T(2) * T(M_PI));
  return cdf + u * pdf;
}

}  // namespace detail

// The backbone bound to an optional set of site deltas. Effective weights
// W0 + delta are materialized once at construction, so the object is cheap
// to evaluate repeatedly (e.g. inside an attack loop) and is read-only.
template <class T>
class VitModel {
 public:
  using Scalar = T;

  struct BlockTape {
    Mat<T> xhat1, rstd1, h1, qkv, attn, o, xhat2, rstd2, h2, u, a;
  };
  struct Tape {
    Eigen::Index batch = 0;
    Mat<T> patches;
    std::vector<BlockTape> blocks;
    Mat<T> cls_xhat, cls_rstd, cls_norm;
  };

  explicit VitModel(const BackboneState<T>& state, const SiteDeltas<T>* deltas = nullptr)
      : state_(&state) {
    const auto& sites = state.sites;
    weights_.resize(sites.size(), nullptr);
    owned_.resize(sites.size());
    if (deltas && !deltas->empty() && deltas->size() != sites.size()) {
      throw DimensionError("site delta map has " + std::to_string(deltas->size()) +
                           " entries, backbone has " + std::to_string(sites.size()) + " sites");
    }
    for (const auto& s : sites) {
      const auto i = static_cast<std::size_t>(s.index());
      const Mat<T>& w0 = state.params.site_weight(s);
      if (deltas && !deltas->empty() && (*deltas)[i].size() > 0) {
        require_shape((*deltas)[i], s.out_dim, s.in_dim,
                      "delta at layer " + std::to_string(s.layer) + " " +
                          std::string(position_name(s.position)));
        owned_[i] = w0 + (*deltas)[i];
        weights_[i] = &owned_[i];
      } else {
        weights_[i] = &w0;
      }
    }
  }

  const BackboneState<T>& state() const { return *state_; }
  const Mat<T>& site_weight(const InjectionSite& s) const {
    return *weights_[static_cast<std::size_t>(s.index())];
  }

  Mat<T> logits(const Mat<T>& x) const { return forward(x, nullptr); }

  Mat<T> forward(const Mat<T>& x, Tape* tape) const {
    const auto& spec = state_->spec;
    const auto& p = state_->params;
    if (x.cols() != spec.input_dim()) {
      throw DimensionError("image batch has " + std::to_string(x.cols()) + " values per example, expected " +
                           std::to_string(spec.input_dim()));
    }
    const Eigen::Index B = x.rows();
    const int N = spec.tokens();
    const int P = spec.num_patches();
    const int d = spec.embed_dim;

    Mat<T> patches = extract_patches(x);
    Mat<T> emb = patches * p.patch_w.transpose();
    emb.rowwise() += p.patch_b.row(0);

    Mat<T> z(B * N, d);
    for (Eigen::Index b = 0; b < B; ++b) {
      z.row(b * N) = p.cls_token.row(0) + p.pos_embed.row(0);
      z.block(b * N + 1, 0, P, d) = emb.block(b * P, 0, P, d) + p.pos_embed.bottomRows(P);
    }
    if (tape) {
      tape->batch = B;
      tape->patches = std::move(patches);
      tape->blocks.assign(p.blocks.size(), {});
    }

    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
      BlockTape local;
      BlockTape& bt = tape ? tape->blocks[l] : local;
      block_forward(static_cast<int>(l), z, B, bt, tape != nullptr);
    }

    Mat<T> cls(B, d);
    for (Eigen::Index b = 0; b < B; ++b) cls.row(b) = z.row(b * N);
    Mat<T> cls_norm, cls_xhat, cls_rstd;
    detail::layer_norm_forward(cls, p.norm_g, p.norm_b, cls_norm, cls_xhat, cls_rstd);
    Mat<T> out = cls_norm * p.head_w.transpose();
    out.rowwise() += p.head_b.row(0);
    if (tape) {
      tape->cls_xhat = std::move(cls_xhat);
      tape->cls_rstd = std::move(cls_rstd);
      tape->cls_norm = std::move(cls_norm);
    }
    return out;
  }

  BackboneGrads<T> backward(const Tape& tape, const Mat<T>& dlogits, GradRequest req) const {
    const auto& spec = state_->spec;
    const auto& p = state_->params;
    const auto& mask = state_->trainable;
    const Eigen::Index B = tape.batch;
    require_shape(dlogits, B, spec.num_classes, "logit gradient");
    const int N = spec.tokens();
    const int P = spec.num_patches();
    const int d = spec.embed_dim;

    const bool g_embed = req.params && mask.has_group("embed");
    const bool g_norm = req.params && mask.has_group("norm");
    const bool g_proj = req.params && mask.has_group("attn_proj");
    const bool g_site = req.sites || (req.params && mask.has_group("site"));
    const bool g_site_bias = req.params && mask.has_group("site_bias");
    const bool g_head = req.params && mask.has_group("head");

    BackboneGrads<T> grads;
    if (req.params) grads.params = zeros_like(p);
    if (g_site) grads.sites.resize(state_->sites.size());

    if (g_head) {
      grads.params.head_w.noalias() += dlogits.transpose() * tape.cls_norm;
      grads.params.head_b += dlogits.colwise().sum();
    }
    Mat<T> dcls_norm = dlogits * p.head_w;
    Mat<T> dcls = detail::layer_norm_backward(dcls_norm, tape.cls_xhat, tape.cls_rstd, p.norm_g,
                                              g_norm ? &grads.params.norm_g : nullptr,
                                              g_norm ? &grads.params.norm_b : nullptr);
    Mat<T> dz = Mat<T>::Zero(B * N, d);
    for (Eigen::Index b = 0; b < B; ++b) dz.row(b * N) = dcls.row(b);

    const bool need_lower = req.input || g_embed || g_norm || g_proj || g_site || g_site_bias;
    for (int l = static_cast<int>(p.blocks.size()) - 1; l >= 0 && need_lower; --l) {
      BlockParams<T>* gb = req.params ? &grads.params.blocks[static_cast<std::size_t>(l)] : nullptr;
      block_backward(l, tape.blocks[static_cast<std::size_t>(l)], B, dz, gb, g_norm, g_proj, g_site,
                     g_site_bias, g_site ? &grads.sites : nullptr);
    }

    if (g_embed) {
      for (Eigen::Index b = 0; b < B; ++b) {
        grads.params.cls_token += dz.row(b * N);
        grads.params.pos_embed += dz.block(b * N, 0, N, d);
      }
    }
    if (g_embed || req.input) {
      Mat<T> demb(B * P, d);
      for (Eigen::Index b = 0; b < B; ++b) demb.block(b * P, 0, P, d) = dz.block(b * N + 1, 0, P, d);
      if (g_embed) {
        grads.params.patch_w.noalias() += demb.transpose() * tape.patches;
        grads.params.patch_b += demb.colwise().sum();
      }
      if (req.input) {
        Mat<T> dpatches = demb * p.patch_w;
        grads.input = scatter_patches(dpatches, B);
      }
    }
    return grads;
  }

  Mat<T> input_gradient(const Tape& tape, const Mat<T>& dlogits) const {
    return backward(tape, dlogits, GradRequest{.input = true}).input;
  }

 private:
  Mat<T> extract_patches(const Mat<T>& x) const {
    const auto& s = state_->spec;
    const int G = s.grid(), ps = s.patch_size, H = s.image_size, C = s.channels;
    Mat<T> out(x.rows() * s.num_patches(), s.patch_dim());
    for (Eigen::Index b = 0; b < x.rows(); ++b) {
      for (int gy = 0; gy < G; ++gy) {
        for (int gx = 0; gx < G; ++gx) {
          const Eigen::Index row = b * s.num_patches() + gy * G + gx;
          int k = 0;
          for (int c = 0; c < C; ++c) {
            for (int py = 0; py < ps; ++py) {
              const Eigen::Index base = static_cast<Eigen::Index>(c) * H * H + (gy * ps + py) * H + gx * ps;
              for (int px = 0; px < ps; ++px) out(row, k++) = x(b, base + px);
            }
          }
        }
      }
    }
    return out;
  }

  Mat<T> scatter_patches(const Mat<T>& dpatches, Eigen::Index B) const {
    const auto& s = state_->spec;
    const int G = s.grid(), ps = s.patch_size, H = s.image_size, C = s.channels;
    Mat<T> dx = Mat<T>::Zero(B, s.input_dim());
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int gy = 0; gy < G; ++gy) {
        for (int gx = 0; gx < G; ++gx) {
          const Eigen::Index row = b * s.num_patches() + gy * G + gx;
          int k = 0;
          for (int c = 0; c < C; ++c) {
            for (int py = 0; py < ps; ++py) {
              const Eigen::Index base = static_cast<Eigen::Index>(c) * H * H + (gy * ps + py) * H + gx * ps;
              for (int px = 0; px < ps; ++px) dx(b, base + px) += dpatches(row, k++);
            }
          }
        }
      }
    }
    return dx;
  }

  void block_forward(int l, Mat<T>& z, Eigen::Index B, BlockTape& bt, bool keep) const {
    const auto& spec = state_->spec;
    const auto& bp = state_->params.blocks[static_cast<std::size_t>(l)];
    const int N = spec.tokens(), d = spec.embed_dim, H = spec.heads, dh = spec.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const auto site = [&](Position pos) -> const Mat<T>& {
      return *weights_[static_cast<std::size_t>(l * kPositionsPerLayer + static_cast<int>(pos))];
    };

    Mat<T> h1;
    detail::layer_norm_forward(z, bp.norm1_g, bp.norm1_b, h1, bt.xhat1, bt.rstd1);
    Mat<T> qkv = h1 * site(Position::AttnQkv).transpose();
    qkv.rowwise() += bp.qkv_b.row(0);

    Mat<T> o(B * N, d);
    if (keep) bt.attn.resize(B * H * N, N);
    Mat<T> s(N, N);
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto q = qkv.block(b * N, h * dh, N, dh);
        const auto k = qkv.block(b * N, d + h * dh, N, dh);
        const auto v = qkv.block(b * N, 2 * d + h * dh, N, dh);
        s.noalias() = (q * k.transpose()) * scale;
        for (int i = 0; i < N; ++i) {
          const T mx = s.row(i).maxCoeff();
          s.row(i) = (s.row(i).array() - mx).exp().matrix();
          s.row(i) /= s.row(i).sum();
        }
        o.block(b * N, h * dh, N, dh).noalias() = s * v;
        if (keep) bt.attn.block((b * H + h) * N, 0, N, N) = s;
      }
    }
    Mat<T> attn_out = o * bp.proj_w.transpose();
    attn_out.rowwise() += bp.proj_b.row(0);
    z += attn_out;
    if (keep) {
      bt.h1 = std::move(h1);
      bt.qkv = std::move(qkv);
      bt.o = std::move(o);
    }

    Mat<T> h2;
    detail::layer_norm_forward(z, bp.norm2_g, bp.norm2_b, h2, bt.xhat2, bt.rstd2);
    Mat<T> u = h2 * site(Position::MlpFc1).transpose();
    u.rowwise() += bp.fc1_b.row(0);
    Mat<T> a = u.unaryExpr([](T v) { return detail::gelu(v); });
    Mat<T> mlp_out = a * site(Position::MlpFc2).transpose();
    mlp_out.rowwise() += bp.fc2_b.row(0);
    z += mlp_out;
    if (keep) {
      bt.h2 = std::move(h2);
      bt.u = std::move(u);
      bt.a = std::move(a);
    }
  }

  // dz holds dL/d(block output) on entry and dL/d(block input) on exit.
  void block_backward(int l, const BlockTape& bt, Eigen::Index B, Mat<T>& dz, BlockParams<T>* gb,
                      bool g_norm, bool g_proj, bool g_site, bool g_site_bias,
                      SiteDeltas<T>* site_grads) const {
    const auto& spec = state_->spec;
    const auto& bp = state_->params.blocks[static_cast<std::size_t>(l)];
    const int N = spec.tokens(), d = spec.embed_dim, H = spec.heads, dh = spec.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const auto idx = [&](Position pos) {
      return static_cast<std::size_t>(l * kPositionsPerLayer + static_cast<int>(pos));
    };
    const auto site = [&](Position pos) -> const Mat<T>& { return *weights_[idx(pos)]; };

    // MLP branch.
    if (g_site) (*site_grads)[idx(Position::MlpFc2)].noalias() = dz.transpose() * bt.a;
    if (g_site_bias) gb->fc2_b += dz.colwise().sum();
    Mat<T> du = dz * site(Position::MlpFc2);
    for (Eigen::Index i = 0; i < du.size(); ++i) du.data()[i] *= detail::gelu_grad(bt.u.data()[i]);
    if (g_site) (*site_grads)[idx(Position::MlpFc1)].noalias() = du.transpose() * bt.h2;
    if (g_site_bias) gb->fc1_b += du.colwise().sum();
    Mat<T> dh2 = du * site(Position::MlpFc1);
    dz += detail::layer_norm_backward(dh2, bt.xhat2, bt.rstd2, bp.norm2_g, g_norm ? &gb->norm2_g : nullptr,
                                      g_norm ? &gb->norm2_b : nullptr);

    // Attention branch.
    if (g_proj) {
      gb->proj_w.noalias() += dz.transpose() * bt.o;
      gb->proj_b += dz.colwise().sum();
    }
    Mat<T> d_o = dz * bp.proj_w;
    Mat<T> dqkv(B * N, 3 * d);
    Mat<T> da(N, N), ds(N, N);
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto a = bt.attn.block((b * H + h) * N, 0, N, N);
        const auto q = bt.qkv.block(b * N, h * dh, N, dh);
        const auto k = bt.qkv.block(b * N, d + h * dh, N, dh);
        const auto v = bt.qkv.block(b * N, 2 * d + h * dh, N, dh);
        const auto dob = d_o.block(b * N, h * dh, N, dh);
        dqkv.block(b * N, 2 * d + h * dh, N, dh).noalias() = a.transpose() * dob;
        da.noalias() = dob * v.transpose();
        for (int i = 0; i < N; ++i) {
          const T dot = da.row(i).dot(a.row(i));
          ds.row(i) = (a.row(i).array() * (da.row(i).array() - dot)).matrix() * scale;
        }
        dqkv.block(b * N, h * dh, N, dh).noalias() = ds * k;
        dqkv.block(b * N, d + h * dh, N, dh).noalias() = ds.transpose() * q;
      }
    }
    if (g_site) (*site_grads)[idx(Position::AttnQkv)].noalias() = dqkv.transpose() * bt.h1;
    if (g_site_bias) gb->qkv_b += dqkv.colwise().sum();
    Mat<T> dh1 = dqkv * site(Position::AttnQkv);
    dz += detail::layer_norm_backward(dh1, bt.xhat1, bt.rstd1, bp.norm1_g, g_norm ? &gb->norm1_g : nullptr,
                                      g_norm ? &gb->norm1_b : nullptr);

    if (gb && g_site && state_->trainable.has_group("site")) {
      gb->qkv_w += (*site_grads)[idx(Position::AttnQkv)];
      gb->fc1_w += (*site_grads)[idx(Position::MlpFc1)];
      gb->fc2_w += (*site_grads)[idx(Position::MlpFc2)];
    }
  }

  const BackboneState<T>* state_;
  std::vector<const Mat<T>*> weights_;
  std::vector<Mat<T>> owned_;
};

// Logits of the backbone with optional site deltas (empty or all-zero deltas
// reproduce the frozen base).
template <class T>
Mat<T> forward_logits(const BackboneState<T>& state, const Mat<T>& images,
                      const SiteDeltas<T>* deltas = nullptr) {
  return VitModel<T>(state, deltas).logits(images);
}

template <class T>
SiteDeltas<T> zero_deltas(const BackboneState<T>& state) {
  SiteDeltas<T> out(state.sites.size());
  for (const auto& s : state.sites) out[static_cast<std::size_t>(s.index())] = Mat<T>::Zero(s.out_dim, s.in_dim);
  return out;
}

// Converts a backbone to another scalar type (float checkpoints are checked
// in double precision, for instance).
template <class To, class From>
BackboneState<To> cast_backbone(const BackboneState<From>& src) {
  BackboneState<To> out;
  out.spec = src.spec;
  out.trainable = src.trainable;
  out.sites = src.sites;
  out.params.blocks.resize(src.params.blocks.size());
  auto dst = out.params.named();
  auto from = src.params.named();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second = from[i].second->template cast<To>();
  return out;
}

}  // namespace hyperat
