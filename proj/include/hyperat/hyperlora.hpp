#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "hyperat/backbone.hpp"
#include "hyperat/errors.hpp"
#include "hyperat/tensor.hpp"

namespace hyperat {

// Ordered, unique list of defense-method ids. The index of a method is its
// row in the method-embedding table.
class MethodRegistry {
 public:
  MethodRegistry() = default;
  explicit MethodRegistry(std::vector<std::string> methods) : methods_(std::move(methods)) {
    if (methods_.empty()) throw ConfigError("method registry is empty");
    std::set<std::string> seen;
    for (const auto& m : methods_) {
      if (!seen.insert(m).second) throw ConfigError("duplicate method id '" + m + "'");
    }
  }

  int size() const { return static_cast<int>(methods_.size()); }
  const std::vector<std::string>& methods() const { return methods_; }
  const std::string& name(int i) const {
    if (i < 0 || i >= size()) throw LookupError("method index " + std::to_string(i) + " out of range");
    return methods_[static_cast<std::size_t>(i)];
  }
  int index_of(std::string_view id) const {
    auto it = std::find(methods_.begin(), methods_.end(), id);
    if (it == methods_.end()) throw LookupError("unknown method id '" + std::string(id) + "'");
    return static_cast<int>(it - methods_.begin());
  }
  bool operator==(const MethodRegistry&) const = default;

 private:
  std::vector<std::string> methods_;
};

// (method, layer, position) triple addressing one generated adapter.
struct AdapterContext {
  int method = 0;
  int layer = 0;
  Position position = Position::AttnQkv;
};

struct HyperConfig {
  int embed_dim = 32;     // t: method / layer / position embedding width
  int context_dim = 64;   // t_nu: projector output width
  int rank = 16;
  double alpha = 16.0;
  bool operator==(const HyperConfig&) const = default;
};

// Method, layer and position embeddings plus the two-layer projector
// nu = W2 relu(W1 [m; l; p] + b1) + b2.
template <class T>
struct EmbeddingBank {
  Mat<T> method_emb;    // M x t
  Mat<T> layer_emb;     // L x t
  Mat<T> position_emb;  // 3 x t
  Mat<T> proj1_w, proj1_b;
  Mat<T> proj2_w, proj2_b;

  int embed_dim() const { return static_cast<int>(method_emb.cols()); }
  int context_dim() const { return static_cast<int>(proj2_w.rows()); }

  NamedParams<T> named() {
    return {{"bank.method_emb", &method_emb}, {"bank.layer_emb", &layer_emb},
            {"bank.position_emb", &position_emb}, {"bank.proj1.w", &proj1_w},
            {"bank.proj1.b", &proj1_b}, {"bank.proj2.w", &proj2_w},
            {"bank.proj2.b", &proj2_b}};
  }
};

struct ShapeClass {
  int out_dim = 0;
  int in_dim = 0;
  auto operator<=>(const ShapeClass&) const = default;
};

// Output heads of the shared hypernetwork, one (W^A, W^B) pair per distinct
// site shape. W^A maps nu to the r*k entries of A, W^B to the d_out*r entries of B.
template <class T>
struct HypernetworkState {
  int rank = 16;
  T alpha = T(16);
  std::vector<ShapeClass> classes;
  std::vector<Mat<T>> head_a;
  std::vector<Mat<T>> head_b;

  T scale() const { return alpha / static_cast<T>(rank); }

  int class_index(ShapeClass c) const {
    auto it = std::find(classes.begin(), classes.end(), c);
    if (it == classes.end()) {
      throw ConfigError("no hypernetwork head for shape " + std::to_string(c.out_dim) + "x" +
                        std::to_string(c.in_dim));
    }
    return static_cast<int>(it - classes.begin());
  }

  NamedParams<T> named() {
    NamedParams<T> out;
    for (std::size_t i = 0; i < classes.size(); ++i) {
      const std::string p = "hyper." + std::to_string(classes[i].out_dim) + "x" + std::to_string(classes[i].in_dim);
      out.emplace_back(p + ".a", &head_a[i]);
      out.emplace_back(p + ".b", &head_b[i]);
    }
    return out;
  }
};

template <class T>
struct LoraFactors {
  Mat<T> a;  // r x k
  Mat<T> b;  // d_out x r
  T scale = T(1);

  Mat<T> delta() const { return scale * (b * a); }
};

// Specialist adapter set: one factor pair per injection site, indexed by
// InjectionSite::index().
template <class T>
using AdapterSet = std::vector<LoraFactors<T>>;

template <class T>
struct HyperLora {
  MethodRegistry registry;
  EmbeddingBank<T> bank;
  HypernetworkState<T> hypernet;

  NamedParams<T> named() {
    auto out = bank.named();
    for (auto& e : hypernet.named()) out.push_back(e);
    return out;
  }
  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& [name, m] : named()) n += static_cast<std::size_t>(m->size());
    return n;
  }
};

template <class T>
HyperLora<T> zeros_like(const HyperLora<T>& h) {
  HyperLora<T> out = h;
  for (auto& [name, m] : out.named()) m->setZero();
  return out;
}

inline std::vector<ShapeClass> shape_classes(const std::vector<InjectionSite>& sites) {
  std::vector<ShapeClass> out;
  for (const auto& s : sites) {
    ShapeClass c{s.out_dim, s.in_dim};
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

// Embeddings ~ N(0,1); the projector is scaled so that |nu| is O(1), and W^A
// so that the generated A has the usual LoRA fan-in scale. W^B starts at zero
// so the adapted model initially equals the frozen base.
template <class T>
HyperLora<T> init_hyperlora(const MethodRegistry& registry, const BackboneSpec& spec,
                            const HyperConfig& cfg, std::uint64_t seed) {
  if (cfg.embed_dim <= 0 || cfg.context_dim <= 0 || cfg.rank <= 0) {
    throw ConfigError("hypernetwork dimensions must be positive");
  }
  const auto sites = injection_sites(spec);
  for (const auto& s : sites) {
    if (cfg.rank > std::min(s.out_dim, s.in_dim)) {
      throw ConfigError("rank " + std::to_string(cfg.rank) + " exceeds min(d_out, k) at a " +
                        std::string(position_name(s.position)) + " site");
    }
  }
  std::mt19937_64 rng(seed);
  const int t = cfg.embed_dim, tn = cfg.context_dim;
  HyperLora<T> h;
  h.registry = registry;
  auto& bank = h.bank;
  bank.method_emb = Mat<T>(registry.size(), t);
  bank.layer_emb = Mat<T>(spec.depth, t);
  bank.position_emb = Mat<T>(kPositionsPerLayer, t);
  fill_normal(bank.method_emb, rng, 1.0);
  fill_normal(bank.layer_emb, rng, 1.0);
  fill_normal(bank.position_emb, rng, 1.0);
  bank.proj1_w = Mat<T>(tn, 3 * t);
  fill_normal(bank.proj1_w, rng, std::sqrt(2.0 / (3.0 * t)));
  bank.proj1_b = Mat<T>::Zero(1, tn);
  bank.proj2_w = Mat<T>(tn, tn);
  fill_normal(bank.proj2_w, rng, 1.0 / tn);
  bank.proj2_b = Mat<T>::Zero(1, tn);

  auto& hn = h.hypernet;
  hn.rank = cfg.rank;
  hn.alpha = static_cast<T>(cfg.alpha);
  hn.classes = shape_classes(sites);
  for (const auto& c : hn.classes) {
    Mat<T> wa(cfg.rank * c.in_dim, tn);
    fill_uniform(wa, rng, 1.0 / std::sqrt(static_cast<double>(c.in_dim)));
    hn.head_a.push_back(std::move(wa));
    hn.head_b.push_back(Mat<T>::Zero(static_cast<Eigen::Index>(c.out_dim) * cfg.rank, tn));
  }
  return h;
}

namespace detail {

template <class T>
struct ContextCache {
  Mat<T> input;  // 1 x 3t
  Mat<T> pre;    // 1 x t_nu
  Mat<T> nu;     // 1 x t_nu
};

template <class T>
ContextCache<T> embed_context_cached(const EmbeddingBank<T>& bank, const AdapterContext& ctx) {
  if (ctx.method < 0 || ctx.method >= bank.method_emb.rows()) {
    throw LookupError("method index " + std::to_string(ctx.method) + " out of range");
  }
  if (ctx.layer < 0 || ctx.layer >= bank.layer_emb.rows()) {
    throw LookupError("layer index " + std::to_string(ctx.layer) + " out of range");
  }
  const int t = bank.embed_dim();
  ContextCache<T> c;
  c.input.resize(1, 3 * t);
  c.input.leftCols(t) = bank.method_emb.row(ctx.method);
  c.input.middleCols(t, t) = bank.layer_emb.row(ctx.layer);
  c.input.rightCols(t) = bank.position_emb.row(static_cast<int>(ctx.position));
  c.pre = c.input * bank.proj1_w.transpose() + bank.proj1_b;
  c.nu = c.pre.cwiseMax(T(0)) * bank.proj2_w.transpose() + bank.proj2_b;
  return c;
}

}  // namespace detail

template <class T>
Mat<T> embed_context(const EmbeddingBank<T>& bank, const AdapterContext& ctx) {
  return detail::embed_context_cached(bank, ctx).nu;
}

template <class T>
Mat<T> embed_context(const HyperLora<T>& h, std::string_view method, int layer, Position pos) {
  return embed_context(h.bank, AdapterContext{h.registry.index_of(method), layer, pos});
}

template <class T>
LoraFactors<T> generate_lora(const HypernetworkState<T>& hn, const Mat<T>& nu, ShapeClass shape) {
  const auto c = static_cast<std::size_t>(hn.class_index(shape));
  const auto& wa = hn.head_a[c];
  const auto& wb = hn.head_b[c];
  if (nu.rows() != 1 || nu.cols() != wa.cols()) {
    throw DimensionError("context vector width " + std::to_string(nu.cols()) + " != head input " +
                         std::to_string(wa.cols()));
  }
  const int r = hn.rank;
  Mat<T> a_vec = nu * wa.transpose();
  Mat<T> b_vec = nu * wb.transpose();
  LoraFactors<T> f;
  f.a = Eigen::Map<const Mat<T>>(a_vec.data(), r, shape.in_dim);
  f.b = Eigen::Map<const Mat<T>>(b_vec.data(), shape.out_dim, r);
  f.scale = hn.scale();
  return f;
}

template <class T>
AdapterSet<T> generate_method(const HyperLora<T>& h, int method, const std::vector<InjectionSite>& sites) {
  AdapterSet<T> out(sites.size());
  for (const auto& s : sites) {
    const Mat<T> nu = embed_context(h.bank, AdapterContext{method, s.layer, s.position});
    out[static_cast<std::size_t>(s.index())] = generate_lora(h.hypernet, nu, ShapeClass{s.out_dim, s.in_dim});
  }
  return out;
}

// All M x L x 3 factor pairs, indexed [method][site].
template <class T>
std::vector<AdapterSet<T>> generate_all(const HypernetworkState<T>& hn, const EmbeddingBank<T>& bank,
                                        const MethodRegistry& registry,
                                        const std::vector<InjectionSite>& sites) {
  std::vector<AdapterSet<T>> out;
  for (int m = 0; m < registry.size(); ++m) {
    AdapterSet<T> set(sites.size());
    for (const auto& s : sites) {
      const Mat<T> nu = embed_context(bank, AdapterContext{m, s.layer, s.position});
      set[static_cast<std::size_t>(s.index())] = generate_lora(hn, nu, ShapeClass{s.out_dim, s.in_dim});
    }
    out.push_back(std::move(set));
  }
  return out;
}

template <class T>
SiteDeltas<T> adapter_deltas(const AdapterSet<T>& set) {
  SiteDeltas<T> out(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) out[i] = set[i].delta();
  return out;
}

// Accumulates dL/d(hypernetwork, embeddings, projector) into `grads`, given
// dL/dW at every injection site of the adapted model for method `method`.
// Since W = W0 + scale*B*A, dL/dW is also dL/d(delta).
template <class T>
void hyper_backward(const HyperLora<T>& h, int method, const std::vector<InjectionSite>& sites,
                    const SiteDeltas<T>& site_grads, HyperLora<T>& grads) {
  const auto& bank = h.bank;
  const auto& hn = h.hypernet;
  const int t = bank.embed_dim();
  const int r = hn.rank;
  for (const auto& s : sites) {
    const Mat<T>& g = site_grads.at(static_cast<std::size_t>(s.index()));
    const auto cache = detail::embed_context_cached(bank, AdapterContext{method, s.layer, s.position});
    const ShapeClass shape{s.out_dim, s.in_dim};
    const auto c = static_cast<std::size_t>(hn.class_index(shape));
    const LoraFactors<T> f = generate_lora(hn, cache.nu, shape);

    Mat<T> da = f.scale * (f.b.transpose() * g);  // r x k
    Mat<T> db = f.scale * (g * f.a.transpose());  // d_out x r
    const Eigen::Map<const Mat<T>> da_vec(da.data(), 1, static_cast<Eigen::Index>(r) * s.in_dim);
    const Eigen::Map<const Mat<T>> db_vec(db.data(), 1, static_cast<Eigen::Index>(r) * s.out_dim);

    grads.hypernet.head_a[c].noalias() += da_vec.transpose() * cache.nu;
    grads.hypernet.head_b[c].noalias() += db_vec.transpose() * cache.nu;
    Mat<T> dnu = da_vec * hn.head_a[c] + db_vec * hn.head_b[c];

    grads.bank.proj2_w.noalias() += dnu.transpose() * cache.pre.cwiseMax(T(0));
    grads.bank.proj2_b += dnu;
    Mat<T> dpre = dnu * bank.proj2_w;
    for (Eigen::Index i = 0; i < dpre.cols(); ++i) {
      if (cache.pre(0, i) <= T(0)) dpre(0, i) = T(0);
    }
    grads.bank.proj1_w.noalias() += dpre.transpose() * cache.input;
    grads.bank.proj1_b += dpre;
    Mat<T> dinput = dpre * bank.proj1_w;
    grads.bank.method_emb.row(method) += dinput.leftCols(t);
    grads.bank.layer_emb.row(s.layer) += dinput.middleCols(t, t);
    grads.bank.position_emb.row(static_cast<int>(s.position)) += dinput.rightCols(t);
  }
}

template <class To, class From>
HyperLora<To> cast_hyperlora(const HyperLora<From>& src) {
  HyperLora<To> out;
  out.registry = src.registry;
  out.hypernet.rank = src.hypernet.rank;
  out.hypernet.alpha = static_cast<To>(src.hypernet.alpha);
  out.hypernet.classes = src.hypernet.classes;
  out.hypernet.head_a.resize(src.hypernet.head_a.size());
  out.hypernet.head_b.resize(src.hypernet.head_b.size());
  auto dst = out.named();
  auto from = const_cast<HyperLora<From>&>(src).named();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i].second = from[i].second->template cast<To>();
  return out;
}

}  // namespace hyperat
