#pragma once

// Straight-line double-precision reference for the encoder: nested loops,
// masked softmax by -infinity fill, no tape. Reads parameter values by name so
// it shares nothing with the graph builders except the weights themselves.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mapet/encoder.hpp"

namespace mapet::test {

using Dense = std::vector<std::vector<double>>;

template <typename S>
Dense to_dense(const Matrix<S>& m) {
  Dense d(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) d[i][j] = double(m(i, j));
  return d;
}

template <typename S>
Matrix<S> from_dense(const Dense& d) {
  Matrix<S> m(d.size(), d.empty() ? 0 : d[0].size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = S(d[i][j]);
  return m;
}

inline Dense ref_matmul(const Dense& a, const Dense& b) {
  Dense c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      c[i][j] = s;
    }
  return c;
}

inline Dense ref_linear(const Dense& x, const Dense& w, const Dense& bias) {
  auto y = ref_matmul(x, w);
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[0][j];
  return y;
}

inline Dense ref_layer_norm(const Dense& x, const Dense& g, const Dense& b, double eps) {
  Dense y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0.0, var = 0.0;
    for (double v : x[i]) mean += v;
    mean /= double(x[i].size());
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= double(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * g[0][j] + b[0][j];
  }
  return y;
}

// Multi-head attention, queries from qx, keys/values from kvx. mask[i][j] == 0
// fills -inf before the softmax. Empty mask = full visibility.
inline Dense ref_attention(const Dense& qx, const Dense& kvx, const std::vector<std::vector<int>>& mask,
                           const Dense& wq, const Dense& bq, const Dense& wk, const Dense& bk, const Dense& wv,
                           const Dense& bv, const Dense& wo, const Dense& bo, std::size_t heads) {
  const auto q = ref_linear(qx, wq, bq), k = ref_linear(kvx, wk, bk), v = ref_linear(kvx, wv, bv);
  const std::size_t d = q[0].size(), dh = d / heads;
  Dense merged(q.size(), std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> s(k.size());
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k.size(); ++j) {
        double dot = 0.0;
        for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * k[j][h * dh + e];
        s[j] = dot / std::sqrt(double(dh));
        if (!mask.empty() && !mask[i][j]) s[j] = -std::numeric_limits<double>::infinity();
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& x : s) z += (x = std::exp(x - mx));
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t e = 0; e < dh; ++e) merged[i][h * dh + e] += s[j] / z * v[j][h * dh + e];
    }
  }
  return ref_linear(merged, wo, bo);
}

inline Dense ref_gelu(Dense x) {
  for (auto& r : x)
    for (auto& v : r) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return x;
}

template <typename S>
struct RefModel {
  const Encoder<S>& model;

  Dense p(const std::string& name) const { return to_dense(model.params().value(name)); }

  static std::vector<std::vector<int>> mask_of(const BoolMatrix* m) {
    if (!m) return {};
    std::vector<std::vector<int>> out(m->rows(), std::vector<int>(m->cols()));
    for (std::size_t i = 0; i < m->rows(); ++i)
      for (std::size_t j = 0; j < m->cols(); ++j) out[i][j] = (*m)(i, j);
    return out;
  }

  // One block; g may be empty.
  std::pair<Dense, Dense> block(std::size_t l, const Dense& h, const Dense& g, const BoolMatrix* cm,
                                const BoolMatrix* qm) const {
    const std::string b = "blocks." + std::to_string(l) + ".";
    const double eps = model.config().ln_eps;
    const auto hn = ref_layer_norm(h, p(b + "norm1.weight"), p(b + "norm1.bias"), eps);
    auto att = [&](const Dense& xn, const BoolMatrix* m) {
      return ref_attention(xn, hn, mask_of(m), p(b + "attn.q.weight"), p(b + "attn.q.bias"), p(b + "attn.k.weight"),
                           p(b + "attn.k.bias"), p(b + "attn.v.weight"), p(b + "attn.v.bias"),
                           p(b + "attn.proj.weight"), p(b + "attn.proj.bias"), model.config().heads);
    };
    auto add_scaled = [](Dense x, const Dense& br, const Dense& ls) {
      for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += ls[0][j] * br[i][j];
      return x;
    };
    auto ffn = [&](const Dense& x) {
      const auto xn = ref_layer_norm(x, p(b + "norm2.weight"), p(b + "norm2.bias"), eps);
      return ref_linear(ref_gelu(ref_linear(xn, p(b + "mlp.fc1.weight"), p(b + "mlp.fc1.bias"))),
                        p(b + "mlp.fc2.weight"), p(b + "mlp.fc2.bias"));
    };
    auto h1 = add_scaled(h, att(hn, cm), p(b + "ls1"));
    auto h2 = add_scaled(h1, ffn(h1), p(b + "ls2"));
    Dense g2;
    if (!g.empty()) {
      const auto gn = ref_layer_norm(g, p(b + "norm1.weight"), p(b + "norm1.bias"), eps);
      auto g1 = add_scaled(g, att(gn, qm), p(b + "ls1"));
      g2 = add_scaled(g1, ffn(g1), p(b + "ls2"));
    }
    return {h2, g2};
  }

  Dense vocab(const Dense& g) const {
    const auto n = ref_layer_norm(g, p("vocab_head.norm.weight"), p("vocab_head.norm.bias"), model.config().ln_eps);
    return ref_linear(n, p("vocab_head.weight"), p("vocab_head.bias"));
  }

  Dense embed(const Dense& patches) const {
    auto x = ref_linear(patches, p("patch_embed.weight"), p("patch_embed.bias"));
    const auto pos = p("pos_embed");
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < x[i].size(); ++j) x[i][j] += pos[i][j];
    return x;
  }

  // MaPeT pipeline from raster embeddings: permute, append mask tokens, run
  // blocks with the given masks, vocabulary head on the query stream.
  Dense pretrain(const Dense& emb, const Permutation& perm, const MaskPair& masks, bool with_mask_rows) const {
    const auto pos = p("pos_embed");
    const auto m = p("mask_token");
    Dense h, g;
    for (auto i : perm.order) h.push_back(emb[i]);
    for (std::size_t t = perm.cut; t < perm.size(); ++t) {
      std::vector<double> row(m[0].size());
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = m[0][j] + pos[perm.order[t]][j];
      g.push_back(row);
    }
    if (with_mask_rows) h.insert(h.end(), g.begin(), g.end());
    for (std::size_t l = 0; l < model.config().layers; ++l) std::tie(h, g) = block(l, h, g, &masks.content, &masks.query);
    return vocab(g);
  }

  Dense finetune(const Dense& emb) const {
    Dense h = emb, g;
    for (std::size_t l = 0; l < model.config().layers; ++l) std::tie(h, g) = block(l, h, {}, nullptr, nullptr);
    return h;
  }
};

}  // namespace mapet::test
