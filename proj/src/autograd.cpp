#include "ulab/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "ulab/kernels.hpp"

namespace ulab {

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(ParamId id, const Tensor& value, bool requires_grad) {
  ULAB_REQUIRE(!consumed_, "tape already consumed by backward");
  Node n;
  n.external = &value;
  n.requires_grad = requires_grad;
  n.is_param = true;
  n.param = id;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  ULAB_REQUIRE(!consumed_, "tape already consumed by backward");
  Node n;
  n.owned = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_[i].requires_grad; });
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  if (!nodes_[id].requires_grad) return;
  Tensor& buf = grads_[id];
  if (buf.empty() && !g.empty()) {
    buf = g;
    return;
  }
  auto dst = buf.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Tensor& buf = grads_[id];
  if (buf.empty()) buf = Tensor(value(id).shape(), 0.0);
  return buf;
}

void Tape::sweep(Var loss, double seed) {
  ULAB_REQUIRE(!consumed_, "tape already consumed by backward");
  ULAB_REQUIRE(loss.valid() && &loss.tape() == this, "loss was not produced on this tape");
  ULAB_REQUIRE(value(loss.id()).size() == 1 && value(loss.id()).rank() == 0,
          "backward needs a scalar loss, got shape " + shape_string(value(loss.id()).shape()));
  const std::size_t top = loss.id();
  grads_.assign(top + 1, Tensor());
  reachable_.assign(top + 1, 0);
  reachable_[top] = 1;
  for (std::size_t id = top + 1; id-- > 0;) {
    if (!reachable_[id]) continue;
    for (std::size_t in : nodes_[id].inputs) reachable_[in] = 1;
  }
  grads_[top] = Tensor(Shape{}, seed);
  for (std::size_t id = top + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || grads_[id].empty()) continue;
    n.backward(*this, grads_[id]);
    grads_[id] = Tensor();
  }
  consumed_ = true;
}

GradientMap Tape::backward(Var loss) {
  GradientMap out;
  backward_into(loss, out, 1.0);
  return out;
}

void Tape::backward_into(Var loss, GradientMap& into, double seed) {
  sweep(loss, seed);
  for (std::size_t id = 0; id < reachable_.size(); ++id) {
    const Node& n = nodes_[id];
    if (!n.is_param || !n.requires_grad || !reachable_[id]) continue;
    auto it = into.find(n.param);
    if (it == into.end()) it = into.emplace(n.param, Tensor(value(id).shape(), 0.0)).first;
    const Tensor& g = grads_[id];
    if (g.empty()) continue;
    auto dst = it->second.data();
    auto src = g.data();
    ULAB_REQUIRE(dst.size() == src.size(), "gradient shape mismatch for parameter");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  for (Node& n : nodes_) n.backward = nullptr;
  grads_.clear();
  grads_.shrink_to_fit();
}

namespace ops {
namespace {

void require_matrix(const Tensor& t, const char* op) {
  ULAB_REQUIRE(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  ULAB_REQUIRE(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul");
  require_matrix(bv, "matmul");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  ULAB_REQUIRE(bv.rows() == k, "matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                              shape_string(bv.shape()));
  Tensor out({m, n}, 0.0);
  kernels::matmul_acc(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    if (t.requires_grad(ia)) {
      std::vector<double> bt(k * n);
      kernels::transpose(B.ptr(), bt.data(), k, n);
      kernels::matmul_acc(g.ptr(), bt.data(), t.grad_buffer(ia).ptr(), m, n, k);
    }
    if (t.requires_grad(ib)) kernels::matmul_tn_acc(A.ptr(), g.ptr(), t.grad_buffer(ib).ptr(), m, k, n);
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix(av, "matmul_nt");
  require_matrix(bv, "matmul_nt");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  ULAB_REQUIRE(bv.cols() == k, "matmul_nt: inner dimensions differ");
  Tensor out({m, n}, 0.0);
  kernels::matmul_nt(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia))
      kernels::matmul_acc(g.ptr(), t.value(ib).ptr(), t.grad_buffer(ia).ptr(), m, n, k);
    if (t.requires_grad(ib))
      kernels::matmul_tn_acc(g.ptr(), t.value(ia).ptr(), t.grad_buffer(ib).ptr(), m, n, k);
  });
}

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) {
      auto d = t.grad_buffer(ib).data();
      auto gv = g.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gv[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, const Tensor& g) {
    auto gv = g.data();
    if (t.requires_grad(ia)) {
      auto d = t.grad_buffer(ia).data();
      auto other = t.value(ib).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * other[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad_buffer(ib).data();
      auto other = t.value(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * other[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_matrix(xv, "add_bias");
  ULAB_REQUIRE(bv.size() == xv.cols(), "add_bias: bias length must equal column count");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out = xv;
  for (std::size_t i = 0; i < m; ++i) {
    double* r = out.ptr() + i * n;
    for (std::size_t j = 0; j < n; ++j) r[j] += bv[j];
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {ix, ib}, [ix, ib, m, n](Tape& t, const Tensor& g) {
    t.accumulate(ix, g);
    if (t.requires_grad(ib)) {
      double* d = t.grad_buffer(ib).ptr();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
    }
  });
}

Var scale(Var x, double s) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= s;
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, s](Tape& t, const Tensor& g) {
    auto d = t.grad_buffer(ix).data();
    auto gv = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * gv[i];
  });
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = kernels::gelu(v);
  const std::size_t ix = x.id();
  Tape& tape = x.tape();
  if (!tape.requires_grad(ix)) return tape.record(std::move(out), {ix}, nullptr);
  auto slope = std::make_shared<std::vector<double>>(out.size());
  auto xv = x.value().data();
  for (std::size_t i = 0; i < xv.size(); ++i) (*slope)[i] = kernels::gelu_grad(xv[i]);
  return tape.record(std::move(out), {ix}, [ix, slope](Tape& t, const Tensor& g) {
    auto d = t.grad_buffer(ix).data();
    auto gv = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gv[i] * (*slope)[i];
  });
}

Var layer_norm(Var x, Var gamma, Var beta) {
  const Tensor& xv = x.value();
  require_matrix(xv, "layer_norm");
  const std::size_t m = xv.rows(), n = xv.cols();
  ULAB_REQUIRE(gamma.value().size() == n && beta.value().size() == n,
          "layer_norm: gain/bias length must equal row width");
  auto xhat = std::make_shared<Tensor>(Shape{m, n});
  auto rstd = std::make_shared<std::vector<double>>(m);
  Tensor out({m, n});
  const double* gm = gamma.value().ptr();
  const double* bt = beta.value().ptr();
  for (std::size_t i = 0; i < m; ++i) {
    (*rstd)[i] = kernels::layer_norm_row(xv.ptr() + i * n, xhat->ptr() + i * n, n);
    const double* xh = xhat->ptr() + i * n;
    double* o = out.ptr() + i * n;
    for (std::size_t j = 0; j < n; ++j) o[j] = xh[j] * gm[j] + bt[j];
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {ix, ig, ib}, [ix, ig, ib, m, n, xhat, rstd](Tape& t, const Tensor& g) {
        if (t.requires_grad(ig)) {
          double* d = t.grad_buffer(ig).ptr();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j] * (*xhat)[i * n + j];
        }
        if (t.requires_grad(ib)) {
          double* d = t.grad_buffer(ib).ptr();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) d[j] += g[i * n + j];
        }
        if (t.requires_grad(ix)) {
          double* d = t.grad_buffer(ix).ptr();
          const double* gm = t.value(ig).ptr();
          std::vector<double> dxh(n);
          for (std::size_t i = 0; i < m; ++i) {
            const double* xh = xhat->ptr() + i * n;
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              dxh[j] = g[i * n + j] * gm[j];
              mean_d += dxh[j];
              mean_dx += dxh[j] * xh[j];
            }
            mean_d /= static_cast<double>(n);
            mean_dx /= static_cast<double>(n);
            const double r = (*rstd)[i];
            for (std::size_t j = 0; j < n; ++j)
              d[i * n + j] += r * (dxh[j] - mean_d - xh[j] * mean_dx);
          }
        }
      });
}

Var softmax(Var x, bool causal) {
  const Tensor& xv = x.value();
  require_matrix(xv, "softmax");
  const std::size_t m = xv.rows(), n = xv.cols();
  if (causal) ULAB_REQUIRE(n >= m, "softmax: causal mask needs at least as many columns as rows");
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    kernels::softmax_prefix(xv.ptr() + i * n, out.ptr() + i * n, causal ? i + 1 : n, n);
  const std::size_t ix = x.id();
  // The backward pass reads the output, which lands at the next node index.
  const std::size_t iy = x.tape().size();
  return x.tape().record(std::move(out), {ix}, [ix, iy, m, n](Tape& t, const Tensor& g) {
    const Tensor& yv = t.value(iy);
    double* d = t.grad_buffer(ix).ptr();
    for (std::size_t i = 0; i < m; ++i) {
      const double* yr = yv.ptr() + i * n;
      const double* gr = g.ptr() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) d[i * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var embedding(Var table, std::span<const TokenId> ids) {
  const Tensor& tv = table.value();
  require_matrix(tv, "embedding");
  const std::size_t v = tv.rows(), d = tv.cols();
  std::vector<TokenId> idx(ids.begin(), ids.end());
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    ULAB_REQUIRE(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < v,
            "embedding: id " + std::to_string(idx[i]) + " out of range");
    std::copy_n(tv.ptr() + static_cast<std::size_t>(idx[i]) * d, d, out.ptr() + i * d);
  }
  const std::size_t it = table.id();
  return table.tape().record(std::move(out), {it},
                             [it, d, idx = std::move(idx)](Tape& t, const Tensor& g) {
                               double* dst = t.grad_buffer(it).ptr();
                               for (std::size_t i = 0; i < idx.size(); ++i) {
                                 double* row = dst + static_cast<std::size_t>(idx[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
                               }
                             });
}

Var slice_cols(Var x, std::size_t start, std::size_t width) {
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_cols");
  const std::size_t m = xv.rows(), n = xv.cols();
  ULAB_REQUIRE(start + width <= n, "slice_cols: range out of bounds");
  Tensor out({m, width});
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(xv.ptr() + i * n + start, width, out.ptr() + i * width);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, m, n, start, width](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(ix).ptr();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < width; ++j) d[i * n + start + j] += g[i * width + j];
  });
}

Var concat_cols(std::span<const Var> parts) {
  ULAB_REQUIRE(!parts.empty(), "concat_cols: no inputs");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths, ids;
  std::size_t n = 0;
  for (const Var& p : parts) {
    require_matrix(p.value(), "concat_cols");
    ULAB_REQUIRE(p.value().rows() == m, "concat_cols: row counts differ");
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    n += p.value().cols();
  }
  Tensor out({m, n});
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.value().cols();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.value().ptr() + i * w, w, out.ptr() + i * n + off);
    off += w;
  }
  Tape& tape = parts[0].tape();
  return tape.record(std::move(out), ids, [ids, widths, m, n](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t w = widths[p];
      if (t.requires_grad(ids[p])) {
        double* d = t.grad_buffer(ids[p]).ptr();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) d[i * w + j] += g[i * n + off + j];
      }
      off += w;
    }
  });
}

Var set_row(Var x, std::size_t row, std::span<const double> values) {
  const Tensor& xv = x.value();
  require_matrix(xv, "set_row");
  const std::size_t n = xv.cols();
  ULAB_REQUIRE(row < xv.rows(), "set_row: row out of range");
  ULAB_REQUIRE(values.size() == n, "set_row: replacement width must equal row width");
  Tensor out = xv;
  std::copy(values.begin(), values.end(), out.ptr() + row * n);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {ix}, [ix, row, n](Tape& t, const Tensor& g) {
    double* d = t.grad_buffer(ix).ptr();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (i / n != row) d[i] += g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor::scalar(s), {ix}, [ix](Tape& t, const Tensor& g) {
    const double gv = g.item();
    for (double& d : t.grad_buffer(ix).data()) d += gv;
  });
}

namespace {

void check_rows(const Tensor& logits, std::size_t targets, std::size_t weights, const char* op) {
  require_matrix(logits, op);
  ULAB_REQUIRE(logits.rows() == targets && targets == weights,
               std::string(op) + ": logits rows, targets and weights must agree");
}

std::vector<double> mask_weights(std::span<const bool> mask, const char* op) {
  ULAB_REQUIRE(std::any_of(mask.begin(), mask.end(), [](bool b) { return b; }),
               std::string(op) + ": mask selects no positions");
  std::vector<double> w(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 : 0.0;
  return w;
}

}  // namespace

Var weighted_cross_entropy(Var logits, std::span<const TokenId> targets,
                           std::span<const double> weights) {
  const Tensor& z = logits.value();
  check_rows(z, targets.size(), weights.size(), "weighted_cross_entropy");
  ULAB_REQUIRE(std::any_of(weights.begin(), weights.end(), [](double w) { return w != 0.0; }),
               "weighted_cross_entropy: every row weight is zero");
  const std::size_t m = z.rows(), v = z.cols();
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<double> wts(weights.begin(), weights.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (wts[i] == 0.0) continue;
    ULAB_REQUIRE(tgt[i] >= 0 && static_cast<std::size_t>(tgt[i]) < v,
                 "weighted_cross_entropy: target id out of range");
    const double* r = z.ptr() + i * v;
    const double mx = *std::max_element(r, r + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(r[j] - mx);
    loss += wts[i] * ((mx + std::log(s)) - r[tgt[i]]);
  }
  const std::size_t iz = logits.id();
  return logits.tape().record(
      Tensor::scalar(loss), {iz},
      [iz, m, v, tgt = std::move(tgt), wts = std::move(wts)](Tape& t, const Tensor& g) {
        const Tensor& zv = t.value(iz);
        double* d = t.grad_buffer(iz).ptr();
        for (std::size_t i = 0; i < m; ++i) {
          if (wts[i] == 0.0) continue;
          const double gw = g.item() * wts[i];
          const double* r = zv.ptr() + i * v;
          const double mx = *std::max_element(r, r + v);
          double s = 0.0;
          for (std::size_t j = 0; j < v; ++j) s += std::exp(r[j] - mx);
          for (std::size_t j = 0; j < v; ++j) d[i * v + j] += gw * std::exp(r[j] - mx) / s;
          d[i * v + static_cast<std::size_t>(tgt[i])] -= gw;
        }
      });
}

Var masked_cross_entropy(Var logits, std::span<const TokenId> targets,
                         std::span<const bool> mask) {
  check_rows(logits.value(), targets.size(), mask.size(), "masked_cross_entropy");
  return weighted_cross_entropy(logits, targets, mask_weights(mask, "masked_cross_entropy"));
}

Var weighted_kl(Var logits, const Tensor& reference_log_probs, std::span<const double> weights) {
  const Tensor& z = logits.value();
  require_same(z, reference_log_probs, "weighted_kl");
  check_rows(z, weights.size(), weights.size(), "weighted_kl");
  const std::size_t m = z.rows(), v = z.cols();
  auto logp = std::make_shared<Tensor>(log_softmax_rows(z));
  auto ref = std::make_shared<Tensor>(reference_log_probs);
  auto row_kl = std::make_shared<std::vector<double>>(m, 0.0);
  std::vector<double> wts(weights.begin(), weights.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (wts[i] == 0.0) continue;
    double kl = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      const double lp = logp->at(i, j);
      kl += std::exp(lp) * (lp - ref->at(i, j));
    }
    (*row_kl)[i] = kl;
    loss += wts[i] * kl;
  }
  const std::size_t iz = logits.id();
  return logits.tape().record(
      Tensor::scalar(loss), {iz},
      [iz, m, v, logp, ref, row_kl, wts = std::move(wts)](Tape& t, const Tensor& g) {
        double* d = t.grad_buffer(iz).ptr();
        for (std::size_t i = 0; i < m; ++i) {
          if (wts[i] == 0.0) continue;
          const double gw = g.item() * wts[i];
          const double kl = (*row_kl)[i];
          for (std::size_t j = 0; j < v; ++j) {
            const double lp = logp->at(i, j);
            d[i * v + j] += gw * std::exp(lp) * ((lp - ref->at(i, j)) - kl);
          }
        }
      });
}

Var masked_kl(Var logits, const Tensor& reference_log_probs, std::span<const bool> mask) {
  check_rows(logits.value(), mask.size(), mask.size(), "masked_kl");
  return weighted_kl(logits, reference_log_probs, mask_weights(mask, "masked_kl"));
}

Var causal_attention(Var q, Var k, Var v, std::size_t num_heads,
                     std::span<const std::size_t> segments) {
  const Tensor& qv = q.value();
  require_matrix(qv, "causal_attention");
  require_same(qv, k.value(), "causal_attention");
  require_same(qv, v.value(), "causal_attention");
  const std::size_t n = qv.rows(), d = qv.cols();
  ULAB_REQUIRE(num_heads > 0 && d % num_heads == 0, "causal_attention: width not divisible by heads");
  std::vector<std::size_t> starts;  // segment boundaries, n appended
  std::size_t total = 0;
  for (std::size_t len : segments) {
    ULAB_REQUIRE(len > 0, "causal_attention: empty segment");
    starts.push_back(total);
    total += len;
  }
  if (segments.empty()) {
    starts.push_back(0);
    total = n;
  }
  ULAB_REQUIRE(total == n, "causal_attention: segment lengths must sum to the row count");
  starts.push_back(n);

  const std::size_t H = num_heads, dh = d / H;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  // probs[(h * n + i) * n + j] for keys j of row i's segment up to i.
  auto probs = std::make_shared<std::vector<double>>(H * n * n, 0.0);
  Tensor out({n, d}, 0.0);
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  std::vector<double> scores(n), kh, vh;
  for (std::size_t sgi = 0; sgi + 1 < starts.size(); ++sgi) {
    const std::size_t s0 = starts[sgi], s1 = starts[sgi + 1], len = s1 - s0;
    kh.resize(len * dh);
    vh.resize(len * dh);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t j = 0; j < len; ++j) {
        std::copy_n(kv.ptr() + (s0 + j) * d + h * dh, dh, kh.data() + j * dh);
        std::copy_n(vv.ptr() + (s0 + j) * d + h * dh, dh, vh.data() + j * dh);
      }
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t row = s0 + i, keys = i + 1;
        kernels::matmul_nt(qv.ptr() + row * d + h * dh, kh.data(), scores.data(), 1, dh, keys);
        for (std::size_t j = 0; j < keys; ++j) scores[j] *= inv;
        double* p = probs->data() + (h * n + row) * n + s0;
        kernels::softmax_prefix(scores.data(), p, keys, keys);
        kernels::matmul_acc(p, vh.data(), out.ptr() + row * d + h * dh, 1, keys, dh);
      }
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, n, d, H, dh, inv, probs, starts](Tape& t, const Tensor& g) {
        const Tensor& qv = t.value(iq);
        const Tensor& kv = t.value(ik);
        const Tensor& vv = t.value(iv);
        const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
        double* dq = gq ? t.grad_buffer(iq).ptr() : nullptr;
        double* dk = gk ? t.grad_buffer(ik).ptr() : nullptr;
        double* dv = gv ? t.grad_buffer(iv).ptr() : nullptr;
        std::vector<double> da(n), ds(n);
        for (std::size_t sgi = 0; sgi + 1 < starts.size(); ++sgi) {
          const std::size_t s0 = starts[sgi], s1 = starts[sgi + 1];
          for (std::size_t h = 0; h < H; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t i = s0; i < s1; ++i) {
              const double* p = probs->data() + (h * n + i) * n;
              const double* gi = g.ptr() + i * d + off;
              double dot = 0.0;
              for (std::size_t j = s0; j <= i; ++j) {
                const double* vj = vv.ptr() + j * d + off;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                da[j] = s;
                dot += p[j] * s;
                if (dv) {
                  double* dvj = dv + j * d + off;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * gi[c];
                }
              }
              for (std::size_t j = s0; j <= i; ++j) ds[j] = p[j] * (da[j] - dot) * inv;
              if (dq) {
                double* dqi = dq + i * d + off;
                for (std::size_t j = s0; j <= i; ++j) {
                  const double* kj = kv.ptr() + j * d + off;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds[j] * kj[c];
                }
              }
              if (dk) {
                const double* qi = qv.ptr() + i * d + off;
                for (std::size_t j = s0; j <= i; ++j) {
                  double* dkj = dk + j * d + off;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds[j] * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace ops

Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t m = logits.rows(), v = logits.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* r = out.ptr() + i * v;
    const double mx = *std::max_element(r, r + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(r[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < v; ++j) r[j] -= lse;
  }
  return out;
}

}  // namespace ulab
