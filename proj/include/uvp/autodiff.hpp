#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "uvp/common.hpp"
#include "uvp/tensor.hpp"

// Reverse-mode tape over Tensor. Graphs are built per evaluation and freed
// with the last Var reference; leaves (parameters) live across steps. Every
// op is deterministic for any thread count: parallel loops partition output
// elements, never share accumulators.
namespace uvp::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;
  bool needs_grad = false;
  bool grad_alloc = false;
  std::vector<Var> parents;
  std::function<void(Node&)> back;

  Tensor& grad_buf() {
    if (!grad_alloc) {
      grad.shape = val.shape;
      grad.v.assign(val.v.size(), 0.0);
      grad_alloc = true;
    }
    return grad;
  }
};

inline Var leaf(Tensor t, bool requires_grad = true) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->needs_grad = requires_grad;
  return n;
}

inline Var constant(Tensor t) { return leaf(std::move(t), false); }
inline Var constant(double x) { return leaf(Tensor::scalar(x), false); }

inline bool any_needs(const std::vector<Var>& ps) {
  for (const auto& p : ps)
    if (p->needs_grad) return true;
  return false;
}

inline Var make_node(Tensor val, std::vector<Var> parents,
                     std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->parents = std::move(parents);
  n->needs_grad = any_needs(n->parents);
  if (n->needs_grad) n->back = std::move(back);
  return n;
}

// ---------------------------------------------------------------------------
// elementwise

inline Var add(const Var& a, const Var& b) {
  check_shape(a->val.same_shape(b->val), "add: shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& g = n.grad;
    for (int k = 0; k < 2; ++k) {
      Var& p = n.parents[k];
      if (!p->needs_grad) continue;
      Tensor& gp = p->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_shape(a->val.same_shape(b->val), "sub: shape mismatch");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& g = n.grad;
    if (n.parents[0]->needs_grad) {
      Tensor& gp = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i];
    }
    if (n.parents[1]->needs_grad) {
      Tensor& gp = n.parents[1]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_shape(a->val.same_shape(b->val), "mul: shape mismatch");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& av = n.parents[0]->val;
    const Tensor& bv = n.parents[1]->val;
    if (n.parents[0]->needs_grad) {
      Tensor& gp = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i] * bv[i];
    }
    if (n.parents[1]->needs_grad) {
      Tensor& gp = n.parents[1]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i] * av[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  check_shape(a->val.same_shape(b->val), "div: shape mismatch");
  Tensor out = a->val;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& n) {
    const Tensor& g = n.grad;
    const Tensor& av = n.parents[0]->val;
    const Tensor& bv = n.parents[1]->val;
    if (n.parents[0]->needs_grad) {
      Tensor& gp = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i] / bv[i];
    }
    if (n.parents[1]->needs_grad) {
      Tensor& gp = n.parents[1]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i)
        gp[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Var scale(const Var& a, double c) {
  Tensor out = a->val;
  for (auto& x : out.v) x *= c;
  return make_node(std::move(out), {a}, [c](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    Tensor& gp = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.grad.numel(); ++i) gp[i] += c * n.grad[i];
  });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var add_const(const Var& a, double c) {
  Tensor out = a->val;
  for (auto& x : out.v) x += c;
  return make_node(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    Tensor& gp = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.grad.numel(); ++i) gp[i] += n.grad[i];
  });
}

// |x| with subgradient 0 at x == 0.
inline Var abs(const Var& a) {
  Tensor out = a->val;
  for (auto& x : out.v) x = std::fabs(x);
  return make_node(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    const Tensor& av = n.parents[0]->val;
    Tensor& gp = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      double s = av[i] > 0.0 ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
      gp[i] += s * n.grad[i];
    }
  });
}

// sqrt(x + eps), eps keeping the derivative finite at 0.
inline Var sqrt_eps(const Var& a, double eps) {
  Tensor out = a->val;
  for (auto& x : out.v) x = std::sqrt(x + eps);
  return make_node(std::move(out), {a}, [eps](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    const Tensor& av = n.parents[0]->val;
    Tensor& gp = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      gp[i] += 0.5 / std::sqrt(av[i] + eps) * n.grad[i];
  });
}

// max(x, c); clamped entries get zero gradient.
inline Var clamp_min(const Var& a, double c) {
  Tensor out = a->val;
  for (auto& x : out.v) x = std::max(x, c);
  return make_node(std::move(out), {a}, [c](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    const Tensor& av = n.parents[0]->val;
    Tensor& gp = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.grad.numel(); ++i)
      if (av[i] > c) gp[i] += n.grad[i];
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a->val;
  for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
  Tensor saved = out;
  return make_node(std::move(out), {a}, [saved](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    Tensor& gp = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      double s = saved[i];
      gp[i] += n.grad[i] * s * (1.0 - s);
    }
  });
}

inline Var silu(const Var& a) {
  Tensor out = a->val;
  for (auto& x : out.v) {
    double s = 1.0 / (1.0 + std::exp(-x));
    x = x * s;
  }
  return make_node(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    const Tensor& av = n.parents[0]->val;
    Tensor& gp = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      double s = 1.0 / (1.0 + std::exp(-av[i]));
      gp[i] += n.grad[i] * s * (1.0 + av[i] * (1.0 - s));
    }
  });
}

inline Var reshape(const Var& a, std::vector<int64_t> shape) {
  Tensor out = a->val.reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    Tensor& gp = n.parents[0]->grad_buf();
    for (int64_t i = 0; i < n.grad.numel(); ++i) gp[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// scalar broadcast (s is a 1-element Var)

namespace detail {
inline void check_scalar(const Var& s) {
  check_shape(s->val.numel() == 1, "expected 1-element scalar var");
}
}  // namespace detail

inline Var sub_scalar(const Var& a, const Var& s) {
  detail::check_scalar(s);
  Tensor out = a->val;
  double sv = s->val[0];
  for (auto& x : out.v) x -= sv;
  return make_node(std::move(out), {a, s}, [](Node& n) {
    const Tensor& g = n.grad;
    if (n.parents[0]->needs_grad) {
      Tensor& gp = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i];
    }
    if (n.parents[1]->needs_grad) {
      double acc = 0.0;
      for (int64_t i = 0; i < g.numel(); ++i) acc += g[i];
      n.parents[1]->grad_buf()[0] -= acc;
    }
  });
}

inline Var div_scalar(const Var& a, const Var& s) {
  detail::check_scalar(s);
  Tensor out = a->val;
  double sv = s->val[0];
  for (auto& x : out.v) x /= sv;
  return make_node(std::move(out), {a, s}, [](Node& n) {
    const Tensor& g = n.grad;
    double sv = n.parents[1]->val[0];
    if (n.parents[0]->needs_grad) {
      Tensor& gp = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i] / sv;
    }
    if (n.parents[1]->needs_grad) {
      const Tensor& av = n.parents[0]->val;
      double acc = 0.0;
      for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * av[i];
      n.parents[1]->grad_buf()[0] -= acc / (sv * sv);
    }
  });
}

inline Var mul_scalar(const Var& a, const Var& s) {
  detail::check_scalar(s);
  Tensor out = a->val;
  double sv = s->val[0];
  for (auto& x : out.v) x *= sv;
  return make_node(std::move(out), {a, s}, [](Node& n) {
    const Tensor& g = n.grad;
    double sv = n.parents[1]->val[0];
    if (n.parents[0]->needs_grad) {
      Tensor& gp = n.parents[0]->grad_buf();
      for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i] * sv;
    }
    if (n.parents[1]->needs_grad) {
      const Tensor& av = n.parents[0]->val;
      double acc = 0.0;
      for (int64_t i = 0; i < g.numel(); ++i) acc += g[i] * av[i];
      n.parents[1]->grad_buf()[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

inline Var sum(const Var& a) {
  double acc = 0.0;
  for (double x : a->val.v) acc += x;
  return make_node(Tensor::scalar(acc), {a}, [](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    Tensor& gp = n.parents[0]->grad_buf();
    double g = n.grad[0];
    for (auto& x : gp.v) x += g;
  });
}

inline Var mean(const Var& a) {
  check_shape(a->val.numel() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a->val.numel()));
}

// sum(a * w) for a constant weight tensor (masked sums).
inline Var dot_const(const Var& a, const Tensor& w) {
  check_shape(a->val.same_shape(w), "dot_const: shape mismatch");
  double acc = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) acc += a->val[i] * w[i];
  Tensor wc = w;
  return make_node(Tensor::scalar(acc), {a}, [wc](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    Tensor& gp = n.parents[0]->grad_buf();
    double g = n.grad[0];
    for (int64_t i = 0; i < wc.numel(); ++i) gp[i] += g * wc[i];
  });
}

// [m, n] -> [m], summing each row.
inline Var row_sum(const Var& a) {
  check_shape(a->val.rank() == 2, "row_sum expects rank-2");
  int64_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({m});
  for (int64_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < n; ++j) acc += a->val[i * n + j];
    out[i] = acc;
  }
  return make_node(std::move(out), {a}, [m, n](Node& n_) {
    if (!n_.parents[0]->needs_grad) return;
    Tensor& gp = n_.parents[0]->grad_buf();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) gp[i * n + j] += n_.grad[i];
  });
}

inline Var gather_index(const Var& a, int64_t idx) {
  check_shape(idx >= 0 && idx < a->val.numel(), "gather_index out of range");
  return make_node(Tensor::scalar(a->val[idx]), {a}, [idx](Node& n) {
    if (!n.parents[0]->needs_grad) return;
    n.parents[0]->grad_buf()[idx] += n.grad[0];
  });
}

// ---------------------------------------------------------------------------
// rows (token sequences are [rows, width])

inline Var gather_rows(const Var& a, std::vector<int64_t> idx) {
  check_shape(a->val.rank() == 2, "gather_rows expects rank-2");
  int64_t n = a->val.dim(1);
  Tensor out({static_cast<int64_t>(idx.size()), n});
  for (size_t r = 0; r < idx.size(); ++r) {
    check_shape(idx[r] >= 0 && idx[r] < a->val.dim(0), "gather_rows index out of range");
    std::copy_n(a->val.data() + idx[r] * n, n, out.data() + static_cast<int64_t>(r) * n);
  }
  return make_node(std::move(out), {a}, [idx, n](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    Tensor& gp = nd.parents[0]->grad_buf();
    for (size_t r = 0; r < idx.size(); ++r)
      for (int64_t j = 0; j < n; ++j)
        gp[idx[r] * n + j] += nd.grad[static_cast<int64_t>(r) * n + j];
  });
}

inline Var slice_rows(const Var& a, int64_t r0, int64_t r1) {
  check_shape(a->val.rank() == 2 && r0 >= 0 && r1 <= a->val.dim(0) && r0 <= r1,
              "slice_rows out of range");
  int64_t n = a->val.dim(1);
  Tensor out({r1 - r0, n});
  std::copy_n(a->val.data() + r0 * n, (r1 - r0) * n, out.data());
  return make_node(std::move(out), {a}, [r0, n](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    Tensor& gp = nd.parents[0]->grad_buf();
    for (int64_t i = 0; i < nd.grad.numel(); ++i) gp[r0 * n + i] += nd.grad[i];
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  check_shape(!parts.empty(), "concat_rows: empty");
  int64_t n = parts[0]->val.dim(1);
  int64_t m = 0;
  for (const auto& p : parts) {
    check_shape(p->val.rank() == 2 && p->val.dim(1) == n, "concat_rows: width mismatch");
    m += p->val.dim(0);
  }
  Tensor out({m, n});
  int64_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p->val.data(), p->val.numel(), out.data() + off);
    off += p->val.numel();
  }
  return make_node(std::move(out), parts, [](Node& nd) {
    int64_t off = 0;
    for (auto& p : nd.parents) {
      int64_t cnt = p->val.numel();
      if (p->needs_grad) {
        Tensor& gp = p->grad_buf();
        for (int64_t i = 0; i < cnt; ++i) gp[i] += nd.grad[off + i];
      }
      off += cnt;
    }
  });
}

inline Var add_rowvec(const Var& a, const Var& b) {
  check_shape(a->val.rank() == 2 && b->val.numel() == a->val.dim(1),
              "add_rowvec: width mismatch");
  int64_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out = a->val;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] += b->val[j];
  return make_node(std::move(out), {a, b}, [m, n](Node& nd) {
    if (nd.parents[0]->needs_grad) {
      Tensor& gp = nd.parents[0]->grad_buf();
      for (int64_t i = 0; i < nd.grad.numel(); ++i) gp[i] += nd.grad[i];
    }
    if (nd.parents[1]->needs_grad) {
      Tensor& gp = nd.parents[1]->grad_buf();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) gp[j] += nd.grad[i * n + j];
    }
  });
}

inline Var mul_rowvec(const Var& a, const Var& b) {
  check_shape(a->val.rank() == 2 && b->val.numel() == a->val.dim(1),
              "mul_rowvec: width mismatch");
  int64_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out = a->val;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] *= b->val[j];
  return make_node(std::move(out), {a, b}, [m, n](Node& nd) {
    const Tensor& av = nd.parents[0]->val;
    const Tensor& bv = nd.parents[1]->val;
    if (nd.parents[0]->needs_grad) {
      Tensor& gp = nd.parents[0]->grad_buf();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) gp[i * n + j] += nd.grad[i * n + j] * bv[j];
    }
    if (nd.parents[1]->needs_grad) {
      Tensor& gp = nd.parents[1]->grad_buf();
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) gp[j] += nd.grad[i * n + j] * av[i * n + j];
    }
  });
}

// columns of a 1-element-per-row grad pattern: y[i,j] = pos[i] * freq[j]
inline Var outer_const(const Var& pos, const Tensor& freqs) {
  check_shape(pos->val.rank() == 1, "outer_const expects rank-1 positions");
  int64_t m = pos->val.dim(0), k = freqs.numel();
  Tensor out({m, k});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < k; ++j) out[i * k + j] = pos->val[i] * freqs[j];
  Tensor fc = freqs;
  return make_node(std::move(out), {pos}, [fc, m, k](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    Tensor& gp = nd.parents[0]->grad_buf();
    for (int64_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < k; ++j) acc += nd.grad[i * k + j] * fc[j];
      gp[i] += acc;
    }
  });
}

inline Var transpose2d(const Var& a) {
  check_shape(a->val.rank() == 2, "transpose2d expects rank-2");
  int64_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = a->val[i * n + j];
  return make_node(std::move(out), {a}, [m, n](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    Tensor& gp = nd.parents[0]->grad_buf();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) gp[i * n + j] += nd.grad[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// matmul  [m,k] x [k,n] -> [m,n]

namespace detail {

// C[i0:i1,:] += A[i0:i1,:] * B, 4-row blocked so each B row is reused
inline void mm_rows(const double* A, const double* B, double* C, int64_t i0, int64_t i1,
                    int64_t k, int64_t n) {
  int64_t i = i0;
  for (; i + 4 <= i1; i += 4) {
    double* c0 = C + (i + 0) * n;
    double* c1 = C + (i + 1) * n;
    double* c2 = C + (i + 2) * n;
    double* c3 = C + (i + 3) * n;
    for (int64_t l = 0; l < k; ++l) {
      const double* brow = B + l * n;
      double a0 = A[(i + 0) * k + l];
      double a1 = A[(i + 1) * k + l];
      double a2 = A[(i + 2) * k + l];
      double a3 = A[(i + 3) * k + l];
      for (int64_t j = 0; j < n; ++j) {
        double bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < i1; ++i) {
    double* crow = C + i * n;
    for (int64_t l = 0; l < k; ++l) {
      double av = A[i * k + l];
      const double* brow = B + l * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  check_shape(a->val.rank() == 2 && b->val.rank() == 2 && a->val.dim(1) == b->val.dim(0),
              "matmul: incompatible " + a->val.shape_str() + " x " + b->val.shape_str());
  int64_t m = a->val.dim(0), k = a->val.dim(1), n = b->val.dim(1);
  Tensor out({m, n});
  {
    const double* A = a->val.data();
    const double* B = b->val.data();
    double* C = out.data();
    parallel_for(m, [&](int64_t i0, int64_t i1) { detail::mm_rows(A, B, C, i0, i1, k, n); });
  }
  return make_node(std::move(out), {a, b}, [m, k, n](Node& nd) {
    const double* G = nd.grad.data();
    const double* A = nd.parents[0]->val.data();
    const double* B = nd.parents[1]->val.data();
    if (nd.parents[0]->needs_grad) {
      // dA = G * B^T: four G rows share each streamed B row
      double* GA = nd.parents[0]->grad_buf().data();
      parallel_for(m, [&](int64_t i0, int64_t i1) {
        int64_t i = i0;
        for (; i + 4 <= i1; i += 4) {
          const double* g0 = G + (i + 0) * n;
          const double* g1 = G + (i + 1) * n;
          const double* g2 = G + (i + 2) * n;
          const double* g3 = G + (i + 3) * n;
          for (int64_t l = 0; l < k; ++l) {
            const double* brow = B + l * n;
            double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            for (int64_t j = 0; j < n; ++j) {
              double bv = brow[j];
              s0 += g0[j] * bv;
              s1 += g1[j] * bv;
              s2 += g2[j] * bv;
              s3 += g3[j] * bv;
            }
            GA[(i + 0) * k + l] += s0;
            GA[(i + 1) * k + l] += s1;
            GA[(i + 2) * k + l] += s2;
            GA[(i + 3) * k + l] += s3;
          }
        }
        for (; i < i1; ++i)
          for (int64_t l = 0; l < k; ++l) {
            const double* grow = G + i * n;
            const double* brow = B + l * n;
            double acc = 0.0;
            for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            GA[i * k + l] += acc;
          }
      });
    }
    if (nd.parents[1]->needs_grad) {
      double* GB = nd.parents[1]->grad_buf().data();
      parallel_for(k, [&](int64_t l0, int64_t l1) {
        for (int64_t l = l0; l < l1; ++l) {
          double* gbrow = GB + l * n;
          for (int64_t i = 0; i < m; ++i) {
            double av = A[i * k + l];
            if (av == 0.0) continue;
            const double* grow = G + i * n;
            for (int64_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      });
    }
  });
}

// ---------------------------------------------------------------------------
// normalization / attention pieces

// Per-row standardization without affine: y = (x - mu) / sqrt(var + eps).
inline Var layer_norm(const Var& a, double eps = 1e-6) {
  check_shape(a->val.rank() == 2, "layer_norm expects rank-2");
  int64_t m = a->val.dim(0), n = a->val.dim(1);
  Tensor out({m, n});
  Tensor inv({m});
  for (int64_t i = 0; i < m; ++i) {
    const double* x = a->val.data() + i * n;
    double mu = 0.0;
    for (int64_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    double iv = 1.0 / std::sqrt(var + eps);
    inv[i] = iv;
    double* y = out.data() + i * n;
    for (int64_t j = 0; j < n; ++j) y[j] = (x[j] - mu) * iv;
  }
  Tensor saved_y = out;
  return make_node(std::move(out), {a}, [m, n, inv, saved_y](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    Tensor& gp = nd.parents[0]->grad_buf();
    for (int64_t i = 0; i < m; ++i) {
      const double* gy = nd.grad.data() + i * n;
      const double* y = saved_y.data() + i * n;
      double mg = 0.0, mgy = 0.0;
      for (int64_t j = 0; j < n; ++j) {
        mg += gy[j];
        mgy += gy[j] * y[j];
      }
      mg /= static_cast<double>(n);
      mgy /= static_cast<double>(n);
      double* gx = gp.data() + i * n;
      for (int64_t j = 0; j < n; ++j)
        gx[j] += inv[i] * (gy[j] - mg - y[j] * mgy);
    }
  });
}

// Row softmax with an optional additive mask (-inf entries are excluded and
// contribute exact zeros, so appending fully-masked columns leaves the other
// outputs bit-identical).
inline Var softmax_rows(const Var& a, const Tensor* mask = nullptr) {
  check_shape(a->val.rank() == 2, "softmax_rows expects rank-2");
  int64_t m = a->val.dim(0), n = a->val.dim(1);
  if (mask) check_shape(mask->same_shape(a->val), "softmax mask shape mismatch");
  Tensor out({m, n});
  for (int64_t i = 0; i < m; ++i) {
    const double* x = a->val.data() + i * n;
    const double* mk = mask ? mask->data() + i * n : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j) {
      double xv = mk ? x[j] + mk[j] : x[j];
      if (xv > mx) mx = xv;
    }
    double* y = out.data() + i * n;
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      double xv = mk ? x[j] + mk[j] : x[j];
      double e = std::isinf(xv) && xv < 0 ? 0.0 : std::exp(xv - mx);
      y[j] = e;
      denom += e;
    }
    check(denom > 0.0, "softmax row fully masked");
    for (int64_t j = 0; j < n; ++j) y[j] /= denom;
  }
  Tensor saved_y = out;
  return make_node(std::move(out), {a}, [m, n, saved_y](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    Tensor& gp = nd.parents[0]->grad_buf();
    for (int64_t i = 0; i < m; ++i) {
      const double* gy = nd.grad.data() + i * n;
      const double* y = saved_y.data() + i * n;
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += gy[j] * y[j];
      double* gx = gp.data() + i * n;
      for (int64_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - s);
    }
  });
}

// Rotary embedding: consecutive pairs (x[2i], x[2i+1]) of each row rotated by
// angles[row, i]. Differentiable in both the tokens and the angles.
inline Var rope_rotate(const Var& x, const Var& angles) {
  check_shape(x->val.rank() == 2 && angles->val.rank() == 2 &&
                  x->val.dim(0) == angles->val.dim(0) &&
                  x->val.dim(1) == 2 * angles->val.dim(1),
              "rope_rotate: token width must be 2x angle count");
  int64_t m = x->val.dim(0), hp = angles->val.dim(1);
  Tensor out({m, 2 * hp});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < hp; ++p) {
      double th = angles->val[i * hp + p];
      double c = std::cos(th), s = std::sin(th);
      double a = x->val[i * 2 * hp + 2 * p];
      double b = x->val[i * 2 * hp + 2 * p + 1];
      out[i * 2 * hp + 2 * p] = a * c - b * s;
      out[i * 2 * hp + 2 * p + 1] = a * s + b * c;
    }
  Tensor saved_y = out;
  return make_node(std::move(out), {x, angles}, [m, hp, saved_y](Node& nd) {
    const Tensor& ang = nd.parents[1]->val;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t p = 0; p < hp; ++p) {
        double th = ang[i * hp + p];
        double c = std::cos(th), s = std::sin(th);
        double g1 = nd.grad[i * 2 * hp + 2 * p];
        double g2 = nd.grad[i * 2 * hp + 2 * p + 1];
        if (nd.parents[0]->needs_grad) {
          Tensor& gx = nd.parents[0]->grad_buf();
          gx[i * 2 * hp + 2 * p] += g1 * c + g2 * s;
          gx[i * 2 * hp + 2 * p + 1] += -g1 * s + g2 * c;
        }
        if (nd.parents[1]->needs_grad) {
          double y1 = saved_y[i * 2 * hp + 2 * p];
          double y2 = saved_y[i * 2 * hp + 2 * p + 1];
          nd.parents[1]->grad_buf()[i * hp + p] += g2 * y1 - g1 * y2;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// conv3d and resampling (channel-last: [T, H, W, C])

struct Conv3dSpec {
  std::array<int64_t, 3> kernel{3, 3, 3};
  std::array<int64_t, 3> stride{1, 1, 1};
  std::array<int64_t, 3> pad{1, 1, 1};
};

inline Var conv3d(const Var& x, const Var& w, const Var& b, const Conv3dSpec& sp) {
  check_shape(x->val.rank() == 4, "conv3d input must be [T,H,W,C]");
  check_shape(w->val.rank() == 5, "conv3d weight must be [kt,kh,kw,Ci,Co]");
  const int64_t T = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), Ci = x->val.dim(3);
  const int64_t kt = w->val.dim(0), kh = w->val.dim(1), kw = w->val.dim(2);
  check_shape(w->val.dim(3) == Ci, "conv3d: channel mismatch");
  const int64_t Co = w->val.dim(4);
  check_shape(b->val.numel() == Co, "conv3d: bias size mismatch");
  const auto [st, sh, sw] = sp.stride;
  const auto [pt, ph, pw] = sp.pad;
  const int64_t To = (T + 2 * pt - kt) / st + 1;
  const int64_t Ho = (H + 2 * ph - kh) / sh + 1;
  const int64_t Wo = (W + 2 * pw - kw) / sw + 1;
  check_shape(To > 0 && Ho > 0 && Wo > 0, "conv3d: empty output");

  Tensor out({To, Ho, Wo, Co});
  {
    const double* X = x->val.data();
    const double* Wt = w->val.data();
    const double* B = b->val.data();
    double* O = out.data();
    parallel_for(To * Ho, [&](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        int64_t to = r / Ho, ho = r % Ho;
        for (int64_t wo = 0; wo < Wo; ++wo) {
          double* orow = O + ((to * Ho + ho) * Wo + wo) * Co;
          for (int64_t co = 0; co < Co; ++co) orow[co] = B[co];
          for (int64_t i = 0; i < kt; ++i) {
            int64_t ti = to * st + i - pt;
            if (ti < 0 || ti >= T) continue;
            for (int64_t j = 0; j < kh; ++j) {
              int64_t hi = ho * sh + j - ph;
              if (hi < 0 || hi >= H) continue;
              for (int64_t l = 0; l < kw; ++l) {
                int64_t wi = wo * sw + l - pw;
                if (wi < 0 || wi >= W) continue;
                const double* xrow = X + ((ti * H + hi) * W + wi) * Ci;
                const double* wrow = Wt + (((i * kh + j) * kw + l) * Ci) * Co;
                for (int64_t ci = 0; ci < Ci; ++ci) {
                  double xv = xrow[ci];
                  const double* wr = wrow + ci * Co;
                  for (int64_t co = 0; co < Co; ++co) orow[co] += xv * wr[co];
                }
              }
            }
          }
        }
      }
    });
  }

  auto spc = sp;
  return make_node(std::move(out), {x, w, b},
                   [T, H, W, Ci, kt, kh, kw, Co, To, Ho, Wo, spc](Node& nd) {
    const auto [st, sh, sw] = spc.stride;
    const auto [pt, ph, pw] = spc.pad;
    const double* G = nd.grad.data();
    const double* X = nd.parents[0]->val.data();
    const double* Wt = nd.parents[1]->val.data();

    if (nd.parents[0]->needs_grad) {
      double* GX = nd.parents[0]->grad_buf().data();
      parallel_for(T * H, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
          int64_t ti = r / H, hi = r % H;
          for (int64_t wi = 0; wi < W; ++wi) {
            double* gxrow = GX + ((ti * H + hi) * W + wi) * Ci;
            for (int64_t i = 0; i < kt; ++i) {
              int64_t num_t = ti + pt - i;
              if (num_t < 0 || num_t % st) continue;
              int64_t to = num_t / st;
              if (to >= To) continue;
              for (int64_t j = 0; j < kh; ++j) {
                int64_t num_h = hi + ph - j;
                if (num_h < 0 || num_h % sh) continue;
                int64_t ho = num_h / sh;
                if (ho >= Ho) continue;
                for (int64_t l = 0; l < kw; ++l) {
                  int64_t num_w = wi + pw - l;
                  if (num_w < 0 || num_w % sw) continue;
                  int64_t wo = num_w / sw;
                  if (wo >= Wo) continue;
                  const double* grow = G + ((to * Ho + ho) * Wo + wo) * Co;
                  const double* wrow = Wt + (((i * kh + j) * kw + l) * Ci) * Co;
                  for (int64_t ci = 0; ci < Ci; ++ci) {
                    const double* wr = wrow + ci * Co;
                    double acc = 0.0;
                    for (int64_t co = 0; co < Co; ++co) acc += grow[co] * wr[co];
                    gxrow[ci] += acc;
                  }
                }
              }
            }
          }
        }
      });
    }

    if (nd.parents[1]->needs_grad) {
      double* GW = nd.parents[1]->grad_buf().data();
      // one thread owns a (kt,kh,kw,ci) slice, so accumulation is ordered
      parallel_for(kt * kh * kw * Ci, [&](int64_t s0, int64_t s1) {
        for (int64_t s = s0; s < s1; ++s) {
          int64_t ci = s % Ci;
          int64_t rem = s / Ci;
          int64_t l = rem % kw;
          rem /= kw;
          int64_t j = rem % kh;
          int64_t i = rem / kh;
          double* gwrow = GW + s * Co;
          for (int64_t to = 0; to < To; ++to) {
            int64_t ti = to * st + i - pt;
            if (ti < 0 || ti >= T) continue;
            for (int64_t ho = 0; ho < Ho; ++ho) {
              int64_t hi = ho * sh + j - ph;
              if (hi < 0 || hi >= H) continue;
              for (int64_t wo = 0; wo < Wo; ++wo) {
                int64_t wi = wo * sw + l - pw;
                if (wi < 0 || wi >= W) continue;
                double xv = X[((ti * H + hi) * W + wi) * Ci + ci];
                if (xv == 0.0) continue;
                const double* grow = G + ((to * Ho + ho) * Wo + wo) * Co;
                for (int64_t co = 0; co < Co; ++co) gwrow[co] += xv * grow[co];
              }
            }
          }
        }
      });
    }

    if (nd.parents[2]->needs_grad) {
      double* GB = nd.parents[2]->grad_buf().data();
      int64_t cells = To * Ho * Wo;
      for (int64_t c = 0; c < cells; ++c) {
        const double* grow = G + c * Co;
        for (int64_t co = 0; co < Co; ++co) GB[co] += grow[co];
      }
    }
  });
}

// [T,H,W,C] -> [2T-1,H,W,C]; odd frames are midpoints of their neighbours.
inline Var upsample_time_linear(const Var& x) {
  check_shape(x->val.rank() == 4, "upsample_time_linear expects [T,H,W,C]");
  int64_t T = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), C = x->val.dim(3);
  int64_t To = 2 * T - 1;
  int64_t fsz = H * W * C;
  Tensor out({To, H, W, C});
  for (int64_t t = 0; t < T; ++t)
    std::copy_n(x->val.data() + t * fsz, fsz, out.data() + (2 * t) * fsz);
  for (int64_t t = 0; t + 1 < T; ++t) {
    const double* a = x->val.data() + t * fsz;
    const double* b = x->val.data() + (t + 1) * fsz;
    double* o = out.data() + (2 * t + 1) * fsz;
    for (int64_t i = 0; i < fsz; ++i) o[i] = 0.5 * (a[i] + b[i]);
  }
  return make_node(std::move(out), {x}, [T, fsz](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    double* gx = nd.parents[0]->grad_buf().data();
    const double* g = nd.grad.data();
    for (int64_t t = 0; t < T; ++t) {
      double* gr = gx + t * fsz;
      const double* ge = g + (2 * t) * fsz;
      for (int64_t i = 0; i < fsz; ++i) gr[i] += ge[i];
      if (t > 0) {
        const double* gm = g + (2 * t - 1) * fsz;
        for (int64_t i = 0; i < fsz; ++i) gr[i] += 0.5 * gm[i];
      }
      if (t + 1 < T) {
        const double* gm = g + (2 * t + 1) * fsz;
        for (int64_t i = 0; i < fsz; ++i) gr[i] += 0.5 * gm[i];
      }
    }
  });
}

// [T,H,W,C] -> [T,2H,2W,C] bilinear (half-pixel centers, clamped borders).
inline Var upsample_space_bilinear2(const Var& x) {
  check_shape(x->val.rank() == 4, "upsample_space_bilinear2 expects [T,H,W,C]");
  int64_t T = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), C = x->val.dim(3);
  int64_t Ho = 2 * H, Wo = 2 * W;

  struct Tap {
    int64_t i0, i1;
    double w0, w1;
  };
  auto taps = [](int64_t out, int64_t n) {
    double src = (static_cast<double>(out) + 0.5) * 0.5 - 0.5;
    double f = std::floor(src);
    int64_t i0 = static_cast<int64_t>(f);
    double a = src - f;
    Tap t;
    t.i0 = std::clamp<int64_t>(i0, 0, n - 1);
    t.i1 = std::clamp<int64_t>(i0 + 1, 0, n - 1);
    t.w0 = 1.0 - a;
    t.w1 = a;
    return t;
  };
  std::vector<Tap> ty(static_cast<size_t>(Ho)), tx(static_cast<size_t>(Wo));
  for (int64_t y = 0; y < Ho; ++y) ty[static_cast<size_t>(y)] = taps(y, H);
  for (int64_t xo = 0; xo < Wo; ++xo) tx[static_cast<size_t>(xo)] = taps(xo, W);

  Tensor out({T, Ho, Wo, C});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t y = 0; y < Ho; ++y) {
      const Tap& a = ty[static_cast<size_t>(y)];
      for (int64_t xo = 0; xo < Wo; ++xo) {
        const Tap& b = tx[static_cast<size_t>(xo)];
        const double* s00 = x->val.data() + ((t * H + a.i0) * W + b.i0) * C;
        const double* s01 = x->val.data() + ((t * H + a.i0) * W + b.i1) * C;
        const double* s10 = x->val.data() + ((t * H + a.i1) * W + b.i0) * C;
        const double* s11 = x->val.data() + ((t * H + a.i1) * W + b.i1) * C;
        double* d = out.data() + ((t * Ho + y) * Wo + xo) * C;
        for (int64_t c = 0; c < C; ++c)
          d[c] = a.w0 * (b.w0 * s00[c] + b.w1 * s01[c]) +
                 a.w1 * (b.w0 * s10[c] + b.w1 * s11[c]);
      }
    }
  return make_node(std::move(out), {x}, [T, H, W, C, Ho, Wo, ty, tx](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    double* gx = nd.parents[0]->grad_buf().data();
    const double* g = nd.grad.data();
    for (int64_t t = 0; t < T; ++t)
      for (int64_t y = 0; y < Ho; ++y) {
        const Tap& a = ty[static_cast<size_t>(y)];
        for (int64_t xo = 0; xo < Wo; ++xo) {
          const Tap& b = tx[static_cast<size_t>(xo)];
          const double* gr = g + ((t * Ho + y) * Wo + xo) * C;
          double* d00 = gx + ((t * H + a.i0) * W + b.i0) * C;
          double* d01 = gx + ((t * H + a.i0) * W + b.i1) * C;
          double* d10 = gx + ((t * H + a.i1) * W + b.i0) * C;
          double* d11 = gx + ((t * H + a.i1) * W + b.i1) * C;
          for (int64_t c = 0; c < C; ++c) {
            d00[c] += a.w0 * b.w0 * gr[c];
            d01[c] += a.w0 * b.w1 * gr[c];
            d10[c] += a.w1 * b.w0 * gr[c];
            d11[c] += a.w1 * b.w1 * gr[c];
          }
        }
      }
  });
}

// [T,H,W,C] -> [T,2H,2W,C] nearest neighbour.
inline Var upsample_space_nearest2(const Var& x) {
  check_shape(x->val.rank() == 4, "upsample_space_nearest2 expects [T,H,W,C]");
  int64_t T = x->val.dim(0), H = x->val.dim(1), W = x->val.dim(2), C = x->val.dim(3);
  Tensor out({T, 2 * H, 2 * W, C});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t h = 0; h < 2 * H; ++h)
      for (int64_t w = 0; w < 2 * W; ++w) {
        const double* s = x->val.data() + ((t * H + h / 2) * W + w / 2) * C;
        double* d = out.data() + ((t * 2 * H + h) * 2 * W + w) * C;
        std::copy_n(s, C, d);
      }
  return make_node(std::move(out), {x}, [T, H, W, C](Node& nd) {
    if (!nd.parents[0]->needs_grad) return;
    double* gx = nd.parents[0]->grad_buf().data();
    const double* g = nd.grad.data();
    for (int64_t t = 0; t < T; ++t)
      for (int64_t h = 0; h < 2 * H; ++h)
        for (int64_t w = 0; w < 2 * W; ++w) {
          double* d = gx + ((t * H + h / 2) * W + w / 2) * C;
          const double* s = g + ((t * 2 * H + h) * 2 * W + w) * C;
          for (int64_t c = 0; c < C; ++c) d[c] += s[c];
        }
  });
}

// ---------------------------------------------------------------------------
// backward

inline void backward(const Var& root) {
  check(root->val.numel() == 1, "backward root must be scalar");
  if (!root->needs_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx].get();
      ++idx;
      if (p->needs_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buf()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->back && n->grad_alloc) n->back(*n);
  }
}

}  // namespace uvp::ad
