#include <algorithm>
#include <cmath>
#include <numbers>

#include "rrlm/rng.hpp"
#include "rrlm/tensor.hpp"

namespace rrlm {

Tensor make_op_output(Shape shape, std::vector<double> data, bool requires_grad);

namespace {

bool propagate_grad(std::initializer_list<const Tensor*> ins) {
  for (auto* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// id for an input that participates in backward, or -1 when it needs none.
int maybe_id(Tape* tape, const Tensor& t) {
  return t.requires_grad() ? tape->node_id(t.impl_ptr()) : -1;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension, std::string(op) + ": shape mismatch " +
                                   shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// ---- matmul kernels (row-major, accumulate) ----

void mm_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* c = C + static_cast<size_t>(i) * n;
    const double* a = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = a[p];
      const double* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// dA += G * B^T
void mm_nt_acc(const double* G, const double* B, double* dA, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* g = G + static_cast<size_t>(i) * n;
    double* da = dA + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* b = B + static_cast<size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += g[j] * b[j];
      da[p] += acc;
    }
  }
}

// dB += A^T * G
void mm_tn_acc(const double* A, const double* G, double* dB, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<size_t>(i) * k;
    const double* g = G + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = a[p];
      double* db = dB + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) db[j] += av * g[j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] += b.data()[static_cast<size_t>(i)];
  Tensor y = make_op_output(a.shape(), std::move(out), propagate_grad({&a, &b}));
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int aid = maybe_id(tape, a);
    const int bid = maybe_id(tape, b);
    tape->record([oid, aid, bid](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      if (aid >= 0) {
        auto& ga = t.adjoint(aid);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bid >= 0) {
        auto& gb = t.adjoint(bid);
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] -= b.data()[static_cast<size_t>(i)];
  Tensor y = make_op_output(a.shape(), std::move(out), propagate_grad({&a, &b}));
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int aid = maybe_id(tape, a);
    const int bid = maybe_id(tape, b);
    tape->record([oid, aid, bid](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      if (aid >= 0) {
        auto& ga = t.adjoint(aid);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (bid >= 0) {
        auto& gb = t.adjoint(bid);
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) {
    out[static_cast<size_t>(i)] = a.data()[static_cast<size_t>(i)] * b.data()[static_cast<size_t>(i)];
  }
  Tensor y = make_op_output(a.shape(), std::move(out), propagate_grad({&a, &b}));
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int aid = maybe_id(tape, a);
    const int bid = maybe_id(tape, b);
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    tape->record([oid, aid, bid, ai, bi](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      if (aid >= 0) {
        auto& ga = t.adjoint(aid);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bi->data[i];
      }
      if (bid >= 0) {
        auto& gb = t.adjoint(bid);
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ai->data[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(static_cast<size_t>(a.size()));
  for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] = a.data()[static_cast<size_t>(i)] * c;
  Tensor y = make_op_output(a.shape(), std::move(out), a.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int aid = tape->node_id(a.impl_ptr());
    tape->record([oid, aid, c](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& ga = t.adjoint(aid);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }
  return y;
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += c;
  Tensor y = make_op_output(a.shape(), std::move(out), a.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int aid = tape->node_id(a.impl_ptr());
    tape->record([oid, aid](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& ga = t.adjoint(aid);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorKind::Dimension, "matmul: incompatible shapes " + shape_str(a.shape()) +
                                   " x " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  Tensor y = make_op_output({m, n}, std::move(out), propagate_grad({&a, &b}));
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int aid = maybe_id(tape, a);
    const int bid = maybe_id(tape, b);
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    tape->record([oid, aid, bid, ai, bi, m, k, n](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      if (aid >= 0) {
        mm_nt_acc(go.data(), bi->data.data(), t.adjoint(aid).data(), m, n, k);
      }
      if (bid >= 0) {
        mm_tn_acc(ai->data.data(), go.data(), t.adjoint(bid).data(), m, k, n);
      }
    });
  }
  return y;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) fail(ErrorKind::Rank, "transpose2d: rank-2 tensor required");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    }
  }
  Tensor y = make_op_output({n, m}, std::move(out), a.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int aid = tape->node_id(a.impl_ptr());
    tape->record([oid, aid, m, n](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& ga = t.adjoint(aid);
      for (int j = 0; j < n; ++j) {
        for (int i = 0; i < m; ++i) {
          ga[static_cast<size_t>(i) * n + j] += go[static_cast<size_t>(j) * m + i];
        }
      }
    });
  }
  return y;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0)) {
    fail(ErrorKind::Dimension, "add_rowvec: shapes " + shape_str(x.shape()) + " + " +
                                   shape_str(v.shape()));
  }
  const int n = x.dim(0), d = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += v.data()[static_cast<size_t>(j)];
  }
  Tensor y = make_op_output(x.shape(), std::move(out), propagate_grad({&x, &v}));
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = maybe_id(tape, x);
    const int vid = maybe_id(tape, v);
    tape->record([oid, xid, vid, n, d](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      if (xid >= 0) {
        auto& gx = t.adjoint(xid);
        for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (vid >= 0) {
        auto& gv = t.adjoint(vid);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < d; ++j) gv[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * d + j];
        }
      }
    });
  }
  return y;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) fail(ErrorKind::Rank, "gather_rows: rank-2 table required");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) {
      fail(ErrorKind::Index, "gather_rows: row index " + std::to_string(id) +
                                 " out of range [0," + std::to_string(v) + ")");
    }
  }
  const int n = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    const double* src = table.data().data() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d;
    std::copy(src, src + d, out.begin() + static_cast<size_t>(i) * d);
  }
  Tensor y = make_op_output({n, d}, std::move(out), table.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int tid = tape->node_id(table.impl_ptr());
    tape->record([oid, tid, ids, d](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gt = t.adjoint(tid);
      for (size_t i = 0; i < ids.size(); ++i) {
        double* dst = gt.data() + static_cast<size_t>(ids[i]) * d;
        const double* src = go.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return y;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (x.rank() != 2) fail(ErrorKind::Rank, "slice_cols: rank-2 tensor required");
  const int n = x.dim(0), d = x.dim(1);
  if (c0 < 0 || c1 > d || c0 >= c1) fail(ErrorKind::Index, "slice_cols: bad column range");
  const int w = c1 - c0;
  std::vector<double> out(static_cast<size_t>(n) * w);
  for (int i = 0; i < n; ++i) {
    const double* src = x.data().data() + static_cast<size_t>(i) * d + c0;
    std::copy(src, src + w, out.begin() + static_cast<size_t>(i) * w);
  }
  Tensor y = make_op_output({n, w}, std::move(out), x.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = tape->node_id(x.impl_ptr());
    tape->record([oid, xid, n, d, c0, w](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gx = t.adjoint(xid);
      for (int i = 0; i < n; ++i) {
        double* dst = gx.data() + static_cast<size_t>(i) * d + c0;
        const double* src = go.data() + static_cast<size_t>(i) * w;
        for (int j = 0; j < w; ++j) dst[j] += src[j];
      }
    });
  }
  return y;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::InvalidArgument, "concat_cols: no inputs");
  const int n = parts[0].dim(0);
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != n) {
      fail(ErrorKind::Dimension, "concat_cols: row counts differ");
    }
    total += p.dim(1);
    rg = rg || p.requires_grad();
  }
  std::vector<double> out(static_cast<size_t>(n) * total);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < n; ++i) {
      const double* src = p.data().data() + static_cast<size_t>(i) * w;
      std::copy(src, src + w, out.begin() + static_cast<size_t>(i) * total + off);
    }
    off += w;
  }
  Tensor y = make_op_output({n, total}, std::move(out), rg);
  if (Tape* tape = Tape::active(); tape && rg) {
    const int oid = tape->node_id(y.impl_ptr());
    struct Piece {
      int id;
      int off;
      int w;
    };
    std::vector<Piece> pieces;
    off = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) pieces.push_back({tape->node_id(p.impl_ptr()), off, p.dim(1)});
      off += p.dim(1);
    }
    tape->record([oid, pieces, n, total](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      for (const auto& pc : pieces) {
        auto& gp = t.adjoint(pc.id);
        for (int i = 0; i < n; ++i) {
          const double* src = go.data() + static_cast<size_t>(i) * total + pc.off;
          double* dst = gp.data() + static_cast<size_t>(i) * pc.w;
          for (int j = 0; j < pc.w; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return y;
}

Tensor stack(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrorKind::InvalidArgument, "stack: no inputs");
  const Shape& inner = parts[0].shape();
  bool rg = false;
  for (const auto& p : parts) {
    if (p.shape() != inner) fail(ErrorKind::Dimension, "stack: member shapes differ");
    rg = rg || p.requires_grad();
  }
  const int n = static_cast<int>(parts.size());
  const int64_t block = numel(inner);
  Shape shape;
  shape.push_back(n);
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<double> out(static_cast<size_t>(n) * static_cast<size_t>(block));
  for (int i = 0; i < n; ++i) {
    std::copy(parts[static_cast<size_t>(i)].data().begin(), parts[static_cast<size_t>(i)].data().end(),
              out.begin() + static_cast<size_t>(i) * static_cast<size_t>(block));
  }
  Tensor y = make_op_output(std::move(shape), std::move(out), rg);
  if (Tape* tape = Tape::active(); tape && rg) {
    const int oid = tape->node_id(y.impl_ptr());
    std::vector<std::pair<int, int>> members;  // (slot, node id)
    for (int i = 0; i < n; ++i) {
      if (parts[static_cast<size_t>(i)].requires_grad()) {
        members.emplace_back(i, tape->node_id(parts[static_cast<size_t>(i)].impl_ptr()));
      }
    }
    tape->record([oid, members, block](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      for (auto [slot, id] : members) {
        auto& gp = t.adjoint(id);
        const double* src = go.data() + static_cast<size_t>(slot) * static_cast<size_t>(block);
        for (int64_t j = 0; j < block; ++j) gp[static_cast<size_t>(j)] += src[j];
      }
    });
  }
  return y;
}

Tensor index_axis0(const Tensor& x, int i) {
  if (x.rank() < 2) fail(ErrorKind::Rank, "index_axis0: rank >= 2 required");
  const int n = x.dim(0);
  if (i < 0 || i >= n) fail(ErrorKind::Index, "index_axis0: index out of range");
  Shape inner(x.shape().begin() + 1, x.shape().end());
  const int64_t block = numel(inner);
  std::vector<double> out(x.data().begin() + static_cast<size_t>(i) * static_cast<size_t>(block),
                          x.data().begin() + static_cast<size_t>(i + 1) * static_cast<size_t>(block));
  Tensor y = make_op_output(std::move(inner), std::move(out), x.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = tape->node_id(x.impl_ptr());
    tape->record([oid, xid, i, block](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gx = t.adjoint(xid);
      double* dst = gx.data() + static_cast<size_t>(i) * static_cast<size_t>(block);
      for (int64_t j = 0; j < block; ++j) dst[j] += go[static_cast<size_t>(j)];
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    fail(ErrorKind::Dimension, "reshape: cannot view " + shape_str(x.shape()) + " as " +
                                   shape_str(new_shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  Tensor y = make_op_output(std::move(new_shape), std::move(out), x.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = tape->node_id(x.impl_ptr());
    tape->record([oid, xid](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gx = t.adjoint(xid);
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y = make_op_output({1}, {acc}, x.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = tape->node_id(x.impl_ptr());
    tape->record([oid, xid](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const double g = t.adjoint(oid)[0];
      auto& gx = t.adjoint(xid);
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  const size_t n = static_cast<size_t>(x.size());
  std::vector<double> out(n);
  constexpr double inv_sqrt2 = std::numbers::sqrt2 / 2.0;
  for (size_t i = 0; i < n; ++i) {
    const double v = x.data()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  Tensor y = make_op_output(x.shape(), std::move(out), x.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = tape->node_id(x.impl_ptr());
    auto xi = x.impl_ptr();
    tape->record([oid, xid, xi](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gx = t.adjoint(xid);
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      constexpr double is2 = std::numbers::sqrt2 / 2.0;
      for (size_t i = 0; i < go.size(); ++i) {
        const double v = xi->data[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * is2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        gx[i] += go[i] * (cdf + v * pdf);
      }
    });
  }
  return y;
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) {
    fail(ErrorKind::Dimension, "softmax: axis " + std::to_string(axis) +
                                   " invalid for shape " + shape_str(x.shape()));
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  const int mid = x.dim(axis);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  std::vector<double> out(static_cast<size_t>(x.size()));
  const double* src = x.data().data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * mid * inner + in;
      double mx = src[base];
      for (int j = 1; j < mid; ++j) mx = std::max(mx, src[base + j * inner]);
      double denom = 0.0;
      for (int j = 0; j < mid; ++j) {
        const double e = std::exp(src[base + j * inner] - mx);
        out[static_cast<size_t>(base + j * inner)] = e;
        denom += e;
      }
      for (int j = 0; j < mid; ++j) out[static_cast<size_t>(base + j * inner)] /= denom;
    }
  }
  Tensor y = make_op_output(x.shape(), std::move(out), x.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = tape->node_id(x.impl_ptr());
    auto yi = y.impl_ptr();
    tape->record([oid, xid, yi, outer, mid, inner](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gx = t.adjoint(xid);
      const auto& s = yi->data;
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
          const int64_t base = o * mid * inner + in;
          double dot = 0.0;
          for (int j = 0; j < mid; ++j) {
            const size_t idx = static_cast<size_t>(base + j * inner);
            dot += go[idx] * s[idx];
          }
          for (int j = 0; j < mid; ++j) {
            const size_t idx = static_cast<size_t>(base + j * inner);
            gx[idx] += s[idx] * (go[idx] - dot);
          }
        }
      }
    });
  }
  return y;
}

Tensor causal_softmax(const Tensor& scores) {
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1)) {
    fail(ErrorKind::Dimension, "causal_softmax: square matrix required, got " +
                                   shape_str(scores.shape()));
  }
  const int t_len = scores.dim(0);
  std::vector<double> out(static_cast<size_t>(t_len) * t_len, 0.0);
  const double* src = scores.data().data();
  for (int i = 0; i < t_len; ++i) {
    const double* row = src + static_cast<size_t>(i) * t_len;
    double mx = row[0];
    for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    double* dst = out.data() + static_cast<size_t>(i) * t_len;
    for (int j = 0; j <= i; ++j) {
      dst[j] = std::exp(row[j] - mx);
      denom += dst[j];
    }
    for (int j = 0; j <= i; ++j) dst[j] /= denom;
  }
  Tensor y = make_op_output(scores.shape(), std::move(out), scores.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = tape->node_id(scores.impl_ptr());
    auto yi = y.impl_ptr();
    tape->record([oid, xid, yi, t_len](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gx = t.adjoint(xid);
      const auto& s = yi->data;
      for (int i = 0; i < t_len; ++i) {
        const size_t base = static_cast<size_t>(i) * t_len;
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) dot += go[base + j] * s[base + j];
        for (int j = 0; j <= i; ++j) {
          gx[base + j] += s[base + j] * (go[base + j] - dot);
        }
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() != 2) fail(ErrorKind::Rank, "layer_norm: rank-2 input required");
  const int n = x.dim(0), d = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d) {
    fail(ErrorKind::Dimension, "layer_norm: gain/bias must be length " + std::to_string(d));
  }
  std::vector<double> out(static_cast<size_t>(n) * d);
  std::vector<double> xhat(static_cast<size_t>(n) * d);
  std::vector<double> inv_std(static_cast<size_t>(n));
  const double* src = x.data().data();
  for (int i = 0; i < n; ++i) {
    const double* row = src + static_cast<size_t>(i) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * is;
      xhat[static_cast<size_t>(i) * d + j] = h;
      out[static_cast<size_t>(i) * d + j] = h * gain.data()[static_cast<size_t>(j)] + bias.data()[static_cast<size_t>(j)];
    }
  }
  Tensor y = make_op_output(x.shape(), std::move(out), propagate_grad({&x, &gain, &bias}));
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = maybe_id(tape, x);
    const int gid = maybe_id(tape, gain);
    const int bid = maybe_id(tape, bias);
    auto gi = gain.impl_ptr();
    tape->record([oid, xid, gid, bid, gi, xh = std::move(xhat), is = std::move(inv_std), n, d](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      if (gid >= 0) {
        auto& gg = t.adjoint(gid);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < d; ++j) {
            gg[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * d + j] * xh[static_cast<size_t>(i) * d + j];
          }
        }
      }
      if (bid >= 0) {
        auto& gb = t.adjoint(bid);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(i) * d + j];
        }
      }
      if (xid >= 0) {
        auto& gx = t.adjoint(xid);
        for (int i = 0; i < n; ++i) {
          const size_t base = static_cast<size_t>(i) * d;
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double gj = go[base + j] * gi->data[static_cast<size_t>(j)];
            m1 += gj;
            m2 += gj * xh[base + j];
          }
          m1 /= d;
          m2 /= d;
          for (int j = 0; j < d; ++j) {
            const double gj = go[base + j] * gi->data[static_cast<size_t>(j)];
            gx[base + j] += (gj - m1 - xh[base + j] * m2) * is[static_cast<size_t>(i)];
          }
        }
      }
    });
  }
  return y;
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets,
                            std::optional<int> ignore_index) {
  if (logits.rank() != 2) fail(ErrorKind::Rank, "cross_entropy_logits: rank-2 logits required");
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n) {
    fail(ErrorKind::Dimension, "cross_entropy_logits: " + std::to_string(targets.size()) +
                                   " targets for " + std::to_string(n) + " rows");
  }
  std::vector<double> probs(static_cast<size_t>(n) * v, 0.0);
  double loss = 0.0;
  int valid = 0;
  const double* src = logits.data().data();
  for (int i = 0; i < n; ++i) {
    const int tgt = targets[static_cast<size_t>(i)];
    if (ignore_index && tgt == *ignore_index) continue;
    if (tgt < 0 || tgt >= v) {
      fail(ErrorKind::Index, "cross_entropy_logits: target " + std::to_string(tgt) +
                                 " out of range [0," + std::to_string(v) + ")");
    }
    const double* row = src + static_cast<size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    double* p = probs.data() + static_cast<size_t>(i) * v;
    for (int j = 0; j < v; ++j) {
      p[j] = std::exp(row[j] - mx);
      denom += p[j];
    }
    for (int j = 0; j < v; ++j) p[j] /= denom;
    loss += std::log(denom) + mx - row[tgt];
    ++valid;
  }
  if (valid == 0) fail(ErrorKind::InvalidArgument, "cross_entropy_logits: all targets ignored");
  loss /= valid;
  Tensor y = make_op_output({1}, {loss}, logits.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int lid = tape->node_id(logits.impl_ptr());
    tape->record([oid, lid, probs = std::move(probs), targets, ignore_index, n, v, valid](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const double g = t.adjoint(oid)[0] / valid;
      auto& gl = t.adjoint(lid);
      for (int i = 0; i < n; ++i) {
        const int tgt = targets[static_cast<size_t>(i)];
        if (ignore_index && tgt == *ignore_index) continue;
        const double* p = probs.data() + static_cast<size_t>(i) * v;
        double* dst = gl.data() + static_cast<size_t>(i) * v;
        for (int j = 0; j < v; ++j) dst[j] += g * p[j];
        dst[tgt] -= g;
      }
    });
  }
  return y;
}

Tensor pool_time(const Tensor& x, const std::vector<uint8_t>& mask, PoolMode mode) {
  if (x.rank() != 2) fail(ErrorKind::Rank, "pool_time: rank-2 input required");
  const int t_len = x.dim(0), d = x.dim(1);
  if (static_cast<int>(mask.size()) != t_len) {
    fail(ErrorKind::Dimension, "pool_time: mask length " + std::to_string(mask.size()) +
                                   " for " + std::to_string(t_len) + " steps");
  }
  int count = 0;
  for (uint8_t m : mask) count += m ? 1 : 0;
  if (count == 0) fail(ErrorKind::EmptyPool, "pool_time: all positions masked");

  std::vector<double> out(static_cast<size_t>(d));
  std::vector<int> argmax(mode == PoolMode::Max ? static_cast<size_t>(d) : 0);
  const double* src = x.data().data();
  if (mode == PoolMode::Max) {
    for (int j = 0; j < d; ++j) {
      double best = 0.0;
      int best_t = -1;
      for (int i = 0; i < t_len; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const double v = src[static_cast<size_t>(i) * d + j];
        if (best_t < 0 || v > best) {  // strict >, so ties keep the first index
          best = v;
          best_t = i;
        }
      }
      out[static_cast<size_t>(j)] = best;
      argmax[static_cast<size_t>(j)] = best_t;
    }
  } else {
    for (int i = 0; i < t_len; ++i) {
      if (!mask[static_cast<size_t>(i)]) continue;
      for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] += src[static_cast<size_t>(i) * d + j];
    }
    for (auto& v : out) v /= count;
  }
  Tensor y = make_op_output({d}, std::move(out), x.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int xid = tape->node_id(x.impl_ptr());
    tape->record([oid, xid, mode, mask, argmax = std::move(argmax), t_len, d, count](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gx = t.adjoint(xid);
      if (mode == PoolMode::Max) {
        for (int j = 0; j < d; ++j) {
          gx[static_cast<size_t>(argmax[static_cast<size_t>(j)]) * d + j] += go[static_cast<size_t>(j)];
        }
      } else {
        for (int i = 0; i < t_len; ++i) {
          if (!mask[static_cast<size_t>(i)]) continue;
          for (int j = 0; j < d; ++j) gx[static_cast<size_t>(i) * d + j] += go[static_cast<size_t>(j)] / count;
        }
      }
    });
  }
  return y;
}

namespace {

double clamped_norm(std::span<const double> v, double eps) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::max(std::sqrt(acc), eps);
}

}  // namespace

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
  if (a.rank() != 1 || b.rank() != 1 || a.dim(0) != b.dim(0)) {
    fail(ErrorKind::Dimension, "cosine_similarity: shapes " + shape_str(a.shape()) + " vs " +
                                   shape_str(b.shape()));
  }
  const int d = a.dim(0);
  double dot = 0.0;
  for (int i = 0; i < d; ++i) dot += a.data()[static_cast<size_t>(i)] * b.data()[static_cast<size_t>(i)];
  const double na = clamped_norm(a.data(), eps);
  const double nb = clamped_norm(b.data(), eps);
  const double c = dot / (na * nb);
  Tensor y = make_op_output({1}, {c}, propagate_grad({&a, &b}));
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int aid = maybe_id(tape, a);
    const int bid = maybe_id(tape, b);
    auto ai = a.impl_ptr();
    auto bi = b.impl_ptr();
    tape->record([oid, aid, bid, ai, bi, na, nb, c, eps, d](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const double g = t.adjoint(oid)[0];
      const bool a_free = na > eps;  // norm not clamped -> it varies with the input
      const bool b_free = nb > eps;
      if (aid >= 0) {
        auto& ga = t.adjoint(aid);
        for (int i = 0; i < d; ++i) {
          double dv = bi->data[static_cast<size_t>(i)] / (na * nb);
          if (a_free) dv -= c * ai->data[static_cast<size_t>(i)] / (na * na);
          ga[static_cast<size_t>(i)] += g * dv;
        }
      }
      if (bid >= 0) {
        auto& gb = t.adjoint(bid);
        for (int i = 0; i < d; ++i) {
          double dv = ai->data[static_cast<size_t>(i)] / (na * nb);
          if (b_free) dv -= c * bi->data[static_cast<size_t>(i)] / (nb * nb);
          gb[static_cast<size_t>(i)] += g * dv;
        }
      }
    });
  }
  return y;
}

Tensor pairwise_cosine(const Tensor& reps, double eps) {
  if (reps.rank() != 2) fail(ErrorKind::Rank, "pairwise_cosine: rank-2 input required");
  const int b = reps.dim(0), d = reps.dim(1);
  if (b < 2) fail(ErrorKind::BatchSize, "pairwise_cosine: needs at least 2 rows, got " + std::to_string(b));
  const double* src = reps.data().data();
  std::vector<double> norms(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    norms[static_cast<size_t>(i)] =
        clamped_norm(std::span<const double>(src + static_cast<size_t>(i) * d, static_cast<size_t>(d)), eps);
  }
  std::vector<double> out(static_cast<size_t>(b) * b);
  for (int i = 0; i < b; ++i) {
    for (int j = 0; j < b; ++j) {
      double dot = 0.0;
      const double* ri = src + static_cast<size_t>(i) * d;
      const double* rj = src + static_cast<size_t>(j) * d;
      for (int k = 0; k < d; ++k) dot += ri[k] * rj[k];
      out[static_cast<size_t>(i) * b + j] = dot / (norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)]);
    }
  }
  Tensor y = make_op_output({b, b}, std::move(out), reps.requires_grad());
  if (Tape* tape = Tape::active(); tape && y.requires_grad()) {
    const int oid = tape->node_id(y.impl_ptr());
    const int rid = tape->node_id(reps.impl_ptr());
    auto ri = reps.impl_ptr();
    auto yi = y.impl_ptr();
    tape->record([oid, rid, ri, yi, norms = std::move(norms), eps, b, d](Tape& t) {
      if (!t.has_adjoint(oid)) return;
      const auto& go = t.adjoint(oid);
      auto& gr = t.adjoint(rid);
      const double* r = ri->data.data();
      const auto& s = yi->data;
      for (int i = 0; i < b; ++i) {
        for (int j = 0; j < b; ++j) {
          const double g = go[static_cast<size_t>(i) * b + j];
          if (g == 0.0) continue;
          const double ni = norms[static_cast<size_t>(i)];
          const double nj = norms[static_cast<size_t>(j)];
          const double sij = s[static_cast<size_t>(i) * b + j];
          const double* rowi = r + static_cast<size_t>(i) * d;
          const double* rowj = r + static_cast<size_t>(j) * d;
          double* gi = gr.data() + static_cast<size_t>(i) * d;
          double* gj = gr.data() + static_cast<size_t>(j) * d;
          const bool i_free = ni > eps;
          const bool j_free = nj > eps;
          for (int k = 0; k < d; ++k) {
            double dvi = rowj[k] / (ni * nj);
            if (i_free) dvi -= sij * rowi[k] / (ni * ni);
            gi[k] += g * dvi;
            double dvj = rowi[k] / (ni * nj);
            if (j_free) dvj -= sij * rowj[k] / (nj * nj);
            gj[k] += g * dvj;
          }
        }
      }
    });
  }
  return y;
}

}  // namespace rrlm
