#include "micvae/tensor.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace micvae {

namespace {

std::atomic<std::int64_t> g_next_id{1};
thread_local bool g_grad_enabled = true;

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->id = g_next_id.fetch_add(1);
  return n;
}

bool track(const Tensor& a) { return g_grad_enabled && a.requires_grad(); }

// Right-aligned broadcast: dims must match or be 1.
Shape broadcast_shape(const Shape& a, const Shape& b) {
  Shape out;
  int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  int r = std::max(ra, rb);
  out.resize(r);
  for (int i = 0; i < r; ++i) {
    std::int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    std::int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("broadcast mismatch: " + shape_str(a) +
                                  " vs " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` embedded into a broadcast result of rank r; stride 0
// on broadcast dims.
std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
  int r = static_cast<int>(out.size());
  int rs = static_cast<int>(s.size());
  std::vector<std::int64_t> st(r, 0);
  std::int64_t acc = 1;
  for (int i = rs - 1; i >= 0; --i) {
    st[i + (r - rs)] = (s[i] == 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

struct BroadcastIter {
  // walks output linear order, yielding offsets into a and b
  const Shape& out;
  std::vector<std::int64_t> sa, sb, idx;
  std::int64_t oa = 0, ob = 0;
  BroadcastIter(const Shape& o, const Shape& a, const Shape& b)
      : out(o), sa(broadcast_strides(a, o)), sb(broadcast_strides(b, o)),
        idx(o.size(), 0) {}
  void advance() {
    for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
      ++idx[i];
      oa += sa[i];
      ob += sb[i];
      if (idx[i] < out[i]) return;
      oa -= sa[i] * out[i];
      ob -= sb[i] * out[i];
      idx[i] = 0;
    }
  }
};

// Decompose a tensor around `axis` into (outer, n, inner) so that the
// element (o, j, i) lives at (o * n + j) * inner + i.
void axis_split(const Shape& s, int axis, std::int64_t& outer, std::int64_t& n,
                std::int64_t& inner) {
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("axis out of range for shape " + shape_str(s));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
}

using BinFwd = double (*)(double, double);

Tensor broadcast_binary(const Tensor& a, const Tensor& b, BinFwd f,
                        // da, db as functions of (av, bv, gout)
                        double (*dfa)(double, double),
                        double (*dfb)(double, double)) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  std::int64_t n = shape_size(os);
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
  } else {
    BroadcastIter it(os, a.shape(), b.shape());
    for (std::int64_t i = 0; i < n; ++i, it.advance())
      out[i] = f(pa[it.oa], pb[it.ob]);
  }
  bool rg = track(a) || track(b);
  auto node = make_node(os, std::move(out), rg);
  if (rg) {
    node->parents = {a.node(), b.node()};
    Shape as = a.shape(), bs = b.shape();
    node->backward_fn = [as, bs, dfa, dfb](TensorNode& self) {
      auto& pa_n = self.parents[0];
      auto& pb_n = self.parents[1];
      bool ga = pa_n->requires_grad, gb = pb_n->requires_grad;
      if (ga) pa_n->ensure_grad();
      if (gb) pb_n->ensure_grad();
      std::int64_t n = static_cast<std::int64_t>(self.data.size());
      const double* g = self.grad.data();
      const double* av = pa_n->data.data();
      const double* bv = pb_n->data.data();
      if (as == bs) {
        for (std::int64_t i = 0; i < n; ++i) {
          if (ga) pa_n->grad[i] += dfa(av[i], bv[i]) * g[i];
          if (gb) pb_n->grad[i] += dfb(av[i], bv[i]) * g[i];
        }
      } else {
        BroadcastIter it(self.shape, as, bs);
        for (std::int64_t i = 0; i < n; ++i, it.advance()) {
          if (ga) pa_n->grad[it.oa] += dfa(av[it.oa], bv[it.ob]) * g[i];
          if (gb) pb_n->grad[it.ob] += dfb(av[it.oa], bv[it.ob]) * g[i];
        }
      }
    };
  }
  return Tensor(node);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive dim in " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("data size " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  return Tensor(make_node(std::move(shape), std::move(data),
                          requires_grad && g_grad_enabled));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(shape_size(shape), 0.0);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_size(shape), value);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> d(shape_size(shape));
  for (auto& v : d) v = rng.normal() * stddev;
  return from_data(std::move(shape), std::move(d), requires_grad);
}

std::int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  if (i < 0 || i >= r)
    throw std::invalid_argument("dim index out of range for " +
                                shape_str(shape()));
  return node_->shape[i];
}

double Tensor::item() const {
  if (size() != 1)
    throw std::invalid_argument("item() on non-scalar tensor " +
                                shape_str(shape()));
  return node_->data[0];
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

namespace {

Tensor unary(const Tensor& a, const std::function<double(double)>& f,
             const std::function<double(double, double)>& dfdx /* (x, y) */) {
  std::int64_t n = a.size();
  std::vector<double> out(n);
  const double* p = a.data().data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = f(p[i]);
  bool rg = track(a);
  auto node = make_node(a.shape(), std::move(out), rg);
  if (rg) {
    node->parents = {a.node()};
    node->backward_fn = [dfdx](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i)
        p->grad[i] += dfdx(p->data[i], self.data[i]) * self.grad[i];
    };
  }
  return Tensor(node);
}

}  // namespace

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x * c; },
               [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; },
               [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor exp_t(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Tensor log_eps(const Tensor& a, double eps) {
  return unary(a, [eps](double x) { return std::log(x + eps); },
               [eps](double x, double) { return 1.0 / (x + eps); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw std::invalid_argument("matmul needs rank>=2, got " +
                                shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  std::int64_t m = a.dim(-2), k = a.dim(-1);
  std::int64_t kb = b.dim(-2), nn = b.dim(-1);
  bool b_shared = b.rank() == 2 && a.rank() > 2;
  if (k != kb)
    throw std::invalid_argument("matmul inner dims disagree: " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  std::int64_t batch = 1;
  for (int i = 0; i < a.rank() - 2; ++i) batch *= a.shape()[i];
  if (!b_shared && b.rank() != a.rank())
    throw std::invalid_argument("matmul rank mismatch: " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  if (!b_shared) {
    for (int i = 0; i < a.rank() - 2; ++i)
      if (a.shape()[i] != b.shape()[i])
        throw std::invalid_argument("matmul batch dims disagree: " +
                                    shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
  }
  Shape os(a.shape().begin(), a.shape().end() - 1);
  os.push_back(nn);
  std::vector<double> out(batch * m * nn, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::int64_t bb = 0; bb < batch; ++bb) {
    const double* A = pa + bb * m * k;
    const double* B = b_shared ? pb : pb + bb * k * nn;
    double* C = out.data() + bb * m * nn;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t kk = 0; kk < k; ++kk) {
        double av = A[i * k + kk];
        const double* Br = B + kk * nn;
        double* Cr = C + i * nn;
        for (std::int64_t j = 0; j < nn; ++j) Cr[j] += av * Br[j];
      }
  }
  bool rg = track(a) || track(b);
  auto node = make_node(std::move(os), std::move(out), rg);
  if (rg) {
    node->parents = {a.node(), b.node()};
    node->backward_fn = [m, k, nn, batch, b_shared](TensorNode& self) {
      auto& an = self.parents[0];
      auto& bn = self.parents[1];
      const double* g = self.grad.data();
      const double* pa = an->data.data();
      const double* pb = bn->data.data();
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::int64_t bb = 0; bb < batch; ++bb) {
          const double* G = g + bb * m * nn;
          const double* B = b_shared ? pb : pb + bb * k * nn;
          double* dA = an->grad.data() + bb * m * k;
          // dA = G · Bᵀ
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              const double* Gr = G + i * nn;
              const double* Br = B + kk * nn;
              for (std::int64_t j = 0; j < nn; ++j) acc += Gr[j] * Br[j];
              dA[i * k + kk] += acc;
            }
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::int64_t bb = 0; bb < batch; ++bb) {
          const double* G = g + bb * m * nn;
          const double* A = pa + bb * m * k;
          double* dB = b_shared ? bn->grad.data()
                                : bn->grad.data() + bb * k * nn;
          // dB += Aᵀ · G
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t kk = 0; kk < k; ++kk) {
              double av = A[i * k + kk];
              const double* Gr = G + i * nn;
              double* dBr = dB + kk * nn;
              for (std::int64_t j = 0; j < nn; ++j) dBr[j] += av * Gr[j];
            }
        }
      }
    };
  }
  return Tensor(node);
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2)
    throw std::invalid_argument("transpose_last2 needs rank>=2");
  std::int64_t m = a.dim(-2), n = a.dim(-1);
  std::int64_t batch = a.size() / (m * n);
  Shape os = a.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  std::vector<double> out(a.size());
  const double* p = a.data().data();
  for (std::int64_t bb = 0; bb < batch; ++bb)
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        out[bb * m * n + j * m + i] = p[bb * m * n + i * n + j];
  bool rg = track(a);
  auto node = make_node(std::move(os), std::move(out), rg);
  if (rg) {
    node->parents = {a.node()};
    node->backward_fn = [m, n, batch](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::int64_t bb = 0; bb < batch; ++bb)
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j)
            p->grad[bb * m * n + i * n + j] +=
                self.grad[bb * m * n + j * m + i];
    };
  }
  return Tensor(node);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw std::invalid_argument("reshape " + shape_str(a.shape()) + " -> " +
                                shape_str(shape) + " changes element count");
  bool rg = track(a);
  auto node = make_node(std::move(shape), std::vector<double>(a.data().begin(),
                                                              a.data().end()),
                        rg);
  if (rg) {
    node->parents = {a.node()};
    node->backward_fn = [](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i)
        p->grad[i] += self.grad[i];
    };
  }
  return Tensor(node);
}

Tensor slice_last(const Tensor& a, std::int64_t lo, std::int64_t hi) {
  std::int64_t n = a.dim(-1);
  if (lo < 0 || hi > n || lo >= hi)
    throw std::invalid_argument("bad slice [" + std::to_string(lo) + "," +
                                std::to_string(hi) + ") of last dim " +
                                std::to_string(n));
  std::int64_t outer = a.size() / n, w = hi - lo;
  Shape os = a.shape();
  os.back() = w;
  std::vector<double> out(outer * w);
  const double* p = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(p + o * n + lo, p + o * n + hi, out.begin() + o * w);
  bool rg = track(a);
  auto node = make_node(std::move(os), std::move(out), rg);
  if (rg) {
    node->parents = {a.node()};
    node->backward_fn = [n, lo, w, outer](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t j = 0; j < w; ++j)
          p->grad[o * n + lo + j] += self.grad[o * w + j];
    };
  }
  return Tensor(node);
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last of nothing");
  Shape base = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& t : parts) {
    if (t.rank() != static_cast<int>(base.size()))
      throw std::invalid_argument("concat_last rank mismatch");
    for (int i = 0; i + 1 < t.rank(); ++i)
      if (t.shape()[i] != base[i])
        throw std::invalid_argument("concat_last leading dims disagree");
    total += t.dim(-1);
  }
  Shape os = base;
  os.back() = total;
  std::int64_t outer = shape_size(os) / total;
  std::vector<double> out(outer * total);
  std::int64_t off = 0;
  for (const auto& t : parts) {
    std::int64_t w = t.dim(-1);
    const double* p = t.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(p + o * w, p + (o + 1) * w, out.begin() + o * total + off);
    off += w;
  }
  bool rg = false;
  for (const auto& t : parts) rg = rg || track(t);
  auto node = make_node(std::move(os), std::move(out), rg);
  if (rg) {
    std::vector<std::int64_t> widths;
    for (const auto& t : parts) {
      node->parents.push_back(t.node());
      widths.push_back(t.dim(-1));
    }
    node->backward_fn = [widths, outer, total](TensorNode& self) {
      std::int64_t off = 0;
      for (size_t pi = 0; pi < self.parents.size(); ++pi) {
        auto& p = self.parents[pi];
        std::int64_t w = widths[pi];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t j = 0; j < w; ++j)
              p->grad[o * w + j] += self.grad[o * total + off + j];
        }
        off += w;
      }
    };
  }
  return Tensor(node);
}

Tensor softmax(const Tensor& a, int axis) {
  std::int64_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  std::vector<double> out(a.size());
  const double* p = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      std::int64_t base = o * n * inner + i;
      double mx = p[base];
      for (std::int64_t j = 1; j < n; ++j)
        mx = std::max(mx, p[base + j * inner]);
      if (std::isnan(mx))
        throw std::domain_error("softmax over NaN input");
      double z = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        double e = std::exp(p[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::int64_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  bool rg = track(a);
  auto node = make_node(a.shape(), std::move(out), rg);
  if (rg) {
    node->parents = {a.node()};
    node->backward_fn = [outer, n, inner](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          std::int64_t base = o * n * inner + i;
          double dot = 0.0;
          for (std::int64_t j = 0; j < n; ++j)
            dot += self.grad[base + j * inner] * self.data[base + j * inner];
          for (std::int64_t j = 0; j < n; ++j)
            p->grad[base + j * inner] +=
                self.data[base + j * inner] *
                (self.grad[base + j * inner] - dot);
        }
    };
  }
  return Tensor(node);
}

Tensor log_softmax(const Tensor& a, int axis) {
  std::int64_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  std::vector<double> out(a.size());
  const double* p = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      std::int64_t base = o * n * inner + i;
      double mx = p[base];
      for (std::int64_t j = 1; j < n; ++j)
        mx = std::max(mx, p[base + j * inner]);
      if (std::isnan(mx))
        throw std::domain_error("log_softmax over NaN input");
      double z = 0.0;
      for (std::int64_t j = 0; j < n; ++j)
        z += std::exp(p[base + j * inner] - mx);
      double lz = mx + std::log(z);
      for (std::int64_t j = 0; j < n; ++j)
        out[base + j * inner] = p[base + j * inner] - lz;
    }
  bool rg = track(a);
  auto node = make_node(a.shape(), std::move(out), rg);
  if (rg) {
    node->parents = {a.node()};
    node->backward_fn = [outer, n, inner](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          std::int64_t base = o * n * inner + i;
          double gsum = 0.0;
          for (std::int64_t j = 0; j < n; ++j)
            gsum += self.grad[base + j * inner];
          for (std::int64_t j = 0; j < n; ++j)
            p->grad[base + j * inner] +=
                self.grad[base + j * inner] -
                std::exp(self.data[base + j * inner]) * gsum;
        }
    };
  }
  return Tensor(node);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  std::int64_t d = x.dim(-1);
  if (gain.size() != d || bias.size() != d)
    throw std::invalid_argument("layer_norm gain/bias must have size " +
                                std::to_string(d));
  std::int64_t rows = x.size() / d;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* p = x.data().data();
  const double* g = gain.data().data();
  const double* b = bias.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = p + r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double c = row[j] - mean;
      var += c * c;
    }
    var /= d;
    double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::int64_t j = 0; j < d; ++j) {
      double xh = (row[j] - mean) * rs;
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = xh * g[j] + b[j];
    }
  }
  bool rg = track(x) || track(gain) || track(bias);
  auto node = make_node(x.shape(), std::move(out), rg);
  if (rg) {
    node->parents = {x.node(), gain.node(), bias.node()};
    node->backward_fn = [d, rows, xhat, rstd](TensorNode& self) {
      auto& xn = self.parents[0];
      auto& gn = self.parents[1];
      auto& bn = self.parents[2];
      const double* g = gn->data.data();
      if (gn->requires_grad) gn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      if (xn->requires_grad) xn->ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* go = self.grad.data() + r * d;
        const double* xh = xhat->data() + r * d;
        double rs = (*rstd)[r];
        if (gn->requires_grad || bn->requires_grad) {
          for (std::int64_t j = 0; j < d; ++j) {
            if (gn->requires_grad) gn->grad[j] += go[j] * xh[j];
            if (bn->requires_grad) bn->grad[j] += go[j];
          }
        }
        if (xn->requires_grad) {
          // d/dx of xhat: rs * (I - 1/d * ones - 1/d * xh xhᵀ)
          double s1 = 0.0, s2 = 0.0;
          for (std::int64_t j = 0; j < d; ++j) {
            s1 += go[j] * g[j];
            s2 += go[j] * g[j] * xh[j];
          }
          for (std::int64_t j = 0; j < d; ++j)
            xn->grad[r * d + j] +=
                rs * (go[j] * g[j] - s1 / d - xh[j] * s2 / d);
        }
      }
    };
  }
  return Tensor(node);
}

Tensor embedding_lookup(const Tensor& table,
                        const std::vector<std::int64_t>& ids, Shape ids_shape) {
  if (table.rank() != 2)
    throw std::invalid_argument("embedding table must be 2-D, got " +
                                shape_str(table.shape()));
  if (shape_size(ids_shape) != static_cast<std::int64_t>(ids.size()))
    throw std::invalid_argument("ids_shape does not match id count");
  std::int64_t v = table.dim(0), d = table.dim(1);
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= v)
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) +
                              " out of range [0," + std::to_string(v) +
                              ") at position " + std::to_string(i));
  Shape os = ids_shape;
  os.push_back(d);
  std::vector<double> out(ids.size() * d);
  const double* p = table.data().data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(p + ids[i] * d, p + (ids[i] + 1) * d, out.begin() + i * d);
  bool rg = track(table);
  auto node = make_node(std::move(os), std::move(out), rg);
  if (rg) {
    node->parents = {table.node()};
    auto ids_copy = std::make_shared<std::vector<std::int64_t>>(ids);
    node->backward_fn = [d, ids_copy](TensorNode& self) {
      auto& t = self.parents[0];
      t->ensure_grad();
      for (size_t i = 0; i < ids_copy->size(); ++i) {
        double* dst = t->grad.data() + (*ids_copy)[i] * d;
        const double* src = self.grad.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return Tensor(node);
}

Tensor gather_last(const Tensor& x, const std::vector<std::int64_t>& ids) {
  std::int64_t v = x.dim(-1);
  std::int64_t outer = x.size() / v;
  if (static_cast<std::int64_t>(ids.size()) != outer)
    throw std::invalid_argument("gather_last needs one id per row");
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= v)
      throw std::out_of_range("gather index " + std::to_string(ids[i]) +
                              " out of range at row " + std::to_string(i));
  Shape os(x.shape().begin(), x.shape().end() - 1);
  if (os.empty()) os = {1};
  std::vector<double> out(outer);
  const double* p = x.data().data();
  for (std::int64_t i = 0; i < outer; ++i) out[i] = p[i * v + ids[i]];
  bool rg = track(x);
  auto node = make_node(std::move(os), std::move(out), rg);
  if (rg) {
    node->parents = {x.node()};
    auto ids_copy = std::make_shared<std::vector<std::int64_t>>(ids);
    node->backward_fn = [v, ids_copy](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (size_t i = 0; i < ids_copy->size(); ++i)
        p->grad[i * v + (*ids_copy)[i]] += self.grad[i];
    };
  }
  return Tensor(node);
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  bool rg = track(a);
  auto node = make_node({1}, {s}, rg);
  if (rg) {
    node->parents = {a.node()};
    node->backward_fn = [](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (auto& g : p->grad) g += self.grad[0];
    };
  }
  return Tensor(node);
}

Tensor sum_axis(const Tensor& a, int axis) {
  std::int64_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  int ax = axis < 0 ? axis + a.rank() : axis;
  Shape os;
  for (int i = 0; i < a.rank(); ++i)
    if (i != ax) os.push_back(a.shape()[i]);
  if (os.empty()) os = {1};
  std::vector<double> out(outer * inner, 0.0);
  const double* p = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < inner; ++i)
        out[o * inner + i] += p[(o * n + j) * inner + i];
  bool rg = track(a);
  auto node = make_node(std::move(os), std::move(out), rg);
  if (rg) {
    node->parents = {a.node()};
    node->backward_fn = [outer, n, inner](TensorNode& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t j = 0; j < n; ++j)
          for (std::int64_t i = 0; i < inner; ++i)
            p->grad[(o * n + j) * inner + i] += self.grad[o * inner + i];
    };
  }
  return Tensor(node);
}

Tensor mean_axis(const Tensor& a, int axis) {
  std::int64_t n = a.dim(axis);
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(n));
}

Tensor dropout(const Tensor& a, double rate, Rng& rng, bool train) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout rate must be in [0,1)");
  if (!train || rate == 0.0) return a;
  double keep = 1.0 - rate;
  std::vector<double> mask(a.size());
  for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  Tensor mt = Tensor::from_data(a.shape(), std::move(mask));
  return mul(a, mt);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& mask, std::int64_t d) {
  Tensor scores = scale(matmul(q, transpose_last2(k)),
                        1.0 / std::sqrt(static_cast<double>(d)));
  if (mask.defined()) scores = add(scores, mask);
  return matmul(softmax(scores, -1), v);
}

void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward() requires a scalar loss, got " +
                                shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  // reachable set, then strict reverse creation order
  std::vector<TensorNode*> stack{loss.node().get()};
  std::unordered_set<TensorNode*> seen{loss.node().get()};
  std::vector<TensorNode*> nodes;
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    nodes.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
  }
  std::sort(nodes.begin(), nodes.end(),
            [](TensorNode* a, TensorNode* b) { return a->id > b->id; });
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (TensorNode* n : nodes)
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, double h) {
  for (auto& t : inputs) t.zero_grad();
  Tensor out = f(inputs);
  backward(out);
  double worst = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    for (std::int64_t i = 0; i < t.size(); ++i) {
      double orig = t.data()[i];
      t.data_mut()[i] = orig + h;
      double up = f(inputs).item();
      t.data_mut()[i] = orig - h;
      double dn = f(inputs).item();
      t.data_mut()[i] = orig;
      double fd = (up - dn) / (2.0 * h);
      double an = t.has_grad() ? t.grad()[i] : 0.0;
      double rel = std::abs(an - fd) / (std::abs(an) + std::abs(fd) + 1e-8);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h) {
  return grad_check(
      [&f](const std::vector<Tensor>& in) { return f(in[0]); },
      {x}, h);
}

}  // namespace micvae
