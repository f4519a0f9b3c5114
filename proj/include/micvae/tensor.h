#ifndef MICVAE_TENSOR_H
#define MICVAE_TENSOR_H

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "micvae/rng.h"

namespace micvae {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_size(const Shape& s);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One record on the tape. Nodes carry a creation id; backward() visits
// reachable nodes in strictly decreasing id order, i.e. exact reverse
// creation order.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  std::int64_t id = 0;
  std::vector<NodePtr> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantic handle to a tape node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }
  std::int64_t dim(int i) const;  // supports negative indices
  int rank() const { return static_cast<int>(node_->shape.size()); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> data_mut() { return node_->data; }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }
  double item() const;

  NodePtr node() const { return node_; }
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

// While a guard is alive no tape is recorded; use for decoding and
// metric evaluation.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- elementwise, with numpy-style right-aligned broadcasting ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor exp_t(const Tensor& a);
// log(x + eps); the floor keeps KL terms finite on degenerate inputs
Tensor log_eps(const Tensor& a, double eps = 1e-12);

// ---- linear algebra ----
// a: (..., m, k); b: (k, n) or (..., k, n) with matching leading dims
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor slice_last(const Tensor& a, std::int64_t lo, std::int64_t hi);
Tensor concat_last(const std::vector<Tensor>& parts);

// ---- normalization ----
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

// ---- indexing ----
// out shape = ids_shape + [d]; backward scatter-adds into the table grad
Tensor embedding_lookup(const Tensor& table,
                        const std::vector<std::int64_t>& ids, Shape ids_shape);
// x: (..., V), ids: one index per leading position; out: (...)
Tensor gather_last(const Tensor& x, const std::vector<std::int64_t>& ids);

// ---- reductions ----
Tensor sum(const Tensor& a);  // scalar
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);

// ---- regularization ----
// inverted scaling; identity when !train or rate == 0
Tensor dropout(const Tensor& a, double rate, Rng& rng, bool train);

// ---- attention ----
// softmax(q kᵀ / sqrt(d) + mask) v; mask uses additive -1e9 for
// excluded positions and must broadcast to the score shape
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& mask, std::int64_t d);

void backward(const Tensor& loss);

// Max relative error between analytic gradients and central differences.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  std::vector<Tensor> inputs, double h = 1e-5);
double grad_check(const std::function<Tensor(const Tensor&)>& f,
                  const Tensor& x, double h = 1e-5);

}  // namespace micvae

#endif  // MICVAE_TENSOR_H
