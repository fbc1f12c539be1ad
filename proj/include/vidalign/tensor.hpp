#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vidalign {

// Deterministic random stream. All randomness in a run (init, shuffling,
// data generation) is drawn from one of these in a fixed order, so results
// do not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                          // [0, 1)
  double uniform(double lo, double hi);
  double normal();                           // Box-Muller, mean 0 var 1
  double normal(double mu, double sigma);
  std::size_t uniform_index(std::size_t n);  // [0, n)

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

namespace detail {
struct Node;
}

// Dense 64-bit float tensor with optional participation in reverse-mode
// autodiff. Value-semantic handle to a shared node; node contents are not
// mutated by ops (new nodes are produced), so read-only sharing is safe.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double sigma,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const;
  std::size_t rows() const;  // 2-d helpers
  std::size_t cols() const;
  bool requires_grad() const;

  const std::vector<double>& data() const;
  // In-place access for parameter updates and finite-difference probes.
  // Never used by ops; graphs built before a mutation are invalidated by it.
  std::vector<double>& mutable_data();

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  double value() const;  // scalar tensors
  double at(std::size_t i) const;
  double at(std::size_t r, std::size_t c) const;

  Tensor detach() const;  // copy of the values, cut from the graph

  // internal
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of the ops reachable from a root, in execution order
// (execution order is topological by construction). Backward replay visits
// each recorded op exactly once, in reverse.
class Tape {
 public:
  static Tape trace(const Tensor& root);
  std::size_t op_count() const { return ops_.size(); }
  // Seeds d(root)/d(root) = 1 and replays the chain rule. Leaf gradients
  // accumulate additively across calls; interior gradients are reset here.
  void run_backward();

 private:
  std::vector<std::shared_ptr<detail::Node>> ops_;  // topological order
  std::vector<std::shared_ptr<detail::Node>> leaves_;
  std::shared_ptr<detail::Node> root_;
};

// Convenience: trace + backward from a scalar loss.
void backward(const Tensor& loss);

// While a NoGradGuard is alive, ops produce detached results (no graph is
// recorded). Used by evaluation paths.
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

// ---- ops ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);          // same shape
Tensor add_rowvec(const Tensor& m, const Tensor& v);   // m: r x c, v: [c]
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Numerically stable softmax along `axis` (negative counts from the back).
Tensor softmax(const Tensor& x, int axis);

// Replaces entries where mask is nonzero with `value`; gradient is zero
// through replaced positions. Mask is a plain tensor (no grad); it may have
// the same shape as x or be rank-1 of length x.cols() (broadcast over rows).
Tensor masked_fill(const Tensor& x, const Tensor& mask, double value);

// Normalizes over the last axis. gain/bias are rank-1 of that extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double epsilon = 1e-5);

// Each slice along the last axis gets Euclidean norm 1; slices with norm
// below epsilon are divided by epsilon instead (zero stays zero).
Tensor l2_normalize(const Tensor& x, double epsilon = 1e-12);

// Mean of -log softmax(logits)[target] over rows whose target is not
// ignore_index. All rows ignored is an error.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets,
                     std::int64_t ignore_index = -1);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_axis0(const Tensor& x);  // r x c -> 1 x c

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

// out[i] = x[indices[i]]; backward scatter-adds (duplicates accumulate).
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices);
// Inverse placement: row i of x lands at row indices[i] of an out_rows x C
// zero matrix. Indices must be distinct.
Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& indices,
                    std::size_t out_rows);

// Per row: (x - min) / (max - min + epsilon). Ties in min/max break to the
// lowest index for deterministic gradients.
Tensor minmax_normalize_rows(const Tensor& x, double epsilon = 1e-8);
// Entries strictly below sigma become 0 (gradient masked there).
Tensor threshold_zero(const Tensor& x, double sigma);
// Per row: x / sum(x). Rows with sum <= 0 are an error.
Tensor renormalize_rows(const Tensor& x);

bool all_finite(const Tensor& x);

// ---- gradient checking ----------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  bool pass(double tol) const { return max_rel_err <= tol; }
};

// Central differences against the tape. Checks every coordinate of every
// input, or `sample_coords` random coordinates per input when nonzero.
// A coordinate passes outright when |analytic - numeric| <= abs_tol;
// otherwise rel err = |analytic - numeric| / max(|numeric|, 1e-8).
GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor>& inputs, double step = 1e-5, double abs_tol = 1e-7,
    std::size_t sample_coords = 0, Rng* rng = nullptr);

[[noreturn]] void fail(const std::string& msg);
void check(bool cond, const std::string& msg);

}  // namespace vidalign
