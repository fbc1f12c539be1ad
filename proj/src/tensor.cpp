#include "vidalign/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace vidalign {

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

// ---- rng -------------------------------------------------------------------

namespace {
inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

Rng::Rng(std::uint64_t seed) : state_(seed ^ 0x2545f4914f6cdd1dULL) {
  // warm up so nearby seeds decorrelate
  for (int i = 0; i < 4; ++i) splitmix64(state_);
}

std::uint64_t Rng::next_u64() { return splitmix64(state_); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * 3.14159265358979323846 * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

double Rng::normal(double mu, double sigma) { return mu + sigma * normal(); }

std::size_t Rng::uniform_index(std::size_t n) {
  check(n > 0, "uniform_index: n must be positive");
  // rejection sampling for an unbiased draw
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return static_cast<std::size_t>(v % n);
}

// ---- graph node -------------------------------------------------------------

namespace detail {

std::atomic<std::uint64_t> g_seq{0};

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;

  Node() : seq(g_seq.fetch_add(1, std::memory_order_relaxed)) {}
  virtual ~Node() = default;
  virtual void backward() {}

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

// dense matmul kernels; ikj order keeps the inner loop contiguous
void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c(m x n) += a(m x k) * b(n x k)^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c(k x n) += a(m x k)^T * b(m x n)
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace
}  // namespace detail

using detail::Node;
using detail::NodePtr;

// ---- Tensor ----------------------------------------------------------------

namespace {

NodePtr make_node(Shape shape, std::vector<double> data, bool rg) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = rg;
  return n;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_size(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_size(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value),
                          requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  check(shape_size(shape) == data.size(),
        "from_data: shape " + shape_str(shape) + " does not match data length " +
            std::to_string(data.size()));
  return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double sigma, bool requires_grad) {
  std::size_t n = shape_size(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = rng.normal(0.0, sigma);
  return Tensor(make_node(std::move(shape), std::move(d), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::size() const { return node_->data.size(); }
std::size_t Tensor::rank() const { return node_->shape.size(); }

std::size_t Tensor::rows() const {
  check(rank() == 2, "rows: tensor is not 2-d, shape " + shape_str(shape()));
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  check(rank() == 2, "cols: tensor is not 2-d, shape " + shape_str(shape()));
  return node_->shape[1];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
const std::vector<double>& Tensor::data() const { return node_->data; }
std::vector<double>& Tensor::mutable_data() { return node_->data; }
bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  check(has_grad(), "grad: no gradient present (run backward first)");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->data.size(), 0.0);
}

double Tensor::value() const {
  check(size() == 1, "value: tensor is not scalar, shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t i) const { return node_->data.at(i); }

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data.at(r * cols() + c);
}

Tensor Tensor::detach() const {
  return Tensor(make_node(node_->shape, node_->data, false));
}

// ---- tape -------------------------------------------------------------------

Tape Tape::trace(const Tensor& root) {
  check(root.defined(), "trace: undefined tensor");
  Tape t;
  t.root_ = root.node();
  std::unordered_set<Node*> seen;
  std::vector<NodePtr> stack{root.node()};
  while (!stack.empty()) {
    NodePtr n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || seen.count(n.get())) continue;
    seen.insert(n.get());
    if (n->is_leaf()) {
      t.leaves_.push_back(n);
    } else {
      t.ops_.push_back(n);
      for (auto& p : n->parents) stack.push_back(p);
    }
  }
  std::sort(t.ops_.begin(), t.ops_.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->seq < b->seq; });
  return t;
}

void Tape::run_backward() {
  check(root_ != nullptr, "run_backward: empty tape");
  check(root_->data.size() == 1,
        "backward: loss must be scalar, shape " + shape_str(root_->shape));
  // interior grads are per-pass scratch; leaf grads accumulate across passes
  for (auto& n : ops_) n->grad.assign(n->data.size(), 0.0);
  for (auto& n : leaves_) n->ensure_grad();
  root_->ensure_grad();
  root_->grad[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)->backward();
}

void backward(const Tensor& loss) {
  check(loss.requires_grad(),
        "backward: loss does not require grad (no tape recorded)");
  Tape::trace(loss).run_backward();
}

NoGradGuard::NoGradGuard() : prev_(detail::g_grad_enabled) {
  detail::g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = prev_; }

bool grad_enabled() { return detail::g_grad_enabled; }

// ---- op helpers --------------------------------------------------------------

namespace {

bool want_grad(std::initializer_list<const Tensor*> ins) {
  if (!detail::g_grad_enabled) return false;
  for (auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <typename NodeT, typename... Args>
Tensor finish(NodeT* raw, Shape shape, std::vector<double> data, bool rg,
              std::vector<NodePtr> parents) {
  NodePtr n(raw);
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = rg;
  if (rg) n->parents = std::move(parents);
  return Tensor(n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

}  // namespace

// ---- elementwise ops ---------------------------------------------------------

namespace {

struct AddNode : Node {
  void backward() override {
    for (int s = 0; s < 2; ++s) {
      Node& p = *parents[s];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::size_t i = 0; i < grad.size(); ++i) p.grad[i] += grad[i];
    }
  }
};

struct SubNode : Node {
  void backward() override {
    if (parents[0]->requires_grad) {
      parents[0]->ensure_grad();
      for (std::size_t i = 0; i < grad.size(); ++i)
        parents[0]->grad[i] += grad[i];
    }
    if (parents[1]->requires_grad) {
      parents[1]->ensure_grad();
      for (std::size_t i = 0; i < grad.size(); ++i)
        parents[1]->grad[i] -= grad[i];
    }
  }
};

struct MulNode : Node {
  void backward() override {
    Node& a = *parents[0];
    Node& b = *parents[1];
    if (a.requires_grad) {
      a.ensure_grad();
      for (std::size_t i = 0; i < grad.size(); ++i)
        a.grad[i] += grad[i] * b.data[i];
    }
    if (b.requires_grad) {
      b.ensure_grad();
      for (std::size_t i = 0; i < grad.size(); ++i)
        b.grad[i] += grad[i] * a.data[i];
    }
  }
};

struct ScaleNode : Node {
  double c = 1.0;
  void backward() override {
    Node& a = *parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    for (std::size_t i = 0; i < grad.size(); ++i) a.grad[i] += c * grad[i];
  }
};

struct AddRowvecNode : Node {
  void backward() override {
    Node& m = *parents[0];
    Node& v = *parents[1];
    std::size_t c = v.data.size();
    if (m.requires_grad) {
      m.ensure_grad();
      for (std::size_t i = 0; i < grad.size(); ++i) m.grad[i] += grad[i];
    }
    if (v.requires_grad) {
      v.ensure_grad();
      std::size_t r = m.data.size() / c;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v.grad[j] += grad[i * c + j];
    }
  }
};

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
  return finish(new AddNode, a.shape(), std::move(out), want_grad({&a, &b}),
                {a.node(), b.node()});
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
  return finish(new SubNode, a.shape(), std::move(out), want_grad({&a, &b}),
                {a.node(), b.node()});
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
  return finish(new MulNode, a.shape(), std::move(out), want_grad({&a, &b}),
                {a.node(), b.node()});
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.at(i);
  auto* n = new ScaleNode;
  n->c = c;
  return finish(n, a.shape(), std::move(out), want_grad({&a}), {a.node()});
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  check(m.rank() == 2 && v.rank() == 1 && v.shape()[0] == m.cols(),
        "add_rowvec: need r x c matrix and [c] vector, got " +
            shape_str(m.shape()) + " and " + shape_str(v.shape()));
  std::size_t r = m.rows(), c = m.cols();
  std::vector<double> out(m.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m.at(i, j) + v.at(j);
  return finish(new AddRowvecNode, m.shape(), std::move(out),
                want_grad({&m, &v}), {m.node(), v.node()});
}

// ---- matmul / transpose --------------------------------------------------------

namespace {

struct MatmulNode : Node {
  std::size_t m = 0, k = 0, n = 0;
  void backward() override {
    Node& a = *parents[0];
    Node& b = *parents[1];
    if (a.requires_grad) {
      a.ensure_grad();
      detail::gemm_nt(grad.data(), b.data.data(), a.grad.data(), m, n, k);
    }
    if (b.requires_grad) {
      b.ensure_grad();
      detail::gemm_tn(a.data.data(), grad.data(), b.grad.data(), m, k, n);
    }
  }
};

struct TransposeNode : Node {
  void backward() override {
    Node& a = *parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    std::size_t r = shape[0], c = shape[1];  // out is r x c, a is c x r
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) a.grad[j * r + i] += grad[i * c + j];
  }
};

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(),
        "matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
            shape_str(b.shape()));
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto* node = new MatmulNode;
  node->m = m;
  node->k = k;
  node->n = n;
  return finish(node, {m, n}, std::move(out), want_grad({&a, &b}),
                {a.node(), b.node()});
}

Tensor transpose(const Tensor& a) {
  check(a.rank() == 2, "transpose: need 2-d tensor, got " + shape_str(a.shape()));
  std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.at(i, j);
  return finish(new TransposeNode, {c, r}, std::move(out), want_grad({&a}),
                {a.node()});
}

// ---- softmax -------------------------------------------------------------------

namespace {

struct AxisIter {
  std::size_t outer, len, inner;
};

AxisIter axis_iter(const Shape& s, int axis) {
  int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  check(axis >= 0 && axis < r, "axis out of bounds for shape " + shape_str(s));
  AxisIter it{1, s[axis], 1};
  for (int i = 0; i < axis; ++i) it.outer *= s[i];
  for (int i = axis + 1; i < r; ++i) it.inner *= s[i];
  return it;
}

struct SoftmaxNode : Node {
  AxisIter it{};
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t o = 0; o < it.outer; ++o)
      for (std::size_t in = 0; in < it.inner; ++in) {
        std::size_t base = o * it.len * it.inner + in;
        double dot = 0.0;
        for (std::size_t a = 0; a < it.len; ++a) {
          std::size_t idx = base + a * it.inner;
          dot += grad[idx] * data[idx];
        }
        for (std::size_t a = 0; a < it.len; ++a) {
          std::size_t idx = base + a * it.inner;
          x.grad[idx] += data[idx] * (grad[idx] - dot);
        }
      }
  }
};

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  AxisIter it = axis_iter(x.shape(), axis);
  std::vector<double> out(x.size());
  const auto& d = x.data();
  for (std::size_t o = 0; o < it.outer; ++o)
    for (std::size_t in = 0; in < it.inner; ++in) {
      std::size_t base = o * it.len * it.inner + in;
      double mx = d[base];
      for (std::size_t a = 1; a < it.len; ++a)
        mx = std::max(mx, d[base + a * it.inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < it.len; ++a) {
        std::size_t idx = base + a * it.inner;
        out[idx] = std::exp(d[idx] - mx);
        z += out[idx];
      }
      for (std::size_t a = 0; a < it.len; ++a) out[base + a * it.inner] /= z;
    }
  auto* n = new SoftmaxNode;
  n->it = it;
  return finish(n, x.shape(), std::move(out), want_grad({&x}), {x.node()});
}

// ---- masked fill ----------------------------------------------------------------

namespace {

struct MaskedFillNode : Node {
  std::vector<std::uint8_t> filled;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!filled[i]) x.grad[i] += grad[i];
  }
};

}  // namespace

Tensor masked_fill(const Tensor& x, const Tensor& mask, double value) {
  bool rowvec = mask.rank() == 1 && x.rank() == 2 && mask.shape()[0] == x.cols();
  check(rowvec || mask.shape() == x.shape(),
        "masked_fill: mask " + shape_str(mask.shape()) +
            " not broadcastable to " + shape_str(x.shape()));
  std::vector<double> out(x.size());
  std::vector<std::uint8_t> filled(x.size());
  std::size_t c = rowvec ? x.cols() : 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    bool f = rowvec ? mask.at(i % c) != 0.0 : mask.at(i) != 0.0;
    filled[i] = f;
    out[i] = f ? value : x.at(i);
  }
  auto* n = new MaskedFillNode;
  n->filled = std::move(filled);
  return finish(n, x.shape(), std::move(out), want_grad({&x}), {x.node()});
}

// ---- layer norm ----------------------------------------------------------------

namespace {

struct LayerNormNode : Node {
  std::vector<double> xhat, inv_std;
  std::size_t d = 0;
  void backward() override {
    Node& x = *parents[0];
    Node& g = *parents[1];
    Node& b = *parents[2];
    std::size_t rows = data.size() / d;
    if (g.requires_grad) g.ensure_grad();
    if (b.requires_grad) b.ensure_grad();
    if (x.requires_grad) x.ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = grad.data() + r * d;
      const double* xh = xhat.data() + r * d;
      if (g.requires_grad)
        for (std::size_t j = 0; j < d; ++j) g.grad[j] += go[j] * xh[j];
      if (b.requires_grad)
        for (std::size_t j = 0; j < d; ++j) b.grad[j] += go[j];
      if (x.requires_grad) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          double dxh = go[j] * g.data[j];
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh /= d;
        mean_dxh_xh /= d;
        double is = inv_std[r];
        for (std::size_t j = 0; j < d; ++j) {
          double dxh = go[j] * g.data[j];
          x.grad[r * d + j] += is * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
      }
    }
  }
};

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double epsilon) {
  std::size_t d = x.shape().back();
  check(gain.rank() == 1 && gain.shape()[0] == d && bias.rank() == 1 &&
            bias.shape()[0] == d,
        "layer_norm: gain/bias must be rank-1 of extent " + std::to_string(d));
  std::size_t rows = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double dv = xr[j] - mean;
      var += dv * dv;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + epsilon);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      double xh = (xr[j] - mean) * is;
      xhat[r * d + j] = xh;
      out[r * d + j] = xh * gain.at(j) + bias.at(j);
    }
  }
  auto* n = new LayerNormNode;
  n->xhat = std::move(xhat);
  n->inv_std = std::move(inv_std);
  n->d = d;
  return finish(n, x.shape(), std::move(out), want_grad({&x, &gain, &bias}),
                {x.node(), gain.node(), bias.node()});
}

// ---- l2 normalize ----------------------------------------------------------------

namespace {

struct L2NormalizeNode : Node {
  std::vector<double> norms;  // clamped to epsilon
  std::vector<std::uint8_t> clamped;
  std::size_t d = 0;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    std::size_t rows = data.size() / d;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = grad.data() + r * d;
      const double* y = data.data() + r * d;
      double* gx = x.grad.data() + r * d;
      double nrm = norms[r];
      if (clamped[r]) {
        for (std::size_t j = 0; j < d; ++j) gx[j] += go[j] / nrm;
      } else {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += go[j] * y[j];
        for (std::size_t j = 0; j < d; ++j)
          gx[j] += (go[j] - y[j] * dot) / nrm;
      }
    }
  }
};

}  // namespace

Tensor l2_normalize(const Tensor& x, double epsilon) {
  std::size_t d = x.shape().back();
  std::size_t rows = x.size() / d;
  std::vector<double> out(x.size()), norms(rows);
  std::vector<std::uint8_t> clamped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xr[j] * xr[j];
    double nrm = std::sqrt(s);
    clamped[r] = nrm < epsilon;
    if (clamped[r]) nrm = epsilon;
    norms[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] / nrm;
  }
  auto* n = new L2NormalizeNode;
  n->norms = std::move(norms);
  n->clamped = std::move(clamped);
  n->d = d;
  return finish(n, x.shape(), std::move(out), want_grad({&x}), {x.node()});
}

// ---- cross entropy ---------------------------------------------------------------

namespace {

struct CrossEntropyNode : Node {
  std::vector<std::int64_t> targets;
  std::int64_t ignore_index = -1;
  std::size_t contributing = 0;
  std::vector<double> probs;  // softmax rows, cached for backward
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    std::size_t c = x.shape[1];
    double g = grad[0] / static_cast<double>(contributing);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] == ignore_index) continue;
      const double* p = probs.data() + r * c;
      double* gx = x.grad.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) gx[j] += g * p[j];
      gx[static_cast<std::size_t>(targets[r])] -= g;
    }
  }
};

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<std::int64_t>& targets,
                     std::int64_t ignore_index) {
  check(logits.rank() == 2, "cross_entropy: logits must be 2-d, got " +
                                shape_str(logits.shape()));
  std::size_t n = logits.rows(), c = logits.cols();
  check(targets.size() == n, "cross_entropy: " + std::to_string(targets.size()) +
                                 " targets for " + std::to_string(n) + " rows");
  std::vector<double> probs(n * c);
  double total = 0.0;
  std::size_t contributing = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = logits.data().data() + r * c;
    double mx = xr[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(xr[j] - mx);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    std::int64_t t = targets[r];
    if (t == ignore_index) continue;
    check(t >= 0 && static_cast<std::size_t>(t) < c,
          "cross_entropy: target " + std::to_string(t) + " out of range [0, " +
              std::to_string(c) + ") at row " + std::to_string(r));
    total += (mx + std::log(z)) - xr[t];
    ++contributing;
  }
  check(contributing > 0, "cross_entropy: no contributing rows");
  auto* node = new CrossEntropyNode;
  node->targets = targets;
  node->ignore_index = ignore_index;
  node->contributing = contributing;
  node->probs = std::move(probs);
  return finish(node, Shape{1},
                std::vector<double>{total / static_cast<double>(contributing)},
                want_grad({&logits}), {logits.node()});
}

// ---- activations ------------------------------------------------------------------

namespace {

struct ReluNode : Node {
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (x.data[i] > 0.0) x.grad[i] += grad[i];
  }
};

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct GeluNode : Node {
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < grad.size(); ++i) {
      double v = x.data[i];
      double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      x.grad[i] += grad[i] * (cdf + v * pdf);
    }
  }
};

}  // namespace

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, x.at(i));
  return finish(new ReluNode, x.shape(), std::move(out), want_grad({&x}),
                {x.node()});
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = x.at(i);
    out[i] = v * 0.5 * (1.0 + std::erf(v * kInvSqrt2));
  }
  return finish(new GeluNode, x.shape(), std::move(out), want_grad({&x}),
                {x.node()});
}

// ---- reductions --------------------------------------------------------------------

namespace {

struct SumNode : Node {
  double inv_count = 1.0;  // 1 for sum, 1/n for mean
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    double g = grad[0] * inv_count;
    for (auto& v : x.grad) v += g;
  }
};

struct MeanAxis0Node : Node {
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    std::size_t c = shape[1];
    std::size_t r = x.data.size() / c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        x.grad[i * c + j] += grad[j] / static_cast<double>(r);
  }
};

}  // namespace

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto* n = new SumNode;
  return finish(n, Shape{1}, std::vector<double>{s}, want_grad({&x}),
                {x.node()});
}

Tensor mean(const Tensor& x) {
  check(x.size() > 0, "mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto* n = new SumNode;
  n->inv_count = 1.0 / static_cast<double>(x.size());
  return finish(n, Shape{1},
                std::vector<double>{s / static_cast<double>(x.size())},
                want_grad({&x}), {x.node()});
}

Tensor mean_axis0(const Tensor& x) {
  check(x.rank() == 2 && x.rows() > 0,
        "mean_axis0: need nonempty 2-d tensor, got " + shape_str(x.shape()));
  std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.at(i, j);
  for (auto& v : out) v /= static_cast<double>(r);
  return finish(new MeanAxis0Node, {1, c}, std::move(out), want_grad({&x}),
                {x.node()});
}

// ---- slicing / concatenation ----------------------------------------------------------

namespace {

struct SliceRowsNode : Node {
  std::size_t begin = 0;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    std::size_t c = shape[1];
    for (std::size_t i = 0; i < shape[0]; ++i)
      for (std::size_t j = 0; j < c; ++j)
        x.grad[(begin + i) * c + j] += grad[i * c + j];
  }
};

struct SliceColsNode : Node {
  std::size_t begin = 0, src_cols = 0;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < shape[0]; ++i)
      for (std::size_t j = 0; j < shape[1]; ++j)
        x.grad[i * src_cols + begin + j] += grad[i * shape[1] + j];
  }
};

struct ConcatRowsNode : Node {
  void backward() override {
    std::size_t c = shape[1];
    std::size_t row = 0;
    for (auto& p : parents) {
      std::size_t pr = p->data.size() / c;
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < pr * c; ++i)
          p->grad[i] += grad[row * c + i];
      }
      row += pr;
    }
  }
};

struct ConcatColsNode : Node {
  void backward() override {
    std::size_t r = shape[0], c = shape[1];
    std::size_t col = 0;
    for (auto& p : parents) {
      std::size_t pc = p->data.size() / r;
      if (p->requires_grad) {
        p->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j)
            p->grad[i * pc + j] += grad[i * c + col + j];
      }
      col += pc;
    }
  }
};

struct GatherRowsNode : Node {
  std::vector<std::size_t> indices;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    std::size_t c = shape[1];
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < c; ++j)
        x.grad[indices[i] * c + j] += grad[i * c + j];
  }
};

struct ScatterRowsNode : Node {
  std::vector<std::size_t> indices;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    std::size_t c = shape[1];
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t j = 0; j < c; ++j)
        x.grad[i * c + j] += grad[indices[i] * c + j];
  }
};

}  // namespace

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  check(x.rank() == 2 && begin + count <= x.rows(),
        "slice_rows: range [" + std::to_string(begin) + ", " +
            std::to_string(begin + count) + ") out of bounds for " +
            shape_str(x.shape()));
  std::size_t c = x.cols();
  std::vector<double> out(count * c);
  std::memcpy(out.data(), x.data().data() + begin * c,
              count * c * sizeof(double));
  auto* n = new SliceRowsNode;
  n->begin = begin;
  return finish(n, {count, c}, std::move(out), want_grad({&x}), {x.node()});
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  check(x.rank() == 2 && begin + count <= x.cols(),
        "slice_cols: range [" + std::to_string(begin) + ", " +
            std::to_string(begin + count) + ") out of bounds for " +
            shape_str(x.shape()));
  std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j)
      out[i * count + j] = x.at(i, begin + j);
  auto* n = new SliceColsNode;
  n->begin = begin;
  n->src_cols = c;
  return finish(n, {r, count}, std::move(out), want_grad({&x}), {x.node()});
}

Tensor concat_rows(std::span<const Tensor> parts) {
  check(!parts.empty(), "concat_rows: no parts");
  std::size_t c = parts[0].cols();
  std::size_t rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    check(p.rank() == 2 && p.cols() == c,
          "concat_rows: column mismatch, " + shape_str(p.shape()) + " vs " +
              std::to_string(c) + " columns");
    rows += p.rows();
    rg = rg || (detail::g_grad_enabled && p.requires_grad());
  }
  std::vector<double> out;
  out.reserve(rows * c);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<NodePtr> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  return finish(new ConcatRowsNode, {rows, c}, std::move(out), rg,
                std::move(parents));
}

Tensor concat_cols(std::span<const Tensor> parts) {
  check(!parts.empty(), "concat_cols: no parts");
  std::size_t r = parts[0].rows();
  std::size_t cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    check(p.rank() == 2 && p.rows() == r,
          "concat_cols: row mismatch, " + shape_str(p.shape()) + " vs " +
              std::to_string(r) + " rows");
    cols += p.cols();
    rg = rg || (detail::g_grad_enabled && p.requires_grad());
  }
  std::vector<double> out(r * cols);
  std::size_t col = 0;
  for (const auto& p : parts) {
    std::size_t pc = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j)
        out[i * cols + col + j] = p.at(i, j);
    col += pc;
  }
  std::vector<NodePtr> parents;
  for (const auto& p : parts) parents.push_back(p.node());
  return finish(new ConcatColsNode, {r, cols}, std::move(out), rg,
                std::move(parents));
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
  check(x.rank() == 2, "gather_rows: need 2-d tensor");
  std::size_t c = x.cols();
  std::vector<double> out(indices.size() * c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    check(indices[i] < x.rows(), "gather_rows: index " +
                                     std::to_string(indices[i]) +
                                     " out of bounds for " + shape_str(x.shape()));
    std::memcpy(out.data() + i * c, x.data().data() + indices[i] * c,
                c * sizeof(double));
  }
  auto* n = new GatherRowsNode;
  n->indices = indices;
  return finish(n, {indices.size(), c}, std::move(out), want_grad({&x}),
                {x.node()});
}

Tensor scatter_rows(const Tensor& x, const std::vector<std::size_t>& indices,
                    std::size_t out_rows) {
  check(x.rank() == 2 && indices.size() == x.rows(),
        "scatter_rows: need one index per row");
  std::size_t c = x.cols();
  std::vector<double> out(out_rows * c, 0.0);
  std::vector<std::uint8_t> used(out_rows, 0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    check(indices[i] < out_rows, "scatter_rows: index out of bounds");
    check(!used[indices[i]], "scatter_rows: duplicate index " +
                                 std::to_string(indices[i]));
    used[indices[i]] = 1;
    std::memcpy(out.data() + indices[i] * c, x.data().data() + i * c,
                c * sizeof(double));
  }
  auto* n = new ScatterRowsNode;
  n->indices = indices;
  return finish(n, {out_rows, c}, std::move(out), want_grad({&x}), {x.node()});
}

// ---- row-wise normalization ops for alignment weights ------------------------------

namespace {

struct MinmaxRowsNode : Node {
  std::vector<std::size_t> amin, amax;
  std::vector<double> denom;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    std::size_t r = shape[0], c = shape[1];
    for (std::size_t i = 0; i < r; ++i) {
      const double* g = grad.data() + i * c;
      const double* y = data.data() + i * c;
      double* gx = x.grad.data() + i * c;
      double inv_d = 1.0 / denom[i];
      double gsum = 0.0, gysum = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        gx[j] += g[j] * inv_d;
        gsum += g[j];
        gysum += g[j] * y[j];
      }
      gx[amin[i]] -= gsum * inv_d;
      double t = gysum * inv_d;
      gx[amax[i]] -= t;
      gx[amin[i]] += t;
    }
  }
};

struct ThresholdZeroNode : Node {
  std::vector<std::uint8_t> kept;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (kept[i]) x.grad[i] += grad[i];
  }
};

struct RenormRowsNode : Node {
  std::vector<double> row_sum;
  void backward() override {
    Node& x = *parents[0];
    if (!x.requires_grad) return;
    x.ensure_grad();
    std::size_t r = shape[0], c = shape[1];
    for (std::size_t i = 0; i < r; ++i) {
      const double* g = grad.data() + i * c;
      const double* y = data.data() + i * c;
      double* gx = x.grad.data() + i * c;
      double inv_s = 1.0 / row_sum[i];
      double gydot = 0.0;
      for (std::size_t j = 0; j < c; ++j) gydot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j)
        gx[j] += (g[j] - gydot) * inv_s;
    }
  }
};

}  // namespace

Tensor minmax_normalize_rows(const Tensor& x, double epsilon) {
  check(x.rank() == 2 && x.cols() > 0, "minmax_normalize_rows: need 2-d tensor");
  std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c), denom(r);
  std::vector<std::size_t> amin(r), amax(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xr = x.data().data() + i * c;
    std::size_t lo = 0, hi = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (xr[j] < xr[lo]) lo = j;
      if (xr[j] > xr[hi]) hi = j;
    }
    amin[i] = lo;
    amax[i] = hi;
    double d = xr[hi] - xr[lo] + epsilon;
    denom[i] = d;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (xr[j] - xr[lo]) / d;
  }
  auto* n = new MinmaxRowsNode;
  n->amin = std::move(amin);
  n->amax = std::move(amax);
  n->denom = std::move(denom);
  return finish(n, x.shape(), std::move(out), want_grad({&x}), {x.node()});
}

Tensor threshold_zero(const Tensor& x, double sigma) {
  std::vector<double> out(x.size());
  std::vector<std::uint8_t> kept(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    bool k = x.at(i) >= sigma;
    kept[i] = k;
    out[i] = k ? x.at(i) : 0.0;
  }
  auto* n = new ThresholdZeroNode;
  n->kept = std::move(kept);
  return finish(n, x.shape(), std::move(out), want_grad({&x}), {x.node()});
}

Tensor renormalize_rows(const Tensor& x) {
  check(x.rank() == 2, "renormalize_rows: need 2-d tensor");
  std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(r * c), row_sum(r);
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x.at(i, j);
    check(s > 0.0, "renormalize_rows: row " + std::to_string(i) +
                       " has nonpositive sum " + std::to_string(s));
    row_sum[i] = s;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x.at(i, j) / s;
  }
  auto* n = new RenormRowsNode;
  n->row_sum = std::move(row_sum);
  return finish(n, x.shape(), std::move(out), want_grad({&x}), {x.node()});
}

bool all_finite(const Tensor& x) {
  for (double v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- gradient checker -------------------------------------------------------------

GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor>& inputs, double step, double abs_tol,
    std::size_t sample_coords, Rng* rng) {
  for (auto& t : inputs) t.zero_grad();
  Tensor loss = f(inputs);
  check(loss.size() == 1, "grad_check: f must be scalar-valued");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs)
    analytic.push_back(t.has_grad() ? t.grad()
                                    : std::vector<double>(t.size(), 0.0));

  GradCheckReport rep;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    std::vector<std::size_t> coords;
    std::size_t n = inputs[ti].size();
    if (sample_coords > 0 && sample_coords < n) {
      check(rng != nullptr, "grad_check: sampling needs an rng");
      for (std::size_t s = 0; s < sample_coords; ++s)
        coords.push_back(rng->uniform_index(n));
    } else {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    }
    for (std::size_t ci : coords) {
      auto& d = inputs[ti].mutable_data();
      double orig = d[ci];
      d[ci] = orig + step;
      double up = f(inputs).value();
      d[ci] = orig - step;
      double down = f(inputs).value();
      d[ci] = orig;
      double numeric = (up - down) / (2.0 * step);
      double a = analytic[ti][ci];
      double diff = std::abs(a - numeric);
      double rel = diff <= abs_tol
                       ? 0.0
                       : diff / std::max(std::abs(numeric), 1e-8);
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = ti;
        rep.worst_coord = ci;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace vidalign
