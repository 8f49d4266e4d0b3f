#include "vdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "vdet/error.hpp"

namespace vdet::diff {

std::size_t shape_size(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_to_string(shape_));
  }
}

template <typename T>
std::span<T> BasicTensor<T>::grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{0});
  return grad_;
}

template <typename T>
void BasicTensor<T>::zero_grad() noexcept {
  std::fill(grad_.begin(), grad_.end(), T{0});
}

template <typename T>
bool BasicTensor<T>::finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Var<T> Var<T>::constant(BasicTensor<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->own = std::move(value);
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::leaf(BasicTensor<T>& storage, bool requires_grad) {
  auto node = std::make_shared<Node<T>>();
  node->bound = &storage;
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

template <typename T>
Var<T> Var<T>::op(BasicTensor<T> value, std::vector<Var> parents,
                  std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->own = std::move(value);
  for (auto& p : parents) {
    if (!p.defined()) throw StateError("op parent is undefined");
    node->requires_grad = node->requires_grad || p.node_->requires_grad;
    node->parents.push_back(p.node_);
  }
  if (node->requires_grad) node->backward = std::move(backward);
  return Var(std::move(node));
}

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
  if (!node_) throw StateError("access to an undefined variable");
  return node_->tensor();
}

template <typename T>
BasicTensor<T>& Var<T>::tensor() {
  if (!node_) throw StateError("access to an undefined variable");
  return node_->tensor();
}

template <typename T>
void Var<T>::backward() {
  if (!node_) throw StateError("backward called without a recorded forward pass");
  if (node_->tensor().size() != 1) {
    throw ConfigError("backward requires a scalar root, got shape " +
                      shape_to_string(node_->tensor().shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->tensor().grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->tensor().has_grad()) n->backward(*n);
  }
}

namespace {

template <typename T>
bool wants_grad(const Node<T>& n, std::size_t parent) {
  return n.parents[parent]->requires_grad;
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  const auto& x = input.value();
  const auto& w = weight.value();
  const auto& b = bias.value();
  if (x.shape().size() != 3 || w.shape().size() != 4 || b.shape().size() != 1) {
    throw ConfigError("conv2d expects HWC input, HWIO weight and 1-D bias");
  }
  const std::size_t H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
  const std::size_t K = w.dim(0), Cout = w.dim(3);
  if (w.dim(1) != K || w.dim(2) != Cin || b.dim(0) != Cout) {
    throw ConfigError("conv2d shape mismatch: input " + shape_to_string(x.shape()) + ", weight " +
                      shape_to_string(w.shape()) + ", bias " + shape_to_string(b.shape()));
  }
  if (stride < 1 || pad < 0 || H + 2 * pad < K || W + 2 * pad < K) {
    throw ConfigError("conv2d: invalid stride/padding for input " + shape_to_string(x.shape()));
  }
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - K) / stride + 1;

  BasicTensor<T> out({Ho, Wo, Cout});
  const T* xp = x.data().data();
  const T* wp = w.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  for (std::size_t oy = 0; oy < Ho; ++oy) {
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      T* o = op + (oy * Wo + ox) * Cout;
      std::copy(bp, bp + Cout, o);
      for (std::size_t ky = 0; ky < K; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - pad;
        if (iy < 0 || iy >= static_cast<long>(H)) continue;
        for (std::size_t kx = 0; kx < K; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - pad;
          if (ix < 0 || ix >= static_cast<long>(W)) continue;
          const T* in = xp + (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Cin;
          const T* wk = wp + (ky * K + kx) * Cin * Cout;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            const T v = in[ci];
            const T* wr = wk + ci * Cout;
            for (std::size_t co = 0; co < Cout; ++co) o[co] += v * wr[co];
          }
        }
      }
    }
  }

  return Var<T>::op(std::move(out), {input, weight, bias},
                    [=](Node<T>& n) {
                      auto& xn = n.parents[0]->tensor();
                      auto& wn = n.parents[1]->tensor();
                      auto& bn = n.parents[2]->tensor();
                      const T* g = n.tensor().grad().data();
                      const bool gx = wants_grad(n, 0), gw = wants_grad(n, 1), gb = wants_grad(n, 2);
                      const T* xv = xn.data().data();
                      const T* wv = wn.data().data();
                      T* dx = gx ? xn.grad().data() : nullptr;
                      T* dw = gw ? wn.grad().data() : nullptr;
                      T* db = gb ? bn.grad().data() : nullptr;
                      for (std::size_t oy = 0; oy < Ho; ++oy) {
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                          const T* go = g + (oy * Wo + ox) * Cout;
                          if (db) {
                            for (std::size_t co = 0; co < Cout; ++co) db[co] += go[co];
                          }
                          if (!dx && !dw) continue;
                          for (std::size_t ky = 0; ky < K; ++ky) {
                            const long iy = static_cast<long>(oy * stride + ky) - pad;
                            if (iy < 0 || iy >= static_cast<long>(H)) continue;
                            for (std::size_t kx = 0; kx < K; ++kx) {
                              const long ix = static_cast<long>(ox * stride + kx) - pad;
                              if (ix < 0 || ix >= static_cast<long>(W)) continue;
                              const std::size_t in_off =
                                  (static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)) * Cin;
                              const std::size_t w_off = (ky * K + kx) * Cin * Cout;
                              for (std::size_t ci = 0; ci < Cin; ++ci) {
                                const T* wr = wv + w_off + ci * Cout;
                                if (dx) {
                                  T acc{0};
                                  for (std::size_t co = 0; co < Cout; ++co) acc += wr[co] * go[co];
                                  dx[in_off + ci] += acc;
                                }
                                if (dw) {
                                  const T v = xv[in_off + ci];
                                  T* dwr = dw + w_off + ci * Cout;
                                  for (std::size_t co = 0; co < Cout; ++co) dwr[co] += v * go[co];
                                }
                              }
                            }
                          }
                        }
                      }
                    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  const auto& xv = x.value();
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > T{0} ? xv[i] : slope * xv[i];
  return Var<T>::op(std::move(out), {x}, [slope](Node<T>& n) {
    auto& in = n.parents[0]->tensor();
    auto g = n.tensor().grad();
    auto d = in.grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += in[i] > T{0} ? g[i] : slope * g[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  const auto& xv = x.value();
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = T{1} / (T{1} + std::exp(-xv[i]));
  return Var<T>::op(std::move(out), {x}, [](Node<T>& n) {
    auto& y = n.tensor();
    auto g = y.grad();
    auto d = n.parents[0]->tensor().grad();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) {
    throw ConfigError("add: shape mismatch " + shape_to_string(av.shape()) + " vs " +
                      shape_to_string(bv.shape()));
  }
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return Var<T>::op(std::move(out), {a, b}, [](Node<T>& n) {
    auto g = n.tensor().grad();
    for (std::size_t p = 0; p < 2; ++p) {
      if (!wants_grad(n, p)) continue;
      auto d = n.parents[p]->tensor().grad();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total{0};
  for (T v : x.value().data()) total += v;
  return Var<T>::op(BasicTensor<T>({1}, std::vector<T>{total}), {x}, [](Node<T>& n) {
    const T g = n.tensor().grad()[0];
    for (T& d : n.parents[0]->tensor().grad()) d += g;
  });
}

template <typename T>
Var<T> mse(const Var<T>& x, const BasicTensor<T>& target) {
  const auto& xv = x.value();
  if (xv.shape() != target.shape()) throw ConfigError("mse: shape mismatch");
  T total{0};
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const T d = xv[i] - target[i];
    total += d * d;
  }
  const T n_inv = T{1} / static_cast<T>(xv.size());
  return Var<T>::op(BasicTensor<T>({1}, std::vector<T>{total * n_inv}), {x},
                    [target, n_inv](Node<T>& n) {
                      const T g = n.tensor().grad()[0];
                      auto& in = n.parents[0]->tensor();
                      auto d = in.grad();
                      for (std::size_t i = 0; i < d.size(); ++i) {
                        d[i] += g * T{2} * (in[i] - target[i]) * n_inv;
                      }
                    });
}

#define VDET_INSTANTIATE(T)                                                                \
  template class BasicTensor<T>;                                                           \
  template class Var<T>;                                                                   \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, int, int);       \
  template Var<T> leaky_relu<T>(const Var<T>&, T);                                         \
  template Var<T> sigmoid<T>(const Var<T>&);                                               \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                    \
  template Var<T> sum<T>(const Var<T>&);                                                   \
  template Var<T> mse<T>(const Var<T>&, const BasicTensor<T>&);

VDET_INSTANTIATE(float)
VDET_INSTANTIATE(double)

#undef VDET_INSTANTIATE

}  // namespace vdet::diff
