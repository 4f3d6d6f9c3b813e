#include "tal/diff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tal/diff/dft.hpp"
#include "tal/errors.hpp"

namespace tal::diff {
namespace {

std::size_t ceil_half(std::size_t n) { return (n + 1) / 2; }

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Time range [lo, hi) of output positions t for which in = stride*t + k - 1
// lands inside [0, length).
std::pair<std::size_t, std::size_t> conv_span(std::size_t out_len, std::size_t in_len,
                                              std::size_t stride, std::size_t k) {
  const std::size_t lo = (k == 0) ? 1 : 0;
  if (in_len + 1 < k + 1) return {0, 0};
  const std::size_t hi = std::min(out_len, (in_len - k) / stride + 1);
  return {std::min(lo, hi), hi};
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Linear: return "linear";
    case Op::Conv: return "conv";
    case Op::ConvTranspose: return "conv_transpose";
    case Op::MaxPool: return "max_pool";
    case Op::Relu: return "relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::GlobalAvgPool: return "global_avg_pool";
    case Op::LayerNorm: return "layer_norm";
    case Op::GroupNorm: return "group_norm";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::MulChannel: return "mul_channel";
    case Op::Sqrt: return "sqrt";
    case Op::Softmax: return "softmax";
    case Op::Dft: return "dft";
    case Op::IdftReal: return "idft_real";
    case Op::ComplexMul: return "complex_mul";
    case Op::Scale: return "scale";
    case Op::ShiftStack: return "shift_stack";
    case Op::SliceChannels: return "slice_channels";
    case Op::ConcatChannels: return "concat_channels";
    case Op::Sum: return "sum";
  }
  return "unknown";
}

const Array* Bindings::find(std::string_view name) const {
  if (const Array* own = owned_.find(name)) return own;
  for (const ParamSet* set : sets_) {
    if (const Array* found = set->find(name)) return found;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Construction

NodeId Graph::push(Op op, std::vector<NodeId> inputs, Attrs attrs) {
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw std::invalid_argument("graph input refers to unknown node " + std::to_string(in));
  }
  Node node;
  node.op = op;
  node.inputs = std::move(inputs);
  node.attrs = attrs;
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return nodes_.size() - 1;
}

NodeId Graph::push(Op op, std::vector<NodeId> inputs) { return push(op, std::move(inputs), Attrs{}); }

NodeId Graph::input(std::string name) {
  if (auto it = named_.find(name); it != named_.end()) return it->second;
  NodeId id = push(Op::Input, {});
  nodes_[id].name = name;
  named_.emplace(std::move(name), id);
  return id;
}

NodeId Graph::constant(Array value) {
  NodeId id = push(Op::Constant, {});
  nodes_[id].value = std::move(value);
  return id;
}

NodeId Graph::linear(NodeId x, NodeId w, NodeId b) { return push(Op::Linear, {x, w, b}); }

NodeId Graph::conv(NodeId x, NodeId w, NodeId b, std::size_t stride, std::size_t groups) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv: stride must be 1 or 2");
  Attrs a;
  a.stride = stride;
  a.groups = groups;
  return push(Op::Conv, {x, w, b}, a);
}

NodeId Graph::conv_transpose(NodeId x, NodeId w, NodeId b, std::size_t out_length, std::size_t groups) {
  Attrs a;
  a.length = out_length;
  a.groups = groups;
  return push(Op::ConvTranspose, {x, w, b}, a);
}

NodeId Graph::max_pool(NodeId x) { return push(Op::MaxPool, {x}); }
NodeId Graph::relu(NodeId x) { return push(Op::Relu, {x}); }
NodeId Graph::sigmoid(NodeId x) { return push(Op::Sigmoid, {x}); }
NodeId Graph::sqrt(NodeId x) { return push(Op::Sqrt, {x}); }
NodeId Graph::global_avg_pool(NodeId x) { return push(Op::GlobalAvgPool, {x}); }
NodeId Graph::layer_norm(NodeId x, NodeId s, NodeId b) { return push(Op::LayerNorm, {x, s, b}); }

NodeId Graph::group_norm(NodeId x, NodeId s, NodeId b, std::size_t groups) {
  Attrs a;
  a.groups = groups;
  return push(Op::GroupNorm, {x, s, b}, a);
}

NodeId Graph::add(NodeId a, NodeId b) { return push(Op::Add, {a, b}); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(Op::Mul, {a, b}); }
NodeId Graph::mul_channel(NodeId x, NodeId w) { return push(Op::MulChannel, {x, w}); }

NodeId Graph::scale(NodeId x, double factor) {
  Attrs a;
  a.factor = factor;
  return push(Op::Scale, {x}, a);
}

NodeId Graph::softmax(NodeId x, std::size_t axis) {
  if (axis > 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
  Attrs a;
  a.axis = axis;
  return push(Op::Softmax, {x}, a);
}

NodeId Graph::dft(NodeId x) { return push(Op::Dft, {x}); }
NodeId Graph::idft_real(NodeId z) { return push(Op::IdftReal, {z}); }
NodeId Graph::complex_mul(NodeId a, NodeId b) { return push(Op::ComplexMul, {a, b}); }

NodeId Graph::shift_stack(NodeId x, std::size_t bins, int direction) {
  if (direction != 1 && direction != -1) throw std::invalid_argument("shift_stack: direction must be +1 or -1");
  Attrs a;
  a.length = bins;
  a.direction = direction;
  return push(Op::ShiftStack, {x}, a);
}

NodeId Graph::slice_channels(NodeId x, std::size_t begin, std::size_t end) {
  if (end <= begin) throw std::invalid_argument("slice_channels: empty range");
  Attrs a;
  a.begin = begin;
  a.end = end;
  return push(Op::SliceChannels, {x}, a);
}

NodeId Graph::concat_channels(NodeId a, NodeId b) { return push(Op::ConcatChannels, {a, b}); }
NodeId Graph::sum(NodeId x) { return push(Op::Sum, {x}); }

// ---------------------------------------------------------------------------
// Forward

void Graph::forward(const Bindings& bindings) {
  evaluated_ = false;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    Node& node = nodes_[id];
    node.has_grad = false;
    node.grad = Array();
    evaluate(id, bindings);
    if (!node.value.all_finite()) {
      throw NumericError("node " + std::to_string(id) + " (" + std::string(op_name(node.op)) +
                         ") produced a non-finite value");
    }
  }
  evaluated_ = true;
}

const Array& Graph::value(NodeId id) const {
  if (!evaluated_ && nodes_.at(id).op != Op::Constant) throw std::logic_error("graph value read before forward");
  return nodes_.at(id).value;
}

void Graph::evaluate(NodeId id, const Bindings& bindings) {
  Node& node = nodes_[id];
  const Attrs& at = node.attrs;
  auto in = [&](std::size_t k) -> const Array& { return nodes_[node.inputs[k]].value; };
  auto fail = [&](const std::string& msg) { throw ShapeError(id, std::string(op_name(node.op)) + ": " + msg); };
  auto need_rank2 = [&](const Array& a, const char* what) {
    if (a.rank() != 2) fail(std::string(what) + " must be rank 2, got " + to_string(a.shape()));
  };

  switch (node.op) {
    case Op::Input: {
      const Array* bound = bindings.find(node.name);
      if (bound == nullptr) throw ShapeError(id, "input '" + node.name + "' is not bound");
      node.value = *bound;
      break;
    }
    case Op::Constant:
      break;
    case Op::Linear: {
      const Array& x = in(0);
      const Array& w = in(1);
      const Array& b = in(2);
      need_rank2(x, "x");
      need_rank2(w, "weight");
      const std::size_t out = w.dim(0), cin = w.dim(1), T = x.cols();
      if (x.rows() != cin) fail("weight expects " + std::to_string(cin) + " channels, got " + std::to_string(x.rows()));
      if (b.size() != out) fail("bias length " + std::to_string(b.size()) + " != " + std::to_string(out));
      Array y({out, T});
      for (std::size_t o = 0; o < out; ++o) {
        double* yr = y.row(o);
        std::fill(yr, yr + T, b[o]);
        for (std::size_t i = 0; i < cin; ++i) {
          const double wv = w.at(o, i);
          const double* xr = x.row(i);
          for (std::size_t t = 0; t < T; ++t) yr[t] += wv * xr[t];
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::Conv: {
      const Array& x = in(0);
      const Array& w = in(1);
      const Array& b = in(2);
      need_rank2(x, "x");
      if (w.rank() != 3 || w.dim(2) != 3) fail("weight must be (out, in/groups, 3), got " + to_string(w.shape()));
      const std::size_t cin = x.rows(), T = x.cols(), out = w.dim(0), per = w.dim(1);
      const std::size_t g = at.groups == kDepthwise ? cin : at.groups;
      if (g == 0 || cin % g != 0 || out % g != 0 || per * g != cin) {
        fail("channel/group mismatch: x has " + std::to_string(cin) + " channels, weight " + to_string(w.shape()) +
             ", groups " + std::to_string(g));
      }
      if (b.size() != out) fail("bias length mismatch");
      const std::size_t s = at.stride;
      const std::size_t To = s == 1 ? T : ceil_half(T);
      const std::size_t out_per = out / g;
      Array y({out, To});
      for (std::size_t o = 0; o < out; ++o) {
        double* yr = y.row(o);
        std::fill(yr, yr + To, b[o]);
        const std::size_t group = o / out_per;
        for (std::size_t ii = 0; ii < per; ++ii) {
          const double* xr = x.row(group * per + ii);
          for (std::size_t k = 0; k < 3; ++k) {
            const double wv = w[(o * per + ii) * 3 + k];
            auto [lo, hi] = conv_span(To, T, s, k);
            if (s == 1) {
              for (std::size_t t = lo; t < hi; ++t) yr[t] += wv * xr[t + k - 1];
            } else {
              for (std::size_t t = lo; t < hi; ++t) yr[t] += wv * xr[s * t + k - 1];
            }
          }
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::ConvTranspose: {
      const Array& x = in(0);
      const Array& w = in(1);
      const Array& b = in(2);
      need_rank2(x, "x");
      if (w.rank() != 3 || w.dim(2) != 3) fail("weight must be (out, in/groups, 3), got " + to_string(w.shape()));
      const std::size_t cin = x.rows(), n = x.cols(), out = w.dim(0), per = w.dim(1);
      const std::size_t g = at.groups == kDepthwise ? cin : at.groups;
      if (g == 0 || cin % g != 0 || out % g != 0 || per * g != cin) fail("channel/group mismatch");
      if (b.size() != out) fail("bias length mismatch");
      const std::size_t L = at.length;
      if (L != 2 * n && L + 1 != 2 * n) {
        fail("output length " + std::to_string(L) + " incompatible with input length " + std::to_string(n));
      }
      const std::size_t out_per = out / g;
      Array y({out, L});
      for (std::size_t o = 0; o < out; ++o) {
        double* yr = y.row(o);
        std::fill(yr, yr + L, b[o]);
        const std::size_t group = o / out_per;
        for (std::size_t ii = 0; ii < per; ++ii) {
          const double* xr = x.row(group * per + ii);
          for (std::size_t k = 0; k < 3; ++k) {
            const double wv = w[(o * per + ii) * 3 + k];
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t j = 2 * i + k;
              if (j == 0 || j - 1 >= L) continue;
              yr[j - 1] += wv * xr[i];
            }
          }
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::MaxPool: {
      const Array& x = in(0);
      need_rank2(x, "x");
      const std::size_t C = x.rows(), T = x.cols(), To = ceil_half(T);
      Array y({C, To});
      node.index_cache.assign(C * To, 0);
      for (std::size_t c = 0; c < C; ++c) {
        const double* xr = x.row(c);
        for (std::size_t t = 0; t < To; ++t) {
          std::size_t best = 2 * t;
          if (2 * t + 1 < T && xr[2 * t + 1] > xr[best]) best = 2 * t + 1;
          y.at(c, t) = xr[best];
          node.index_cache[c * To + t] = best;
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::Relu: {
      Array y = in(0);
      for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
      node.value = std::move(y);
      break;
    }
    case Op::Sigmoid: {
      Array y = in(0);
      for (double& v : y.values()) v = sigmoid_value(v);
      node.value = std::move(y);
      break;
    }
    case Op::Sqrt: {
      Array y = in(0);
      for (double& v : y.values()) {
        if (v < 0.0) fail("negative input to sqrt");
        v = std::sqrt(v);
      }
      node.value = std::move(y);
      break;
    }
    case Op::GlobalAvgPool: {
      const Array& x = in(0);
      need_rank2(x, "x");
      const std::size_t C = x.rows(), T = x.cols();
      Array y({C, 1});
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        const double* xr = x.row(c);
        for (std::size_t t = 0; t < T; ++t) acc += xr[t];
        y[c] = acc / static_cast<double>(T);
      }
      node.value = std::move(y);
      break;
    }
    case Op::LayerNorm: {
      const Array& x = in(0);
      const Array& sc = in(1);
      const Array& sh = in(2);
      need_rank2(x, "x");
      const std::size_t C = x.rows(), T = x.cols();
      if (sc.size() != C || sh.size() != C) fail("scale/shift length must equal channel count");
      Array y({C, T});
      // cache: normalized values (C*T) then inverse std per t (T)
      node.cache.assign(C * T + T, 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        double mean = 0.0;
        for (std::size_t c = 0; c < C; ++c) mean += x.at(c, t);
        mean /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double d = x.at(c, t) - mean;
          var += d * d;
        }
        var /= static_cast<double>(C);
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        node.cache[C * T + t] = inv;
        for (std::size_t c = 0; c < C; ++c) {
          const double xhat = (x.at(c, t) - mean) * inv;
          node.cache[c * T + t] = xhat;
          y.at(c, t) = xhat * sc[c] + sh[c];
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::GroupNorm: {
      const Array& x = in(0);
      const Array& sc = in(1);
      const Array& sh = in(2);
      need_rank2(x, "x");
      const std::size_t C = x.rows(), T = x.cols(), G = at.groups;
      if (G == 0 || C % G != 0) fail("channels " + std::to_string(C) + " not divisible by groups " + std::to_string(G));
      if (sc.size() != C || sh.size() != C) fail("scale/shift length must equal channel count");
      const std::size_t per = C / G;
      const double count = static_cast<double>(per * T);
      Array y({C, T});
      node.cache.assign(C * T + G, 0.0);
      for (std::size_t g = 0; g < G; ++g) {
        double mean = 0.0;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) {
          const double* xr = x.row(c);
          for (std::size_t t = 0; t < T; ++t) mean += xr[t];
        }
        mean /= count;
        double var = 0.0;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) {
          const double* xr = x.row(c);
          for (std::size_t t = 0; t < T; ++t) {
            const double d = xr[t] - mean;
            var += d * d;
          }
        }
        var /= count;
        const double inv = 1.0 / std::sqrt(var + kNormEps);
        node.cache[C * T + g] = inv;
        for (std::size_t c = g * per; c < (g + 1) * per; ++c) {
          const double* xr = x.row(c);
          double* yr = y.row(c);
          for (std::size_t t = 0; t < T; ++t) {
            const double xhat = (xr[t] - mean) * inv;
            node.cache[c * T + t] = xhat;
            yr[t] = xhat * sc[c] + sh[c];
          }
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::Add:
    case Op::Mul: {
      const Array& a = in(0);
      const Array& b = in(1);
      if (a.shape() != b.shape()) fail("shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
      Array y = a;
      if (node.op == Op::Add) {
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
      } else {
        for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b[i];
      }
      node.value = std::move(y);
      break;
    }
    case Op::MulChannel: {
      const Array& x = in(0);
      const Array& w = in(1);
      need_rank2(x, "x");
      if (w.size() != x.rows()) fail("channel weight length " + std::to_string(w.size()) + " != " + std::to_string(x.rows()));
      Array y = x;
      const std::size_t T = x.cols();
      for (std::size_t c = 0; c < x.rows(); ++c) {
        double* yr = y.row(c);
        for (std::size_t t = 0; t < T; ++t) yr[t] *= w[c];
      }
      node.value = std::move(y);
      break;
    }
    case Op::Scale: {
      Array y = in(0);
      for (double& v : y.values()) v *= at.factor;
      node.value = std::move(y);
      break;
    }
    case Op::Softmax: {
      const Array& x = in(0);
      need_rank2(x, "x");
      const std::size_t R = x.rows(), T = x.cols();
      Array y({R, T});
      if (at.axis == 0) {
        for (std::size_t t = 0; t < T; ++t) {
          double mx = x.at(0, t);
          for (std::size_t r = 1; r < R; ++r) mx = std::max(mx, x.at(r, t));
          double z = 0.0;
          for (std::size_t r = 0; r < R; ++r) z += (y.at(r, t) = std::exp(x.at(r, t) - mx));
          for (std::size_t r = 0; r < R; ++r) y.at(r, t) /= z;
        }
      } else {
        for (std::size_t r = 0; r < R; ++r) {
          const double* xr = x.row(r);
          double* yr = y.row(r);
          const double mx = *std::max_element(xr, xr + T);
          double z = 0.0;
          for (std::size_t t = 0; t < T; ++t) z += (yr[t] = std::exp(xr[t] - mx));
          for (std::size_t t = 0; t < T; ++t) yr[t] /= z;
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::Dft: {
      const Array& x = in(0);
      need_rank2(x, "x");
      const std::size_t C = x.rows(), T = x.cols();
      Array y({2 * C, T});
      for (std::size_t c = 0; c < C; ++c) {
        double* re = y.row(c);
        double* im = y.row(C + c);
        std::copy(x.row(c), x.row(c) + T, re);
        detail::transform(re, im, T, false);
      }
      node.value = std::move(y);
      break;
    }
    case Op::IdftReal: {
      const Array& z = in(0);
      need_rank2(z, "spectrum");
      if (z.rows() % 2 != 0) fail("stacked spectrum needs an even row count");
      const std::size_t C = z.rows() / 2, T = z.cols();
      Array y({C, T});
      std::vector<double> im(T);
      const double inv = 1.0 / static_cast<double>(T);
      for (std::size_t c = 0; c < C; ++c) {
        double* re = y.row(c);
        std::copy(z.row(c), z.row(c) + T, re);
        std::copy(z.row(C + c), z.row(C + c) + T, im.begin());
        detail::transform(re, im.data(), T, true);
        for (std::size_t t = 0; t < T; ++t) re[t] *= inv;
      }
      node.value = std::move(y);
      break;
    }
    case Op::ComplexMul: {
      const Array& a = in(0);
      const Array& b = in(1);
      need_rank2(a, "a");
      if (a.shape() != b.shape()) fail("shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
      if (a.rows() % 2 != 0) fail("stacked complex arrays need an even row count");
      const std::size_t C = a.rows() / 2, T = a.cols();
      Array y({2 * C, T});
      for (std::size_t c = 0; c < C; ++c) {
        const double *ar = a.row(c), *ai = a.row(C + c), *br = b.row(c), *bi = b.row(C + c);
        double *yr = y.row(c), *yi = y.row(C + c);
        for (std::size_t t = 0; t < T; ++t) {
          yr[t] = ar[t] * br[t] - ai[t] * bi[t];
          yi[t] = ar[t] * bi[t] + ai[t] * br[t];
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::ShiftStack: {
      const Array& x = in(0);
      need_rank2(x, "x");
      if (x.rows() != 1) fail("expects a single-row input");
      const std::size_t T = x.cols(), B = at.length;
      Array y({B + 1, T}, kShiftMask);
      for (std::size_t b = 0; b <= B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
          const long src = static_cast<long>(t) + at.direction * static_cast<long>(b);
          if (src >= 0 && src < static_cast<long>(T)) y.at(b, t) = x[static_cast<std::size_t>(src)];
        }
      }
      node.value = std::move(y);
      break;
    }
    case Op::SliceChannels: {
      const Array& x = in(0);
      need_rank2(x, "x");
      if (at.end > x.rows()) fail("slice end beyond channel count");
      const std::size_t T = x.cols();
      Array y({at.end - at.begin, T});
      std::copy(x.row(at.begin), x.row(at.begin) + (at.end - at.begin) * T, y.data());
      node.value = std::move(y);
      break;
    }
    case Op::ConcatChannels: {
      const Array& a = in(0);
      const Array& b = in(1);
      need_rank2(a, "a");
      need_rank2(b, "b");
      if (a.cols() != b.cols()) fail("time length mismatch");
      Array y({a.rows() + b.rows(), a.cols()});
      std::copy(a.data(), a.data() + a.size(), y.data());
      std::copy(b.data(), b.data() + b.size(), y.data() + a.size());
      node.value = std::move(y);
      break;
    }
    case Op::Sum: {
      double acc = 0.0;
      for (double v : in(0).values()) acc += v;
      node.value = Array::scalar(acc);
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Backward

Array& Graph::grad_slot(NodeId id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Array(node.value.shape());
    node.has_grad = true;
  }
  return node.grad;
}

void Graph::backward(NodeId output, const Array& seed) {
  const std::pair<NodeId, Array> one{output, seed};
  backward(std::span(&one, 1));
}

void Graph::backward(std::span<const std::pair<NodeId, Array>> seeds) {
  if (!evaluated_) throw std::logic_error("backward called before forward");
  for (Node& node : nodes_) {
    node.has_grad = false;
    node.grad = Array();
  }
  NodeId last = 0;
  for (const auto& [id, seed] : seeds) {
    if (id >= nodes_.size()) throw std::invalid_argument("backward seed refers to unknown node");
    if (seed.shape() != nodes_[id].value.shape()) {
      throw ShapeError(id, "seed shape " + to_string(seed.shape()) + " != output shape " +
                               to_string(nodes_[id].value.shape()));
    }
    Array& g = grad_slot(id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    last = std::max(last, id);
  }
  for (NodeId id = last + 1; id-- > 0;) {
    if (nodes_[id].has_grad) propagate(id);
  }
}

void Graph::propagate(NodeId id) {
  Node& node = nodes_[id];
  if (node.op == Op::Input || node.op == Op::Constant) return;
  const Attrs& at = node.attrs;
  Array g = node.grad;
  if (auto it = backward_scale_.find(node.op); it != backward_scale_.end()) {
    for (double& v : g.values()) v *= it->second;
  }
  auto in = [&](std::size_t k) -> const Array& { return nodes_[node.inputs[k]].value; };
  auto dst = [&](std::size_t k) -> Array& { return grad_slot(node.inputs[k]); };

  switch (node.op) {
    case Op::Input:
    case Op::Constant:
      break;
    case Op::Linear: {
      const Array& x = in(0);
      const Array& w = in(1);
      const std::size_t out = w.dim(0), cin = w.dim(1), T = x.cols();
      Array& dx = dst(0);
      Array& dw = dst(1);
      Array& db = dst(2);
      for (std::size_t o = 0; o < out; ++o) {
        const double* gr = g.row(o);
        double bsum = 0.0;
        for (std::size_t t = 0; t < T; ++t) bsum += gr[t];
        db[o] += bsum;
        for (std::size_t i = 0; i < cin; ++i) {
          const double* xr = x.row(i);
          double* dxr = dx.row(i);
          const double wv = w.at(o, i);
          double acc = 0.0;
          for (std::size_t t = 0; t < T; ++t) {
            acc += gr[t] * xr[t];
            dxr[t] += wv * gr[t];
          }
          dw.at(o, i) += acc;
        }
      }
      break;
    }
    case Op::Conv: {
      const Array& x = in(0);
      const Array& w = in(1);
      const std::size_t T = x.cols(), out = w.dim(0), per = w.dim(1);
      const std::size_t g_count = at.groups == kDepthwise ? x.rows() : at.groups;
      const std::size_t s = at.stride, To = g.cols(), out_per = out / g_count;
      Array& dx = dst(0);
      Array& dw = dst(1);
      Array& db = dst(2);
      for (std::size_t o = 0; o < out; ++o) {
        const double* gr = g.row(o);
        double bsum = 0.0;
        for (std::size_t t = 0; t < To; ++t) bsum += gr[t];
        db[o] += bsum;
        const std::size_t group = o / out_per;
        for (std::size_t ii = 0; ii < per; ++ii) {
          const std::size_t ch = group * per + ii;
          const double* xr = x.row(ch);
          double* dxr = dx.row(ch);
          for (std::size_t k = 0; k < 3; ++k) {
            const std::size_t widx = (o * per + ii) * 3 + k;
            const double wv = w[widx];
            auto [lo, hi] = conv_span(To, T, s, k);
            double acc = 0.0;
            if (s == 1) {
              for (std::size_t t = lo; t < hi; ++t) {
                acc += gr[t] * xr[t + k - 1];
                dxr[t + k - 1] += wv * gr[t];
              }
            } else {
              for (std::size_t t = lo; t < hi; ++t) {
                const std::size_t j = s * t + k - 1;
                acc += gr[t] * xr[j];
                dxr[j] += wv * gr[t];
              }
            }
            dw[widx] += acc;
          }
        }
      }
      break;
    }
    case Op::ConvTranspose: {
      const Array& x = in(0);
      const Array& w = in(1);
      const std::size_t n = x.cols(), out = w.dim(0), per = w.dim(1);
      const std::size_t g_count = at.groups == kDepthwise ? x.rows() : at.groups;
      const std::size_t L = at.length, out_per = out / g_count;
      Array& dx = dst(0);
      Array& dw = dst(1);
      Array& db = dst(2);
      for (std::size_t o = 0; o < out; ++o) {
        const double* gr = g.row(o);
        double bsum = 0.0;
        for (std::size_t j = 0; j < L; ++j) bsum += gr[j];
        db[o] += bsum;
        const std::size_t group = o / out_per;
        for (std::size_t ii = 0; ii < per; ++ii) {
          const std::size_t ch = group * per + ii;
          const double* xr = x.row(ch);
          double* dxr = dx.row(ch);
          for (std::size_t k = 0; k < 3; ++k) {
            const std::size_t widx = (o * per + ii) * 3 + k;
            const double wv = w[widx];
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t j = 2 * i + k;
              if (j == 0 || j - 1 >= L) continue;
              acc += gr[j - 1] * xr[i];
              dxr[i] += wv * gr[j - 1];
            }
            dw[widx] += acc;
          }
        }
      }
      break;
    }
    case Op::MaxPool: {
      Array& dx = dst(0);
      const std::size_t C = g.rows(), To = g.cols();
      for (std::size_t c = 0; c < C; ++c) {
        double* dxr = dx.row(c);
        for (std::size_t t = 0; t < To; ++t) dxr[node.index_cache[c * To + t]] += g.at(c, t);
      }
      break;
    }
    case Op::Relu: {
      const Array& x = in(0);
      Array& dx = dst(0);
      // subgradient 0 at x == 0
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) dx[i] += g[i];
      }
      break;
    }
    case Op::Sigmoid: {
      const Array& y = node.value;
      Array& dx = dst(0);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case Op::Sqrt: {
      const Array& x = in(0);
      Array& dx = dst(0);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * 0.5 / std::sqrt(std::max(x[i], kSqrtGradFloor));
      break;
    }
    case Op::GlobalAvgPool: {
      Array& dx = dst(0);
      const std::size_t C = dx.rows(), T = dx.cols();
      const double inv = 1.0 / static_cast<double>(T);
      for (std::size_t c = 0; c < C; ++c) {
        double* dxr = dx.row(c);
        for (std::size_t t = 0; t < T; ++t) dxr[t] += g[c] * inv;
      }
      break;
    }
    case Op::LayerNorm: {
      const Array& sc = in(1);
      const std::size_t C = g.rows(), T = g.cols();
      Array& dx = dst(0);
      Array& dsc = dst(1);
      Array& dsh = dst(2);
      const double n = static_cast<double>(C);
      for (std::size_t t = 0; t < T; ++t) {
        const double inv = node.cache[C * T + t];
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double xhat = node.cache[c * T + t];
          const double gv = g.at(c, t);
          dsc[c] += gv * xhat;
          dsh[c] += gv;
          const double d = gv * sc[c];
          sum_d += d;
          sum_dx += d * xhat;
        }
        for (std::size_t c = 0; c < C; ++c) {
          const double xhat = node.cache[c * T + t];
          const double d = g.at(c, t) * sc[c];
          dx.at(c, t) += inv * (d - sum_d / n - xhat * sum_dx / n);
        }
      }
      break;
    }
    case Op::GroupNorm: {
      const Array& sc = in(1);
      const std::size_t C = g.rows(), T = g.cols(), G = at.groups, per = C / G;
      Array& dx = dst(0);
      Array& dsc = dst(1);
      Array& dsh = dst(2);
      const double n = static_cast<double>(per * T);
      for (std::size_t grp = 0; grp < G; ++grp) {
        const double inv = node.cache[C * T + grp];
        double sum_d = 0.0, sum_dx = 0.0;
        for (std::size_t c = grp * per; c < (grp + 1) * per; ++c) {
          const double* gr = g.row(c);
          double sc_acc = 0.0, sh_acc = 0.0;
          for (std::size_t t = 0; t < T; ++t) {
            const double xhat = node.cache[c * T + t];
            sc_acc += gr[t] * xhat;
            sh_acc += gr[t];
            const double d = gr[t] * sc[c];
            sum_d += d;
            sum_dx += d * xhat;
          }
          dsc[c] += sc_acc;
          dsh[c] += sh_acc;
        }
        for (std::size_t c = grp * per; c < (grp + 1) * per; ++c) {
          const double* gr = g.row(c);
          double* dxr = dx.row(c);
          for (std::size_t t = 0; t < T; ++t) {
            const double xhat = node.cache[c * T + t];
            dxr[t] += inv * (gr[t] * sc[c] - sum_d / n - xhat * sum_dx / n);
          }
        }
      }
      break;
    }
    case Op::Add: {
      Array& da = dst(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      Array& db = dst(1);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      break;
    }
    case Op::Mul: {
      const Array& a = in(0);
      const Array& b = in(1);
      Array& da = dst(0);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
      Array& db = dst(1);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
      break;
    }
    case Op::MulChannel: {
      const Array& x = in(0);
      const Array& w = in(1);
      const std::size_t C = x.rows(), T = x.cols();
      Array& dx = dst(0);
      Array& dw = dst(1);
      for (std::size_t c = 0; c < C; ++c) {
        const double* gr = g.row(c);
        const double* xr = x.row(c);
        double* dxr = dx.row(c);
        double acc = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
          acc += gr[t] * xr[t];
          dxr[t] += gr[t] * w[c];
        }
        dw[c] += acc;
      }
      break;
    }
    case Op::Scale: {
      Array& dx = dst(0);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * at.factor;
      break;
    }
    case Op::Softmax: {
      const Array& y = node.value;
      Array& dx = dst(0);
      const std::size_t R = y.rows(), T = y.cols();
      if (at.axis == 0) {
        for (std::size_t t = 0; t < T; ++t) {
          double dot = 0.0;
          for (std::size_t r = 0; r < R; ++r) dot += g.at(r, t) * y.at(r, t);
          for (std::size_t r = 0; r < R; ++r) dx.at(r, t) += y.at(r, t) * (g.at(r, t) - dot);
        }
      } else {
        for (std::size_t r = 0; r < R; ++r) {
          double dot = 0.0;
          for (std::size_t t = 0; t < T; ++t) dot += g.at(r, t) * y.at(r, t);
          for (std::size_t t = 0; t < T; ++t) dx.at(r, t) += y.at(r, t) * (g.at(r, t) - dot);
        }
      }
      break;
    }
    case Op::Dft: {
      // x_bar[t] = sum_u gr[u] cos(2 pi u t/T) - gi[u] sin(2 pi u t/T)
      Array& dx = dst(0);
      const std::size_t C = dx.rows(), T = dx.cols();
      std::vector<double> re(T), im(T);
      for (std::size_t c = 0; c < C; ++c) {
        std::copy(g.row(c), g.row(c) + T, re.begin());
        std::copy(g.row(C + c), g.row(C + c) + T, im.begin());
        detail::transform(re.data(), im.data(), T, true);
        double* dxr = dx.row(c);
        for (std::size_t t = 0; t < T; ++t) dxr[t] += re[t];
      }
      break;
    }
    case Op::IdftReal: {
      // (zr_bar, zi_bar) = dft(g) / T
      Array& dz = dst(0);
      const std::size_t C = g.rows(), T = g.cols();
      const double inv = 1.0 / static_cast<double>(T);
      std::vector<double> re(T), im(T);
      for (std::size_t c = 0; c < C; ++c) {
        std::copy(g.row(c), g.row(c) + T, re.begin());
        std::fill(im.begin(), im.end(), 0.0);
        detail::transform(re.data(), im.data(), T, false);
        double* dr = dz.row(c);
        double* di = dz.row(C + c);
        for (std::size_t u = 0; u < T; ++u) {
          dr[u] += re[u] * inv;
          di[u] += im[u] * inv;
        }
      }
      break;
    }
    case Op::ComplexMul: {
      const Array& a = in(0);
      const Array& b = in(1);
      const std::size_t C = a.rows() / 2, T = a.cols();
      Array& da = dst(0);
      Array& db = dst(1);
      for (std::size_t c = 0; c < C; ++c) {
        const double *ar = a.row(c), *ai = a.row(C + c), *br = b.row(c), *bi = b.row(C + c);
        const double *gr = g.row(c), *gi = g.row(C + c);
        double *dar = da.row(c), *dai = da.row(C + c), *dbr = db.row(c), *dbi = db.row(C + c);
        for (std::size_t t = 0; t < T; ++t) {
          dar[t] += gr[t] * br[t] + gi[t] * bi[t];
          dai[t] += -gr[t] * bi[t] + gi[t] * br[t];
          dbr[t] += gr[t] * ar[t] + gi[t] * ai[t];
          dbi[t] += -gr[t] * ai[t] + gi[t] * ar[t];
        }
      }
      break;
    }
    case Op::ShiftStack: {
      Array& dx = dst(0);
      const std::size_t T = dx.cols(), B = at.length;
      for (std::size_t b = 0; b <= B; ++b) {
        for (std::size_t t = 0; t < T; ++t) {
          const long src = static_cast<long>(t) + at.direction * static_cast<long>(b);
          if (src >= 0 && src < static_cast<long>(T)) dx[static_cast<std::size_t>(src)] += g.at(b, t);
        }
      }
      break;
    }
    case Op::SliceChannels: {
      Array& dx = dst(0);
      double* base = dx.row(at.begin);
      for (std::size_t i = 0; i < g.size(); ++i) base[i] += g[i];
      break;
    }
    case Op::ConcatChannels: {
      Array& da = dst(0);
      Array& db = dst(1);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i];
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[da.size() + i];
      break;
    }
    case Op::Sum: {
      Array& dx = dst(0);
      for (double& v : dx.values()) v += g[0];
      break;
    }
  }
}

Array Graph::grad(NodeId id) const {
  const Node& node = nodes_.at(id);
  if (node.has_grad) return node.grad;
  return Array(node.value.shape());
}

std::map<std::string, Array> Graph::input_gradients() const {
  std::map<std::string, Array> out;
  for (const auto& [name, id] : named_) out.emplace(name, grad(id));
  return out;
}

}  // namespace tal::diff
