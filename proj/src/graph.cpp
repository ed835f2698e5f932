#include "mtask/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mtask {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::MatMul: return "matmul";
    case Op::Conv2d: return "conv2d";
    case Op::MaxPool2d: return "maxpool2d";
    case Op::Relu: return "relu";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Abs: return "abs";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::MeanReduce: return "mean";
    case Op::VarReduce: return "variance";
    case Op::SumReduce: return "sum";
    case Op::Concat: return "concat";
    case Op::Broadcast: return "broadcast";
    case Op::Reshape: return "reshape";
  }
  return "unknown";
}

namespace {

// C[M,N] += A[M,K] * B[K,N]
void mm_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const double* arow = A + static_cast<size_t>(i) * K;
    double* crow = C + static_cast<size_t>(i) * N;
    for (int k = 0; k < K; ++k) {
      double a = arow[k];
      const double* brow = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_abt_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    const double* arow = A + static_cast<size_t>(i) * K;
    for (int j = 0; j < N; ++j) {
      const double* brow = B + static_cast<size_t>(j) * K;
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      C[static_cast<size_t>(i) * N + j] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
void mm_atb_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const double* arow = A + static_cast<size_t>(m) * K;
    const double* brow = B + static_cast<size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      double a = arow[k];
      double* crow = C + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
}

// x [IC,H,W] -> cols [IC*KH*KW, OH*OW], zero padded
void im2col(const double* x, int IC, int H, int W, int KH, int KW, int stride, int pad, int OH,
            int OW, double* cols) {
  int row = 0;
  for (int c = 0; c < IC; ++c) {
    const double* xc = x + static_cast<size_t>(c) * H * W;
    for (int ky = 0; ky < KH; ++ky) {
      for (int kx = 0; kx < KW; ++kx, ++row) {
        double* dst = cols + static_cast<size_t>(row) * OH * OW;
        int o = 0;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < OW; ++ox, ++o) dst[o] = 0.0;
            continue;
          }
          const double* xrow = xc + static_cast<size_t>(iy) * W;
          for (int ox = 0; ox < OW; ++ox, ++o) {
            int ix = ox * stride - pad + kx;
            dst[o] = (ix >= 0 && ix < W) ? xrow[ix] : 0.0;
          }
        }
      }
    }
  }
}

// cols [IC*KH*KW, OH*OW] accumulated back into x [IC,H,W]
void col2im_acc(const double* cols, int IC, int H, int W, int KH, int KW, int stride, int pad,
                int OH, int OW, double* x) {
  int row = 0;
  for (int c = 0; c < IC; ++c) {
    double* xc = x + static_cast<size_t>(c) * H * W;
    for (int ky = 0; ky < KH; ++ky) {
      for (int kx = 0; kx < KW; ++kx, ++row) {
        const double* src = cols + static_cast<size_t>(row) * OH * OW;
        int o = 0;
        for (int oy = 0; oy < OH; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            o += OW;
            continue;
          }
          double* xrow = xc + static_cast<size_t>(iy) * W;
          for (int ox = 0; ox < OW; ++ox, ++o) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) xrow[ix] += src[o];
          }
        }
      }
    }
  }
}

enum class BinMode { Same, ScalarL, ScalarR, FeatL, FeatR };

BinMode resolve_bin(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return BinMode::Same;
  if (numel_of(b) == 1) return BinMode::ScalarR;
  if (numel_of(a) == 1) return BinMode::ScalarL;
  if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return BinMode::FeatR;
  if (b.size() == 2 && a.size() == 1 && a[0] == b[1]) return BinMode::FeatL;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

struct ReducePlan {
  int rows = 1;   // kept index count for axis reductions
  int count = 1;  // elements folded into each output
  int axis = -1;
};

ReducePlan plan_reduce(const char* op, const Shape& s, int axis) {
  ReducePlan p;
  p.axis = axis;
  int64_t n = numel_of(s);
  if (axis == -1) {
    p.rows = 1;
    p.count = static_cast<int>(n);
    return p;
  }
  if (s.size() != 2)
    throw ShapeError(std::string(op) + ": axis reduction needs a 2-d input, got " + shape_str(s));
  if (axis == 0) {  // reduce over rows -> per-feature [H]
    p.rows = s[1];
    p.count = s[0];
  } else if (axis == 1) {  // reduce over columns -> per-sample [m]
    p.rows = s[0];
    p.count = s[1];
  } else {
    throw ShapeError(std::string(op) + ": invalid axis " + std::to_string(axis));
  }
  return p;
}

}  // namespace

void Graph::check_id(NodeId id, const char* who) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw ShapeError(std::string(who) + ": invalid node id " + std::to_string(id));
}

const Node& Graph::node(NodeId id) const {
  check_id(id, "graph");
  return nodes_[static_cast<size_t>(id)];
}

NodeId Graph::leaf(Tensor t) {
  Node n;
  n.op = Op::Leaf;
  n.requires_grad = t.requires_grad;
  n.out = std::move(t);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::constant(Tensor t) {
  t.requires_grad = false;
  return leaf(std::move(t));
}

NodeId Graph::scalar(double v) { return constant(Tensor::scalar(v)); }

NodeId Graph::conv2d(NodeId x, NodeId w, NodeId b, int stride, int pad) {
  Attrs a;
  a.stride = stride;
  a.pad = pad;
  return push(Op::Conv2d, {x, w, b}, a);
}

NodeId Graph::maxpool2d(NodeId x, int ksize, int stride) {
  Attrs a;
  a.ksize = ksize;
  a.stride = stride > 0 ? stride : ksize;
  return push(Op::MaxPool2d, {x}, a);
}

NodeId Graph::mean(NodeId a, int axis) {
  Attrs at;
  at.axis = axis;
  return push(Op::MeanReduce, {a}, at);
}

NodeId Graph::variance(NodeId a, int axis) {
  Attrs at;
  at.axis = axis;
  return push(Op::VarReduce, {a}, at);
}

NodeId Graph::sum(NodeId a, int axis) {
  Attrs at;
  at.axis = axis;
  return push(Op::SumReduce, {a}, at);
}

NodeId Graph::concat(NodeId a, NodeId b) { return push(Op::Concat, {a, b}); }

NodeId Graph::broadcast_to(NodeId a, Shape target, int axis) {
  Attrs at;
  at.shape = std::move(target);
  at.axis = axis;
  return push(Op::Broadcast, {a}, at);
}

NodeId Graph::reshape(NodeId a, Shape target) {
  Attrs at;
  at.shape = std::move(target);
  return push(Op::Reshape, {a}, at);
}

NodeId Graph::push(Op op, std::vector<NodeId> inputs, Attrs attrs) {
  if (op == Op::Leaf) throw ShapeError("push: use leaf() to add inputs");
  if (std::string(op_name(op)) == "unknown")
    throw ShapeError("push: unknown op kind " + std::to_string(static_cast<int>(op)));
  for (NodeId id : inputs) check_id(id, op_name(op));

  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.attrs = std::move(attrs);
  for (NodeId id : n.inputs)
    if (nodes_[static_cast<size_t>(id)].requires_grad) n.requires_grad = true;

  forward_node(n);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::forward_node(Node& n) {
  auto in = [&](size_t i) -> const Tensor& { return nodes_[static_cast<size_t>(n.inputs[i])].out; };
  auto expect_inputs = [&](size_t k) {
    if (n.inputs.size() != k)
      throw ShapeError(std::string(op_name(n.op)) + ": expects " + std::to_string(k) +
                       " inputs, got " + std::to_string(n.inputs.size()));
  };

  switch (n.op) {
    case Op::Leaf:
      return;  // values live in n.out already

    case Op::Add:
    case Op::Sub:
    case Op::Mul: {
      expect_inputs(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      BinMode m = resolve_bin(op_name(n.op), a.shape, b.shape);
      const Shape& oshape = (m == BinMode::ScalarL || m == BinMode::FeatL) ? b.shape : a.shape;
      size_t nelem = static_cast<size_t>(numel_of(oshape));
      n.out.shape = oshape;
      n.out.values.resize(nelem);
      int H = oshape.size() == 2 ? oshape[1] : 0;
      for (size_t i = 0; i < nelem; ++i) {
        double av, bv;
        switch (m) {
          case BinMode::Same: av = a.values[i]; bv = b.values[i]; break;
          case BinMode::ScalarL: av = a.values[0]; bv = b.values[i]; break;
          case BinMode::ScalarR: av = a.values[i]; bv = b.values[0]; break;
          case BinMode::FeatL: av = a.values[i % H]; bv = b.values[i]; break;
          default: av = a.values[i]; bv = b.values[i % H]; break;
        }
        double r;
        if (n.op == Op::Add) r = av + bv;
        else if (n.op == Op::Sub) r = av - bv;
        else r = av * bv;
        n.out.values[i] = r;
      }
      break;
    }

    case Op::MatMul: {
      expect_inputs(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
      int M = a.shape[0], K = a.shape[1], N = b.shape[1];
      n.out.shape = {M, N};
      n.out.values.assign(static_cast<size_t>(M) * N, 0.0);
      mm_acc(a.values.data(), b.values.data(), n.out.values.data(), M, K, N);
      break;
    }

    case Op::Conv2d: {
      expect_inputs(3);
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const Tensor& b = in(2);
      if (x.shape.size() != 4 || w.shape.size() != 4 || x.shape[1] != w.shape[1])
        throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape) + " and " +
                         shape_str(w.shape));
      int N = x.shape[0], IC = x.shape[1], H = x.shape[2], W = x.shape[3];
      int OC = w.shape[0], KH = w.shape[2], KW = w.shape[3];
      if (b.shape != Shape{OC})
        throw ShapeError("conv2d: bias shape " + shape_str(b.shape) + " does not match " +
                         std::to_string(OC) + " output channels");
      int s = n.attrs.stride, p = n.attrs.pad;
      int OH = (H + 2 * p - KH) / s + 1;
      int OW = (W + 2 * p - KW) / s + 1;
      if (OH <= 0 || OW <= 0)
        throw ShapeError("conv2d: kernel " + shape_str(w.shape) + " too large for input " +
                         shape_str(x.shape));
      int K = IC * KH * KW, M = OH * OW;
      n.out.shape = {N, OC, OH, OW};
      n.out.values.assign(static_cast<size_t>(N) * OC * M, 0.0);
      std::vector<double> cols(static_cast<size_t>(K) * M);
      for (int sN = 0; sN < N; ++sN) {
        im2col(x.values.data() + static_cast<size_t>(sN) * IC * H * W, IC, H, W, KH, KW, s, p, OH,
               OW, cols.data());
        double* out_s = n.out.values.data() + static_cast<size_t>(sN) * OC * M;
        mm_acc(w.values.data(), cols.data(), out_s, OC, K, M);
        for (int oc = 0; oc < OC; ++oc) {
          double bias = b.values[static_cast<size_t>(oc)];
          double* row = out_s + static_cast<size_t>(oc) * M;
          for (int m = 0; m < M; ++m) row[m] += bias;
        }
      }
      break;
    }

    case Op::MaxPool2d: {
      expect_inputs(1);
      const Tensor& x = in(0);
      if (x.shape.size() != 4)
        throw ShapeError("maxpool2d: expects a 4-d input, got " + shape_str(x.shape));
      int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
      int k = n.attrs.ksize, s = n.attrs.stride;
      if ((H - k) % s != 0 || (W - k) % s != 0 || H < k || W < k)
        throw ShapeError("maxpool2d: window " + std::to_string(k) + "/stride " + std::to_string(s) +
                         " does not tile input " + shape_str(x.shape));
      int OH = (H - k) / s + 1, OW = (W - k) / s + 1;
      n.out.shape = {N, C, OH, OW};
      size_t nout = static_cast<size_t>(N) * C * OH * OW;
      n.out.values.resize(nout);
      n.aux.resize(nout);
      size_t o = 0;
      for (int sN = 0; sN < N; ++sN)
        for (int c = 0; c < C; ++c) {
          const double* plane =
              x.values.data() + (static_cast<size_t>(sN) * C + c) * H * W;
          size_t plane_off = (static_cast<size_t>(sN) * C + c) * H * W;
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox, ++o) {
              int iy0 = oy * s, ix0 = ox * s;
              double best = plane[static_cast<size_t>(iy0) * W + ix0];
              int best_idx = iy0 * W + ix0;
              for (int dy = 0; dy < k; ++dy)
                for (int dx = 0; dx < k; ++dx) {
                  int idx = (iy0 + dy) * W + (ix0 + dx);
                  if (plane[idx] > best) {  // first max wins ties
                    best = plane[idx];
                    best_idx = idx;
                  }
                }
              n.out.values[o] = best;
              n.aux[o] = static_cast<int>(plane_off) + best_idx;
            }
        }
      break;
    }

    case Op::Relu:
    case Op::Exp:
    case Op::Log:
    case Op::Abs:
    case Op::Square:
    case Op::Sqrt: {
      expect_inputs(1);
      const Tensor& a = in(0);
      n.out.shape = a.shape;
      n.out.values.resize(a.values.size());
      for (size_t i = 0; i < a.values.size(); ++i) {
        double x = a.values[i];
        double r;
        switch (n.op) {
          case Op::Relu: r = x > 0.0 ? x : 0.0; break;
          case Op::Exp: r = std::exp(x); break;
          case Op::Log:
            if (x <= 0.0)
              throw ShapeError("log: non-positive input " + std::to_string(x));
            r = std::log(x);
            break;
          case Op::Abs: r = std::fabs(x); break;
          case Op::Square: r = x * x; break;
          default:
            if (x < 0.0)
              throw ShapeError("sqrt: negative input " + std::to_string(x));
            r = std::sqrt(x);
            break;
        }
        n.out.values[i] = r;
      }
      break;
    }

    case Op::MeanReduce:
    case Op::VarReduce:
    case Op::SumReduce: {
      expect_inputs(1);
      const Tensor& a = in(0);
      ReducePlan p = plan_reduce(op_name(n.op), a.shape, n.attrs.axis);
      n.out.shape = {p.rows};
      n.out.values.assign(static_cast<size_t>(p.rows), 0.0);
      auto element = [&](int r, int c) -> double {
        if (p.axis == -1) return a.values[static_cast<size_t>(c)];
        if (p.axis == 0) return a.values[static_cast<size_t>(c) * a.shape[1] + r];
        return a.values[static_cast<size_t>(r) * a.shape[1] + c];
      };
      for (int r = 0; r < p.rows; ++r) {
        double acc = 0.0;
        for (int c = 0; c < p.count; ++c) acc += element(r, c);
        if (n.op == Op::SumReduce) {
          n.out.values[static_cast<size_t>(r)] = acc;
        } else if (n.op == Op::MeanReduce) {
          n.out.values[static_cast<size_t>(r)] = acc / p.count;
        } else {
          double mu = acc / p.count;
          double v = 0.0;
          for (int c = 0; c < p.count; ++c) {
            double d = element(r, c) - mu;
            v += d * d;
          }
          n.out.values[static_cast<size_t>(r)] = v / p.count;  // biased estimator
        }
      }
      break;
    }

    case Op::Concat: {
      expect_inputs(2);
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.shape.size() == 1 && b.shape.size() == 1) {
        n.out.shape = {a.shape[0] + b.shape[0]};
        n.out.values.resize(a.values.size() + b.values.size());
        std::copy(a.values.begin(), a.values.end(), n.out.values.begin());
        std::copy(b.values.begin(), b.values.end(),
                  n.out.values.begin() + static_cast<long>(a.values.size()));
      } else if (a.shape.size() == 2 && b.shape.size() == 2 && a.shape[0] == b.shape[0]) {
        int m = a.shape[0], wa = a.shape[1], wb = b.shape[1];
        n.out.shape = {m, wa + wb};
        n.out.values.resize(static_cast<size_t>(m) * (wa + wb));
        for (int i = 0; i < m; ++i) {
          std::memcpy(n.out.values.data() + static_cast<size_t>(i) * (wa + wb),
                      a.values.data() + static_cast<size_t>(i) * wa, sizeof(double) * wa);
          std::memcpy(n.out.values.data() + static_cast<size_t>(i) * (wa + wb) + wa,
                      b.values.data() + static_cast<size_t>(i) * wb, sizeof(double) * wb);
        }
      } else {
        throw ShapeError("concat: incompatible shapes " + shape_str(a.shape) + " and " +
                         shape_str(b.shape));
      }
      break;
    }

    case Op::Broadcast: {
      expect_inputs(1);
      const Tensor& a = in(0);
      const Shape& t = n.attrs.shape;
      size_t nelem = static_cast<size_t>(numel_of(t));
      n.out.shape = t;
      n.out.values.resize(nelem);
      if (a.numel() == 1) {
        std::fill(n.out.values.begin(), n.out.values.end(), a.values[0]);
      } else if (a.shape.size() == 1 && t.size() == 2 && n.attrs.axis == 0 &&
                 a.shape[0] == t[0]) {
        for (int i = 0; i < t[0]; ++i)
          std::fill_n(n.out.values.begin() + static_cast<long>(i) * t[1], t[1],
                      a.values[static_cast<size_t>(i)]);
      } else if (a.shape.size() == 1 && t.size() == 2 && n.attrs.axis == 1 &&
                 a.shape[0] == t[1]) {
        for (int i = 0; i < t[0]; ++i)
          std::memcpy(n.out.values.data() + static_cast<size_t>(i) * t[1], a.values.data(),
                      sizeof(double) * static_cast<size_t>(t[1]));
      } else {
        throw ShapeError("broadcast: cannot expand " + shape_str(a.shape) + " to " +
                         shape_str(t) + " along axis " + std::to_string(n.attrs.axis));
      }
      break;
    }

    case Op::Reshape: {
      expect_inputs(1);
      const Tensor& a = in(0);
      if (numel_of(n.attrs.shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " +
                         shape_str(n.attrs.shape));
      n.out.shape = n.attrs.shape;
      n.out.values = a.values;
      break;
    }
  }
}

void Graph::recompute() {
  for (Node& n : nodes_)
    if (n.op != Op::Leaf) forward_node(n);
}

void Graph::set_leaf_values(NodeId id, const std::vector<double>& v) {
  check_id(id, "set_leaf_values");
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.op != Op::Leaf) throw ShapeError("set_leaf_values: node is not a leaf");
  if (v.size() != n.out.values.size())
    throw ShapeError("set_leaf_values: length mismatch");
  n.out.values = v;
}

GradMap Graph::backward(NodeId loss) {
  if (nodes_.empty()) throw ShapeError("backward: graph has no forward nodes");
  check_id(loss, "backward");
  if (nodes_[static_cast<size_t>(loss)].out.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(nodes_[static_cast<size_t>(loss)].out.shape));

  // Reachable ancestors of the loss that need a gradient.
  std::vector<char> active(nodes_.size(), 0);
  active[static_cast<size_t>(loss)] = 1;
  for (NodeId k = loss; k >= 0; --k) {
    if (!active[static_cast<size_t>(k)]) continue;
    for (NodeId i : nodes_[static_cast<size_t>(k)].inputs)
      if (nodes_[static_cast<size_t>(i)].requires_grad) active[static_cast<size_t>(i)] = 1;
  }

  for (size_t k = 0; k < nodes_.size(); ++k) {
    if (active[k])
      nodes_[k].out.grad.assign(nodes_[k].out.values.size(), 0.0);
    else
      nodes_[k].out.grad.clear();
  }
  nodes_[static_cast<size_t>(loss)].out.grad[0] = 1.0;

  for (NodeId k = loss; k >= 0; --k) {
    if (!active[static_cast<size_t>(k)]) continue;
    Node& n = nodes_[static_cast<size_t>(k)];
    if (n.op == Op::Leaf) continue;
    const std::vector<double>& g = n.out.grad;

    auto input = [&](size_t i) -> Node& { return nodes_[static_cast<size_t>(n.inputs[i])]; };
    auto wants = [&](size_t i) { return active[static_cast<size_t>(n.inputs[i])] != 0; };

    switch (n.op) {
      case Op::Leaf:
        break;

      case Op::Add:
      case Op::Sub:
      case Op::Mul: {
        Node& A = input(0);
        Node& B = input(1);
        BinMode m = resolve_bin(op_name(n.op), A.out.shape, B.out.shape);
        size_t nelem = n.out.values.size();
        int H = n.out.shape.size() == 2 ? n.out.shape[1] : 0;
        auto a_at = [&](size_t i) -> double {
          if (m == BinMode::ScalarL) return A.out.values[0];
          if (m == BinMode::FeatL) return A.out.values[i % H];
          return A.out.values[i];
        };
        auto b_at = [&](size_t i) -> double {
          if (m == BinMode::ScalarR) return B.out.values[0];
          if (m == BinMode::FeatR) return B.out.values[i % H];
          return B.out.values[i];
        };
        auto add_a = [&](size_t i, double v) {
          size_t idx = i;
          if (m == BinMode::ScalarL) idx = 0;
          else if (m == BinMode::FeatL) idx = i % H;
          A.out.grad[idx] += v;
        };
        auto add_b = [&](size_t i, double v) {
          size_t idx = i;
          if (m == BinMode::ScalarR) idx = 0;
          else if (m == BinMode::FeatR) idx = i % H;
          B.out.grad[idx] += v;
        };
        for (size_t i = 0; i < nelem; ++i) {
          double gi = g[i];
          if (n.op == Op::Add) {
            if (wants(0)) add_a(i, gi);
            if (wants(1)) add_b(i, gi);
          } else if (n.op == Op::Sub) {
            if (wants(0)) add_a(i, gi);
            if (wants(1)) add_b(i, -gi);
          } else {
            if (wants(0)) add_a(i, gi * b_at(i));
            if (wants(1)) add_b(i, gi * a_at(i));
          }
        }
        break;
      }

      case Op::MatMul: {
        Node& A = input(0);
        Node& B = input(1);
        int M = A.out.shape[0], K = A.out.shape[1], N = B.out.shape[1];
        if (wants(0))  // dA += g * B^T
          mm_abt_acc(g.data(), B.out.values.data(), A.out.grad.data(), M, N, K);
        if (wants(1))  // dB += A^T * g
          mm_atb_acc(A.out.values.data(), g.data(), B.out.grad.data(), M, K, N);
        break;
      }

      case Op::Conv2d: {
        Node& X = input(0);
        Node& Wn = input(1);
        Node& Bn = input(2);
        int N = X.out.shape[0], IC = X.out.shape[1], H = X.out.shape[2], W = X.out.shape[3];
        int OC = Wn.out.shape[0], KH = Wn.out.shape[2], KW = Wn.out.shape[3];
        int s = n.attrs.stride, p = n.attrs.pad;
        int OH = n.out.shape[2], OW = n.out.shape[3];
        int K = IC * KH * KW, M = OH * OW;
        std::vector<double> cols(static_cast<size_t>(K) * M);
        std::vector<double> dcols(static_cast<size_t>(K) * M);
        for (int sN = 0; sN < N; ++sN) {
          const double* g_s = g.data() + static_cast<size_t>(sN) * OC * M;
          if (wants(1)) {
            im2col(X.out.values.data() + static_cast<size_t>(sN) * IC * H * W, IC, H, W, KH, KW, s,
                   p, OH, OW, cols.data());
            mm_abt_acc(g_s, cols.data(), Wn.out.grad.data(), OC, M, K);
          }
          if (wants(2)) {
            for (int oc = 0; oc < OC; ++oc) {
              double acc = 0.0;
              const double* row = g_s + static_cast<size_t>(oc) * M;
              for (int m = 0; m < M; ++m) acc += row[m];
              Bn.out.grad[static_cast<size_t>(oc)] += acc;
            }
          }
          if (wants(0)) {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            mm_atb_acc(Wn.out.values.data(), g_s, dcols.data(), OC, K, M);
            col2im_acc(dcols.data(), IC, H, W, KH, KW, s, p, OH, OW,
                       X.out.grad.data() + static_cast<size_t>(sN) * IC * H * W);
          }
        }
        break;
      }

      case Op::MaxPool2d: {
        Node& X = input(0);
        if (wants(0))
          for (size_t o = 0; o < g.size(); ++o)
            X.out.grad[static_cast<size_t>(n.aux[o])] += g[o];
        break;
      }

      case Op::Relu:
      case Op::Exp:
      case Op::Log:
      case Op::Abs:
      case Op::Square:
      case Op::Sqrt: {
        Node& A = input(0);
        if (!wants(0)) break;
        for (size_t i = 0; i < g.size(); ++i) {
          double x = A.out.values[i];
          double d;
          switch (n.op) {
            case Op::Relu: d = x > 0.0 ? 1.0 : 0.0; break;  // subgradient 0 at 0
            case Op::Exp: d = n.out.values[i]; break;
            case Op::Log: d = 1.0 / x; break;
            case Op::Abs: d = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); break;
            case Op::Square: d = 2.0 * x; break;
            default: d = x > 0.0 ? 0.5 / n.out.values[i] : 0.0; break;  // sqrt
          }
          A.out.grad[i] += g[i] * d;
        }
        break;
      }

      case Op::MeanReduce:
      case Op::VarReduce:
      case Op::SumReduce: {
        Node& A = input(0);
        if (!wants(0)) break;
        ReducePlan p = plan_reduce(op_name(n.op), A.out.shape, n.attrs.axis);
        auto flat = [&](int r, int c) -> size_t {
          if (p.axis == -1) return static_cast<size_t>(c);
          if (p.axis == 0) return static_cast<size_t>(c) * A.out.shape[1] + r;
          return static_cast<size_t>(r) * A.out.shape[1] + c;
        };
        for (int r = 0; r < p.rows; ++r) {
          double gr = g[static_cast<size_t>(r)];
          if (n.op == Op::SumReduce) {
            for (int c = 0; c < p.count; ++c) A.out.grad[flat(r, c)] += gr;
          } else if (n.op == Op::MeanReduce) {
            double d = gr / p.count;
            for (int c = 0; c < p.count; ++c) A.out.grad[flat(r, c)] += d;
          } else {
            double mu = 0.0;
            for (int c = 0; c < p.count; ++c) mu += A.out.values[flat(r, c)];
            mu /= p.count;
            double scale = 2.0 * gr / p.count;
            for (int c = 0; c < p.count; ++c)
              A.out.grad[flat(r, c)] += scale * (A.out.values[flat(r, c)] - mu);
          }
        }
        break;
      }

      case Op::Concat: {
        Node& A = input(0);
        Node& B = input(1);
        if (n.out.shape.size() == 1) {
          size_t wa = A.out.values.size();
          if (wants(0))
            for (size_t i = 0; i < wa; ++i) A.out.grad[i] += g[i];
          if (wants(1))
            for (size_t i = 0; i < B.out.values.size(); ++i) B.out.grad[i] += g[wa + i];
        } else {
          int m = n.out.shape[0], wa = A.out.shape[1], wb = B.out.shape[1];
          for (int i = 0; i < m; ++i) {
            const double* grow = g.data() + static_cast<size_t>(i) * (wa + wb);
            if (wants(0)) {
              double* da = A.out.grad.data() + static_cast<size_t>(i) * wa;
              for (int j = 0; j < wa; ++j) da[j] += grow[j];
            }
            if (wants(1)) {
              double* db = B.out.grad.data() + static_cast<size_t>(i) * wb;
              for (int j = 0; j < wb; ++j) db[j] += grow[wa + j];
            }
          }
        }
        break;
      }

      case Op::Broadcast: {
        Node& A = input(0);
        if (!wants(0)) break;
        const Shape& t = n.attrs.shape;
        if (A.out.numel() == 1) {
          double acc = 0.0;
          for (double v : g) acc += v;
          A.out.grad[0] += acc;
        } else if (n.attrs.axis == 0) {
          for (int i = 0; i < t[0]; ++i) {
            double acc = 0.0;
            const double* row = g.data() + static_cast<size_t>(i) * t[1];
            for (int j = 0; j < t[1]; ++j) acc += row[j];
            A.out.grad[static_cast<size_t>(i)] += acc;
          }
        } else {
          for (int i = 0; i < t[0]; ++i) {
            const double* row = g.data() + static_cast<size_t>(i) * t[1];
            for (int j = 0; j < t[1]; ++j) A.out.grad[static_cast<size_t>(j)] += row[j];
          }
        }
        break;
      }

      case Op::Reshape: {
        Node& A = input(0);
        if (wants(0))
          for (size_t i = 0; i < g.size(); ++i) A.out.grad[i] += g[i];
        break;
      }
    }
  }

  GradMap result;
  for (size_t k = 0; k < nodes_.size(); ++k) {
    Node& n = nodes_[k];
    if (n.op == Op::Leaf && n.requires_grad) {
      if (!active[k]) n.out.grad.assign(n.out.values.size(), 0.0);
      result[static_cast<NodeId>(k)] = n.out.grad;
    }
  }
  return result;
}

// Quantized state of every kink-bearing op. Two evaluations whose signatures
// differ bracket a non-smooth point, so central differences are unreliable.
std::vector<int> Graph::kink_signature(double eps) const {
  std::vector<int> sig;
  for (const Node& n : nodes_) {
    switch (n.op) {
      case Op::Relu:
      case Op::Abs: {
        const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].out;
        for (double v : a.values) sig.push_back(v > 0.0 ? 1 : (v < 0.0 ? -1 : 0));
        break;
      }
      case Op::MaxPool2d:
        sig.insert(sig.end(), n.aux.begin(), n.aux.end());
        break;
      case Op::Sqrt:
      case Op::Log: {
        const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].out;
        for (double v : a.values) sig.push_back(v < 4.0 * eps ? 0 : 1);
        break;
      }
      default:
        break;
    }
  }
  return sig;
}

std::vector<double> Graph::fd_gradient(NodeId loss, NodeId leaf, double eps,
                                       std::vector<int>* flagged) {
  check_id(loss, "fd_gradient");
  check_id(leaf, "fd_gradient");
  Node& L = nodes_[static_cast<size_t>(leaf)];
  if (L.op != Op::Leaf) throw ShapeError("fd_gradient: probe target is not a leaf");
  if (nodes_[static_cast<size_t>(loss)].out.numel() != 1)
    throw ShapeError("fd_gradient: loss must be scalar");

  recompute();
  std::vector<int> base_sig = kink_signature(eps);
  std::vector<double> numeric(L.out.values.size(), 0.0);

  for (size_t e = 0; e < L.out.values.size(); ++e) {
    double x0 = L.out.values[e];
    L.out.values[e] = x0 + eps;
    recompute();
    double lp = nodes_[static_cast<size_t>(loss)].out.values[0];
    bool kink = kink_signature(eps) != base_sig;
    L.out.values[e] = x0 - eps;
    recompute();
    double lm = nodes_[static_cast<size_t>(loss)].out.values[0];
    kink = kink || kink_signature(eps) != base_sig;
    L.out.values[e] = x0;
    recompute();
    numeric[e] = (lp - lm) / (2.0 * eps);
    if (kink && flagged) flagged->push_back(static_cast<int>(e));
  }
  return numeric;
}

GradCheckResult Graph::grad_check(NodeId loss, NodeId leaf, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2))
    throw ShapeError("grad_check: epsilon must be in (0, 1e-2], got " + std::to_string(eps));
  check_id(leaf, "grad_check");
  if (nodes_[static_cast<size_t>(leaf)].op != Op::Leaf)
    throw ShapeError("grad_check: probe target is not a leaf");

  backward(loss);
  std::vector<double> analytic = nodes_[static_cast<size_t>(leaf)].out.grad;
  if (analytic.empty())
    analytic.assign(nodes_[static_cast<size_t>(leaf)].out.values.size(), 0.0);

  GradCheckResult res;
  std::vector<int> flagged;
  std::vector<double> numeric = fd_gradient(loss, leaf, eps, &flagged);
  res.flagged = std::move(flagged);
  size_t fi = 0;
  for (size_t e = 0; e < numeric.size(); ++e) {
    if (fi < res.flagged.size() && res.flagged[fi] == static_cast<int>(e)) {
      ++fi;
      continue;
    }
    double denom = std::max({1.0, std::fabs(analytic[e]), std::fabs(numeric[e])});
    double rel = std::fabs(analytic[e] - numeric[e]) / denom;
    res.max_rel_err = std::max(res.max_rel_err, rel);
    ++res.checked;
  }
  return res;
}

}  // namespace mtask
