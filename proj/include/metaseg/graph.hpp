#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "metaseg/errors.hpp"
#include "metaseg/tensor.hpp"

namespace metaseg {

enum class OpKind {
  kParam,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kMulBcast,
  kScale,
  kSum,
  kRelu,
  kConv2d,
  kMaxPool2,
  kUpsample2,
  kConcatChannels,
  kSoftmaxCE,
};

// Reverse-mode tape. Nodes are appended in construction order, so every
// input id precedes its consumer and backward visits exact reverse order.
template <typename Real>
class Graph {
 public:
  using NodeId = std::int32_t;

  NodeId param(const std::string& name, Tensor<Real> value) {
    check_finite(value, "param");
    if (params_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
    Node n;
    n.kind = OpKind::kParam;
    n.value = std::move(value);
    n.name = name;
    params_[name] = next_id();
    return push(std::move(n));
  }

  NodeId constant(Tensor<Real> value) {
    check_finite(value, "constant");
    Node n;
    n.kind = OpKind::kConstant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  NodeId add(NodeId a, NodeId b) { return binary_elementwise(OpKind::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary_elementwise(OpKind::kSub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary_elementwise(OpKind::kMul, a, b); }

  // Broadcast a 1-element tensor over an arbitrary tensor.
  NodeId mul_bcast(NodeId scalar, NodeId t) {
    const Tensor<Real>& s = value(scalar);
    const Tensor<Real>& x = value(t);
    if (s.numel() != 1) throw ShapeError("mul_bcast: left operand must be scalar, got " + shape_str(s.shape));
    Tensor<Real> out(x.shape);
    const Real sv = s.data[0];
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = sv * x.data[i];
    check_finite(out, "mul_bcast");
    Node n;
    n.kind = OpKind::kMulBcast;
    n.inputs = {scalar, t};
    n.value = std::move(out);
    return push(std::move(n));
  }

  NodeId scale(NodeId a, Real factor) {
    const Tensor<Real>& x = value(a);
    Tensor<Real> out(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = factor * x.data[i];
    check_finite(out, "scale");
    Node n;
    n.kind = OpKind::kScale;
    n.inputs = {a};
    n.value = std::move(out);
    n.factor = factor;
    return push(std::move(n));
  }

  NodeId sum(NodeId a) {
    const Tensor<Real>& x = value(a);
    Real acc = 0;
    for (const Real v : x.data) acc += v;
    Tensor<Real> out = Tensor<Real>::scalar(acc);
    check_finite(out, "sum");
    Node n;
    n.kind = OpKind::kSum;
    n.inputs = {a};
    n.value = std::move(out);
    return push(std::move(n));
  }

  NodeId relu(NodeId a) {
    const Tensor<Real>& x = value(a);
    Tensor<Real> out(x.shape);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = x.data[i] > Real(0) ? x.data[i] : Real(0);
    Node n;
    n.kind = OpKind::kRelu;
    n.inputs = {a};
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Stride-1 cross-correlation with "same" zero padding; odd kernel dims.
  NodeId conv2d(NodeId input, NodeId weight, NodeId bias) {
    const Tensor<Real>& in = value(input);
    const Tensor<Real>& w = value(weight);
    const Tensor<Real>& b = value(bias);
    if (in.ndim() != 4) throw ShapeError("conv2d: input must be 4-D, got " + shape_str(in.shape));
    if (w.ndim() != 4) throw ShapeError("conv2d: weight must be 4-D, got " + shape_str(w.shape));
    if (b.ndim() != 1) throw ShapeError("conv2d: bias must be 1-D, got " + shape_str(b.shape));
    const std::int64_t B = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
    const std::int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Cin)
      throw ShapeError("conv2d: weight in-channels " + std::to_string(w.dim(1)) + " != input channels " +
                       std::to_string(Cin));
    if (b.dim(0) != Cout)
      throw ShapeError("conv2d: bias length " + std::to_string(b.dim(0)) + " != out-channels " + std::to_string(Cout));
    if (kh % 2 == 0 || kw % 2 == 0)
      throw ShapeError("conv2d: kernel dims must be odd, got " + std::to_string(kh) + "x" + std::to_string(kw));

    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    Tensor<Real> out({B, Cout, H, W});
    const Real* inp = in.data.data();
    const Real* wp = w.data.data();
    Real* outp = out.data.data();
    // Zero-padded per-channel copies give every kernel tap a uniform
    // full-width inner loop (no per-tap bounds).
    const std::int64_t Hp = H + kh - 1, Wp = W + kw - 1;
    std::vector<Real> padded(static_cast<std::size_t>(Cin * Hp * Wp), Real(0));
    for (std::int64_t bi = 0; bi < B; ++bi) {
      for (std::int64_t ci = 0; ci < Cin; ++ci) {
        const Real* iplane = inp + (bi * Cin + ci) * H * W;
        Real* pplane = padded.data() + ci * Hp * Wp;
        for (std::int64_t y = 0; y < H; ++y)
          std::copy_n(iplane + y * W, W, pplane + (y + ph) * Wp + pw);
      }
      for (std::int64_t co = 0; co < Cout; ++co) {
        Real* oplane = outp + (bi * Cout + co) * H * W;
        std::fill(oplane, oplane + H * W, b.data[static_cast<std::size_t>(co)]);
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
          const Real* pplane = padded.data() + ci * Hp * Wp;
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const Real wv = wp[((co * Cin + ci) * kh + ky) * kw + kx];
              for (std::int64_t y = 0; y < H; ++y) {
                Real* orow = oplane + y * W;
                const Real* irow = pplane + (y + ky) * Wp + kx;
                for (std::int64_t x = 0; x < W; ++x) orow[x] += wv * irow[x];
              }
            }
          }
        }
      }
    }
    check_finite(out, "conv2d");
    Node n;
    n.kind = OpKind::kConv2d;
    n.inputs = {input, weight, bias};
    n.value = std::move(out);
    return push(std::move(n));
  }

  // 2x2 max pooling, stride 2; ties go to the first element in row-major
  // scan order. Argmax indices are recorded for the backward pass.
  NodeId maxpool2(NodeId a) {
    const Tensor<Real>& x = value(a);
    if (x.ndim() != 4) throw ShapeError("maxpool2: input must be 4-D, got " + shape_str(x.shape));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
      throw ShapeError("maxpool2: spatial dims must be even, got " + std::to_string(H) + "x" + std::to_string(W));
    const std::int64_t Ho = H / 2, Wo = W / 2;
    Tensor<Real> out({B, C, Ho, Wo});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(out.numel()));
    for (std::int64_t p = 0; p < B * C; ++p) {
      const Real* iplane = x.data.data() + p * H * W;
      Real* oplane = out.data.data() + p * Ho * Wo;
      std::int64_t* aplane = argmax.data() + p * Ho * Wo;
      for (std::int64_t y = 0; y < Ho; ++y) {
        for (std::int64_t xo = 0; xo < Wo; ++xo) {
          std::int64_t best = (2 * y) * W + 2 * xo;
          Real bv = iplane[best];
          for (std::int64_t wy = 0; wy < 2; ++wy) {
            for (std::int64_t wx = 0; wx < 2; ++wx) {
              const std::int64_t idx = (2 * y + wy) * W + (2 * xo + wx);
              if (iplane[idx] > bv) {
                bv = iplane[idx];
                best = idx;
              }
            }
          }
          oplane[y * Wo + xo] = bv;
          aplane[y * Wo + xo] = p * H * W + best;
        }
      }
    }
    Node n;
    n.kind = OpKind::kMaxPool2;
    n.inputs = {a};
    n.value = std::move(out);
    n.argmax = std::move(argmax);
    return push(std::move(n));
  }

  // Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
  NodeId upsample2(NodeId a) {
    const Tensor<Real>& x = value(a);
    if (x.ndim() != 4) throw ShapeError("upsample2: input must be 4-D, got " + shape_str(x.shape));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<Real> out({B, C, 2 * H, 2 * W});
    for (std::int64_t p = 0; p < B * C; ++p) {
      const Real* iplane = x.data.data() + p * H * W;
      Real* oplane = out.data.data() + p * 4 * H * W;
      for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t xx = 0; xx < W; ++xx) {
          const Real v = iplane[y * W + xx];
          Real* o = oplane + (2 * y) * (2 * W) + 2 * xx;
          o[0] = v;
          o[1] = v;
          o[2 * W] = v;
          o[2 * W + 1] = v;
        }
      }
    }
    Node n;
    n.kind = OpKind::kUpsample2;
    n.inputs = {a};
    n.value = std::move(out);
    return push(std::move(n));
  }

  NodeId concat_channels(NodeId a, NodeId b) {
    const Tensor<Real>& xa = value(a);
    const Tensor<Real>& xb = value(b);
    if (xa.ndim() != 4 || xb.ndim() != 4)
      throw ShapeError("concat_channels: inputs must be 4-D, got " + shape_str(xa.shape) + " and " +
                       shape_str(xb.shape));
    if (xa.dim(0) != xb.dim(0) || xa.dim(2) != xb.dim(2) || xa.dim(3) != xb.dim(3))
      throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(xa.shape) + " vs " +
                       shape_str(xb.shape));
    const std::int64_t B = xa.dim(0), C1 = xa.dim(1), C2 = xb.dim(1), H = xa.dim(2), W = xa.dim(3);
    Tensor<Real> out({B, C1 + C2, H, W});
    const std::int64_t plane = H * W;
    for (std::int64_t bi = 0; bi < B; ++bi) {
      std::copy_n(xa.data.data() + bi * C1 * plane, C1 * plane, out.data.data() + bi * (C1 + C2) * plane);
      std::copy_n(xb.data.data() + bi * C2 * plane, C2 * plane, out.data.data() + (bi * (C1 + C2) + C1) * plane);
    }
    Node n;
    n.kind = OpKind::kConcatChannels;
    n.inputs = {a, b};
    n.value = std::move(out);
    return push(std::move(n));
  }

  // Mean pixelwise cross-entropy with log-sum-exp stabilization.
  NodeId softmax_ce(NodeId logits, IntMask target) {
    const Tensor<Real>& z = value(logits);
    if (z.ndim() != 4) throw ShapeError("softmax_ce: logits must be 4-D, got " + shape_str(z.shape));
    const std::int64_t B = z.dim(0), K = z.dim(1), H = z.dim(2), W = z.dim(3);
    if (target.shape != Shape{B, H, W})
      throw ShapeError("softmax_ce: target shape " + shape_str(target.shape) + " does not match logits " +
                       shape_str(z.shape));
    const std::int64_t plane = H * W;
    const std::int64_t count = B * plane;
    Tensor<Real> probs(z.shape);
    double total = 0.0;
    for (std::int64_t bi = 0; bi < B; ++bi) {
      const Real* zb = z.data.data() + bi * K * plane;
      Real* pb = probs.data.data() + bi * K * plane;
      const std::int32_t* tb = target.data.data() + bi * plane;
      for (std::int64_t px = 0; px < plane; ++px) {
        const std::int32_t t = tb[px];
        if (t < 0 || t >= K)
          throw LabelRangeError("softmax_ce: target value " + std::to_string(t) + " out of [0," + std::to_string(K) +
                                ") at pixel (b=" + std::to_string(bi) + ",y=" + std::to_string(px / W) +
                                ",x=" + std::to_string(px % W) + ")");
        Real maxv = zb[px];
        for (std::int64_t k = 1; k < K; ++k) maxv = std::max(maxv, zb[k * plane + px]);
        double sumexp = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
          const double e = std::exp(static_cast<double>(zb[k * plane + px] - maxv));
          pb[k * plane + px] = static_cast<Real>(e);
          sumexp += e;
        }
        const Real inv = static_cast<Real>(1.0 / sumexp);
        for (std::int64_t k = 0; k < K; ++k) pb[k * plane + px] *= inv;
        total += std::log(sumexp) - static_cast<double>(zb[t * plane + px] - maxv);
      }
    }
    Tensor<Real> out = Tensor<Real>::scalar(static_cast<Real>(total / static_cast<double>(count)));
    check_finite(out, "softmax_ce");
    Node n;
    n.kind = OpKind::kSoftmaxCE;
    n.inputs = {logits};
    n.value = std::move(out);
    n.softmax = std::move(probs);
    n.target = std::move(target);
    return push(std::move(n));
  }

  const Tensor<Real>& value(NodeId id) const { return node(id).value; }

  OpKind kind(NodeId id) const { return node(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }

  std::size_t size() const { return nodes_.size(); }

  // Gradients for every registered parameter.
  GradMap<Real> backward(NodeId root) const {
    std::set<std::string> all;
    for (const auto& [name, id] : params_) all.insert(name);
    return backward_impl(root, all);
  }

  // Gradients for a named subset; unknown names are lookup errors.
  GradMap<Real> backward(NodeId root, const std::set<std::string>& wrt) const {
    for (const auto& name : wrt)
      if (!params_.count(name)) throw LookupError("backward: unknown parameter '" + name + "'");
    return backward_impl(root, wrt);
  }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    std::vector<NodeId> inputs;
    Tensor<Real> value;
    Real factor = Real(0);              // kScale
    std::vector<std::int64_t> argmax;   // kMaxPool2
    Tensor<Real> softmax;               // kSoftmaxCE
    IntMask target;                     // kSoftmaxCE
    std::string name;                   // kParam
  };

  NodeId next_id() const { return static_cast<NodeId>(nodes_.size()); }

  NodeId push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  const Node& node(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw ContractError("invalid node id " + std::to_string(id));
    return nodes_[static_cast<std::size_t>(id)];
  }

  NodeId binary_elementwise(OpKind kind, NodeId a, NodeId b) {
    const Tensor<Real>& xa = value(a);
    const Tensor<Real>& xb = value(b);
    require_same_shape(xa.shape, xb.shape, "elementwise op");
    Tensor<Real> out(xa.shape);
    switch (kind) {
      case OpKind::kAdd:
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = xa.data[i] + xb.data[i];
        break;
      case OpKind::kSub:
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = xa.data[i] - xb.data[i];
        break;
      case OpKind::kMul:
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = xa.data[i] * xb.data[i];
        break;
      default:
        throw ContractError("not an elementwise op");
    }
    check_finite(out, "elementwise op");
    Node n;
    n.kind = kind;
    n.inputs = {a, b};
    n.value = std::move(out);
    return push(std::move(n));
  }

  GradMap<Real> backward_impl(NodeId root, const std::set<std::string>& wrt) const {
    const Node& r = node(root);
    if (r.value.numel() != 1)
      throw ContractError("backward: root must be scalar, got shape " + shape_str(r.value.shape));

    std::vector<Tensor<Real>> grads(nodes_.size());
    auto grad_of = [&](NodeId id) -> Tensor<Real>& {
      Tensor<Real>& g = grads[static_cast<std::size_t>(id)];
      if (g.data.empty()) g = Tensor<Real>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape);
      return g;
    };
    grad_of(root).data[0] = Real(1);

    for (NodeId id = root; id >= 0; --id) {
      const Node& n = nodes_[static_cast<std::size_t>(id)];
      const Tensor<Real>& g = grads[static_cast<std::size_t>(id)];
      if (g.data.empty()) continue;  // not on a path to the root
      switch (n.kind) {
        case OpKind::kParam:
        case OpKind::kConstant:
          break;
        case OpKind::kAdd: {
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          Tensor<Real>& gb = grad_of(n.inputs[1]);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] += g.data[i];
            gb.data[i] += g.data[i];
          }
          break;
        }
        case OpKind::kSub: {
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          Tensor<Real>& gb = grad_of(n.inputs[1]);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] += g.data[i];
            gb.data[i] -= g.data[i];
          }
          break;
        }
        case OpKind::kMul: {
          const Tensor<Real>& xa = node(n.inputs[0]).value;
          const Tensor<Real>& xb = node(n.inputs[1]).value;
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          Tensor<Real>& gb = grad_of(n.inputs[1]);
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            ga.data[i] += g.data[i] * xb.data[i];
            gb.data[i] += g.data[i] * xa.data[i];
          }
          break;
        }
        case OpKind::kMulBcast: {
          const Tensor<Real>& s = node(n.inputs[0]).value;
          const Tensor<Real>& x = node(n.inputs[1]).value;
          Tensor<Real>& gs = grad_of(n.inputs[0]);
          Tensor<Real>& gx = grad_of(n.inputs[1]);
          Real acc = 0;
          for (std::size_t i = 0; i < g.data.size(); ++i) {
            acc += g.data[i] * x.data[i];
            gx.data[i] += s.data[0] * g.data[i];
          }
          gs.data[0] += acc;
          break;
        }
        case OpKind::kScale: {
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += n.factor * g.data[i];
          break;
        }
        case OpKind::kSum: {
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          const Real gv = g.data[0];
          for (std::size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gv;
          break;
        }
        case OpKind::kRelu: {
          const Tensor<Real>& x = node(n.inputs[0]).value;
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            if (x.data[i] > Real(0)) ga.data[i] += g.data[i];
          break;
        }
        case OpKind::kConv2d:
          conv2d_backward(node(n.inputs[0]).value, node(n.inputs[1]).value, g, grad_of(n.inputs[0]),
                          grad_of(n.inputs[1]), grad_of(n.inputs[2]));
          break;
        case OpKind::kMaxPool2: {
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          for (std::size_t i = 0; i < g.data.size(); ++i)
            ga.data[static_cast<std::size_t>(n.argmax[i])] += g.data[i];
          break;
        }
        case OpKind::kUpsample2: {
          const Tensor<Real>& x = node(n.inputs[0]).value;
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
          for (std::int64_t p = 0; p < B * C; ++p) {
            const Real* gplane = g.data.data() + p * 4 * H * W;
            Real* aplane = ga.data.data() + p * H * W;
            for (std::int64_t y = 0; y < H; ++y) {
              for (std::int64_t xx = 0; xx < W; ++xx) {
                const Real* gblock = gplane + (2 * y) * (2 * W) + 2 * xx;
                aplane[y * W + xx] += gblock[0] + gblock[1] + gblock[2 * W] + gblock[2 * W + 1];
              }
            }
          }
          break;
        }
        case OpKind::kConcatChannels: {
          const Tensor<Real>& xa = node(n.inputs[0]).value;
          const Tensor<Real>& xb = node(n.inputs[1]).value;
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          Tensor<Real>& gb = grad_of(n.inputs[1]);
          const std::int64_t B = xa.dim(0), C1 = xa.dim(1), C2 = xb.dim(1), plane = xa.dim(2) * xa.dim(3);
          for (std::int64_t bi = 0; bi < B; ++bi) {
            const Real* gsrc = g.data.data() + bi * (C1 + C2) * plane;
            Real* gap = ga.data.data() + bi * C1 * plane;
            Real* gbp = gb.data.data() + bi * C2 * plane;
            for (std::int64_t i = 0; i < C1 * plane; ++i) gap[i] += gsrc[i];
            for (std::int64_t i = 0; i < C2 * plane; ++i) gbp[i] += gsrc[C1 * plane + i];
          }
          break;
        }
        case OpKind::kSoftmaxCE: {
          Tensor<Real>& ga = grad_of(n.inputs[0]);
          const Tensor<Real>& p = n.softmax;
          const std::int64_t B = p.dim(0), K = p.dim(1), plane = p.dim(2) * p.dim(3);
          const Real gv = g.data[0];
          const Real inv_count = Real(1) / static_cast<Real>(B * plane);
          for (std::int64_t bi = 0; bi < B; ++bi) {
            const std::int32_t* tb = n.target.data.data() + bi * plane;
            for (std::int64_t k = 0; k < K; ++k) {
              const Real* pp = p.data.data() + (bi * K + k) * plane;
              Real* gp = ga.data.data() + (bi * K + k) * plane;
              for (std::int64_t px = 0; px < plane; ++px) {
                const Real onehot = (tb[px] == static_cast<std::int32_t>(k)) ? Real(1) : Real(0);
                gp[px] += gv * (pp[px] - onehot) * inv_count;
              }
            }
          }
          break;
        }
      }
    }

    GradMap<Real> out;
    for (const auto& name : wrt) {
      const NodeId id = params_.at(name);
      Tensor<Real>& g = grads[static_cast<std::size_t>(id)];
      if (g.data.empty()) g = Tensor<Real>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape);
      check_finite(g, "backward gradient");
      out.emplace(name, std::move(g));
    }
    return out;
  }

  static void conv2d_backward(const Tensor<Real>& in, const Tensor<Real>& w, const Tensor<Real>& g,
                              Tensor<Real>& gin, Tensor<Real>& gw, Tensor<Real>& gb) {
    const std::int64_t B = in.dim(0), Cin = in.dim(1), H = in.dim(2), W = in.dim(3);
    const std::int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;

    const std::int64_t Hp = H + kh - 1, Wp = W + kw - 1;
    std::vector<Real> ipad(static_cast<std::size_t>(Cin * Hp * Wp));
    std::vector<Real> gpad(static_cast<std::size_t>(Cout * Hp * Wp));
    for (std::int64_t bi = 0; bi < B; ++bi) {
      std::fill(ipad.begin(), ipad.end(), Real(0));
      std::fill(gpad.begin(), gpad.end(), Real(0));
      for (std::int64_t ci = 0; ci < Cin; ++ci) {
        const Real* iplane = in.data.data() + (bi * Cin + ci) * H * W;
        for (std::int64_t y = 0; y < H; ++y)
          std::copy_n(iplane + y * W, W, ipad.data() + ci * Hp * Wp + (y + ph) * Wp + pw);
      }
      for (std::int64_t co = 0; co < Cout; ++co) {
        const Real* gplane = g.data.data() + (bi * Cout + co) * H * W;
        Real acc = 0;
        for (std::int64_t i = 0; i < H * W; ++i) acc += gplane[i];
        gb.data[static_cast<std::size_t>(co)] += acc;
        for (std::int64_t y = 0; y < H; ++y)
          std::copy_n(gplane + y * W, W, gpad.data() + co * Hp * Wp + (y + ph) * Wp + pw);
      }
      for (std::int64_t co = 0; co < Cout; ++co) {
        const Real* gplane = g.data.data() + (bi * Cout + co) * H * W;
        const Real* gpplane = gpad.data() + co * Hp * Wp;
        for (std::int64_t ci = 0; ci < Cin; ++ci) {
          const Real* ipplane = ipad.data() + ci * Hp * Wp;
          Real* giplane = gin.data.data() + (bi * Cin + ci) * H * W;
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              const std::int64_t widx = ((co * Cin + ci) * kh + ky) * kw + kx;
              const Real wv = w.data[static_cast<std::size_t>(widx)];
              Real wacc = 0;
              for (std::int64_t y = 0; y < H; ++y) {
                const Real* grow = gplane + y * W;
                const Real* irow = ipplane + (y + ky) * Wp + kx;
                // d/dweight: dot of grad-out with the shifted input window
                for (std::int64_t x = 0; x < W; ++x) wacc += grow[x] * irow[x];
                // d/dinput: full correlation with the flipped kernel
                Real* girow = giplane + y * W;
                const Real* gsrc = gpplane + (y + kh - 1 - ky) * Wp + (kw - 1 - kx);
                for (std::int64_t x = 0; x < W; ++x) girow[x] += wv * gsrc[x];
              }
              gw.data[static_cast<std::size_t>(widx)] += wacc;
            }
          }
        }
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> params_;
};

}  // namespace metaseg
