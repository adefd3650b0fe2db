#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "medprompt/tensor.hpp"
#include "medprompt/tensor_ops.hpp"

namespace medprompt {

/// Trainable tensor with a persistent gradient accumulator. Gradients add up
/// across backward passes until zero_grad() clears them.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;

  Parameter(std::string n, Tensor<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor<Scalar>::zeros(value.shape())) {}

  void zero_grad() { grad.array() = Scalar(0); }
};

/// Forward result carried through tape ops. node < 0 means the value is a
/// constant for differentiation purposes.
template <typename Scalar>
struct Value {
  Tensor<Scalar> data;
  Index node = -1;

  bool tracked() const { return node >= 0; }
};

/// Reverse-mode tape. Ops append nodes in evaluation order; backward() walks
/// them once in reverse, freeing each node's gradient and captures as it goes.
template <typename Scalar>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const Tensor<Scalar>&)>;

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  size_t size() const { return nodes_.size(); }

  Value<Scalar> leaf(Parameter<Scalar>& p) {
    if (!recording_) return {p.value, -1};
    Parameter<Scalar>* pp = &p;
    Index id = add_node([pp](Tape&, const Tensor<Scalar>& g) { pp->grad.array() += g.array(); });
    return {p.value, id};
  }

  Value<Scalar> constant(const Tensor<Scalar>& t) { return {t, -1}; }

  Index add_node(BackFn back) {
    nodes_.push_back(Node{Tensor<Scalar>(), std::move(back)});
    return static_cast<Index>(nodes_.size()) - 1;
  }

  // The first gradient for a node is stored by reference; a private copy is
  // made only when a second path accumulates into it, so shared buffers are
  // never mutated.
  void accumulate(Index node, const Tensor<Scalar>& g) {
    if (node < 0) return;
    Node& n = nodes_[static_cast<size_t>(node)];
    if (!n.grad.defined()) {
      n.grad = g;
      n.grad_owned = false;
    } else if (!n.grad_owned) {
      Tensor<Scalar> own = n.grad.clone();
      own.array() += g.array();
      n.grad = std::move(own);
      n.grad_owned = true;
    } else {
      n.grad.array() += g.array();
    }
  }

  void backward(const Value<Scalar>& loss) {
    check(!consumed_, "backward: tape already consumed");
    check(loss.tracked(), "backward: loss does not depend on any tracked value");
    check(loss.data.numel() == 1, "backward: loss must be a scalar, got shape ",
          shape_str(loss.data.shape()));
    consumed_ = true;
    accumulate(loss.node, Tensor<Scalar>::scalar(Scalar(1)));
    for (Index i = static_cast<Index>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.grad.defined()) {
        Tensor<Scalar> g = n.grad;
        n.grad = Tensor<Scalar>();
        if (n.back) n.back(*this, g);
      }
      n.back = nullptr;
    }
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor<Scalar> grad;
    BackFn back;
    bool grad_owned = false;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
  bool consumed_ = false;
};

namespace ad {

template <typename Scalar>
bool tracking(const Tape<Scalar>* tape) {
  return tape && tape->recording();
}

template <typename Scalar>
Value<Scalar> conv2d(Tape<Scalar>* tape, const Value<Scalar>& x, const Value<Scalar>& w,
                     const Value<Scalar>* bias, const Conv2dSpec& spec) {
  const Tensor<Scalar>* bt = (bias && bias->data.defined()) ? &bias->data : nullptr;
  Tensor<Scalar> y = medprompt::conv2d(x.data, w.data, bt, spec);
  const bool track_b = bias && bias->tracked();
  if (!tracking(tape) || (!x.tracked() && !w.tracked() && !track_b)) return {y, -1};
  Tensor<Scalar> xd = x.data, wd = w.data;
  const Index xn = x.node, wn = w.node, bn = track_b ? bias->node : -1;
  const bool has_b = bt != nullptr;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto grads = conv2d_backward(xd, wd, has_b, spec, g, xn >= 0, wn >= 0);
    if (xn >= 0) t.accumulate(xn, grads.dx);
    if (wn >= 0) t.accumulate(wn, grads.dw);
    if (bn >= 0) t.accumulate(bn, grads.db);
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> add(Tape<Scalar>* tape, const Value<Scalar>& a, const Value<Scalar>& b) {
  Tensor<Scalar> y = medprompt::add(a.data, b.data);
  if (!tracking(tape) || (!a.tracked() && !b.tracked())) return {y, -1};
  const Index an = a.node, bn = b.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(an, g);
    t.accumulate(bn, g);
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> sub(Tape<Scalar>* tape, const Value<Scalar>& a, const Value<Scalar>& b) {
  Tensor<Scalar> y = medprompt::sub(a.data, b.data);
  if (!tracking(tape) || (!a.tracked() && !b.tracked())) return {y, -1};
  const Index an = a.node, bn = b.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(an, g);
    if (bn >= 0) t.accumulate(bn, scalar_mul(g, Scalar(-1)));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> mul(Tape<Scalar>* tape, const Value<Scalar>& a, const Value<Scalar>& b) {
  Tensor<Scalar> y = medprompt::mul(a.data, b.data);
  if (!tracking(tape) || (!a.tracked() && !b.tracked())) return {y, -1};
  Tensor<Scalar> ad_ = a.data, bd = b.data;
  const Index an = a.node, bn = b.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    if (an >= 0) t.accumulate(an, medprompt::mul(g, bd));
    if (bn >= 0) t.accumulate(bn, medprompt::mul(g, ad_));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> div(Tape<Scalar>* tape, const Value<Scalar>& a, const Value<Scalar>& b) {
  Tensor<Scalar> y = medprompt::div(a.data, b.data);
  if (!tracking(tape) || (!a.tracked() && !b.tracked())) return {y, -1};
  Tensor<Scalar> bd = b.data, yd = y;
  const Index an = a.node, bn = b.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    Tensor<Scalar> ginv = medprompt::div(g, bd);
    if (an >= 0) t.accumulate(an, ginv);
    if (bn >= 0)
      t.accumulate(bn, scalar_mul(medprompt::mul(ginv, yd), Scalar(-1)));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> scalar_mul(Tape<Scalar>* tape, const Value<Scalar>& a, Scalar s) {
  Tensor<Scalar> y = medprompt::scalar_mul(a.data, s);
  if (!tracking(tape) || !a.tracked()) return {y, -1};
  const Index an = a.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(an, medprompt::scalar_mul(g, s));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> scalar_add(Tape<Scalar>* tape, const Value<Scalar>& a, Scalar s) {
  Tensor<Scalar> y = medprompt::scalar_add(a.data, s);
  if (!tracking(tape) || !a.tracked()) return {y, -1};
  const Index an = a.node;
  Index id = tape->add_node(
      [=](Tape<Scalar>& t, const Tensor<Scalar>& g) { t.accumulate(an, g); });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> gelu(Tape<Scalar>* tape, const Value<Scalar>& a) {
  Tensor<Scalar> y = medprompt::gelu(a.data);
  if (!tracking(tape) || !a.tracked()) return {y, -1};
  Tensor<Scalar> xd = a.data;
  const Index an = a.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(an, gelu_backward(xd, g));
  });
  return {y, id};
}

/// Elementwise dispatcher on tape. clamp01 has no useful gradient here and is
/// rejected for tracked inputs; apply it to plain tensors after the forward pass.
template <typename Scalar>
Value<Scalar> elementwise(Tape<Scalar>* tape, EwOp op, const Value<Scalar>& a,
                          const Value<Scalar>* b, Scalar s = Scalar(0)) {
  switch (op) {
    case EwOp::add: check(b, "add: missing operand"); return add(tape, a, *b);
    case EwOp::sub: check(b, "sub: missing operand"); return sub(tape, a, *b);
    case EwOp::mul: check(b, "mul: missing operand"); return mul(tape, a, *b);
    case EwOp::div: check(b, "div: missing operand"); return div(tape, a, *b);
    case EwOp::scalar_mul: return scalar_mul(tape, a, s);
    case EwOp::scalar_add: return scalar_add(tape, a, s);
    case EwOp::gelu: return gelu(tape, a);
    case EwOp::clamp01:
      check(!(tracking(tape) && a.tracked()),
            "clamp01 is not recorded on the tape; apply it to detached tensors only");
      return {medprompt::clamp01(a.data), -1};
  }
  fail("elementwise: unknown op");
}

template <typename Scalar>
Value<Scalar> softmax_axis(Tape<Scalar>* tape, const Value<Scalar>& x, Index axis) {
  Tensor<Scalar> y = medprompt::softmax_axis(x.data, axis);
  if (!tracking(tape) || !x.tracked()) return {y, -1};
  Tensor<Scalar> yd = y;
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(xn, softmax_backward(yd, g, axis));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> global_avg_pool(Tape<Scalar>* tape, const Value<Scalar>& x) {
  Tensor<Scalar> y = medprompt::global_avg_pool(x.data);
  if (!tracking(tape) || !x.tracked()) return {y, -1};
  const Shape xs = x.data.shape();
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(xn, global_avg_pool_backward(xs, g));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> layer_norm_channels(Tape<Scalar>* tape, const Value<Scalar>& x,
                                  const Value<Scalar>& gamma) {
  if (!tracking(tape) || (!x.tracked() && !gamma.tracked()))
    return {medprompt::layer_norm_channels(x.data, gamma.data), -1};
  Tensor<Scalar> xhat, inv_std;
  Tensor<Scalar> y = medprompt::layer_norm_channels(x.data, gamma.data, &xhat, &inv_std);
  Tensor<Scalar> gd = gamma.data;
  const Index xn = x.node, gn = gamma.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto grads = layer_norm_channels_backward(xhat, inv_std, gd, g);
    if (xn >= 0) t.accumulate(xn, grads.dx);
    if (gn >= 0) t.accumulate(gn, grads.dgamma);
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> bilinear_resize(Tape<Scalar>* tape, const Value<Scalar>& x, Index out_h,
                              Index out_w) {
  Tensor<Scalar> y = medprompt::bilinear_resize(x.data, out_h, out_w);
  if (!tracking(tape) || !x.tracked()) return {y, -1};
  const Shape xs = x.data.shape();
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(xn, bilinear_resize_backward(xs, g));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> pixel_shuffle_down(Tape<Scalar>* tape, const Value<Scalar>& x, Index r) {
  Tensor<Scalar> y = medprompt::pixel_shuffle_down(x.data, r);
  if (!tracking(tape) || !x.tracked()) return {y, -1};
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(xn, medprompt::pixel_shuffle_up(g, r));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> pixel_shuffle_up(Tape<Scalar>* tape, const Value<Scalar>& x, Index r) {
  Tensor<Scalar> y = medprompt::pixel_shuffle_up(x.data, r);
  if (!tracking(tape) || !x.tracked()) return {y, -1};
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(xn, medprompt::pixel_shuffle_down(g, r));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> reshape(Tape<Scalar>* tape, const Value<Scalar>& x, const Shape& shape) {
  Tensor<Scalar> y = x.data.reshaped(shape);
  if (!tracking(tape) || !x.tracked()) return {y, -1};
  const Shape xs = x.data.shape();
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(xn, g.reshaped(xs));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> concat_channels(Tape<Scalar>* tape, const std::vector<Value<Scalar>>& xs) {
  std::vector<Tensor<Scalar>> ts;
  ts.reserve(xs.size());
  bool any = false;
  for (const auto& v : xs) {
    ts.push_back(v.data);
    any = any || v.tracked();
  }
  Tensor<Scalar> y = medprompt::concat_channels(ts);
  if (!tracking(tape) || !any) return {y, -1};
  std::vector<Index> nodes;
  std::vector<Index> channels;
  for (const auto& v : xs) {
    nodes.push_back(v.node);
    channels.push_back(v.data.c());
  }
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    Index off = 0;
    for (size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i] >= 0) t.accumulate(nodes[i], slice_channels(g, off, channels[i]));
      off += channels[i];
    }
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> slice_channels(Tape<Scalar>* tape, const Value<Scalar>& x, Index begin,
                             Index count) {
  Tensor<Scalar> y = medprompt::slice_channels(x.data, begin, count);
  if (!tracking(tape) || !x.tracked()) return {y, -1};
  const Shape xs = x.data.shape();
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    Tensor<Scalar> dx = Tensor<Scalar>::zeros(xs);
    const Index hw = xs[2] * xs[3];
    for (Index b = 0; b < xs[0]; ++b)
      std::memcpy(dx.data() + (b * xs[1] + begin) * hw, g.data() + b * count * hw,
                  sizeof(Scalar) * static_cast<size_t>(count * hw));
    t.accumulate(xn, dx);
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> matmul_batched(Tape<Scalar>* tape, const Value<Scalar>& a, const Value<Scalar>& b,
                             bool trans_a = false, bool trans_b = false) {
  Tensor<Scalar> y = medprompt::matmul_batched(a.data, b.data, trans_a, trans_b);
  if (!tracking(tape) || (!a.tracked() && !b.tracked())) return {y, -1};
  Tensor<Scalar> ad_ = a.data, bd = b.data;
  const Index an = a.node, bn = b.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto grads = matmul_batched_backward(ad_, bd, trans_a, trans_b, g);
    if (an >= 0) t.accumulate(an, grads.da);
    if (bn >= 0) t.accumulate(bn, grads.db);
  });
  return {y, id};
}

/// Plain MxK . KxL product, routed through the batched kernel.
template <typename Scalar>
Value<Scalar> matmul2d(Tape<Scalar>* tape, const Value<Scalar>& a, const Value<Scalar>& b) {
  check(a.data.rank() == 2 && b.data.rank() == 2, "matmul2d: operands must be rank 2, got ",
        shape_str(a.data.shape()), " and ", shape_str(b.data.shape()));
  Value<Scalar> a3 = reshape(tape, a, {1, a.data.dim(0), a.data.dim(1)});
  Value<Scalar> b3 = reshape(tape, b, {1, b.data.dim(0), b.data.dim(1)});
  Value<Scalar> y = matmul_batched(tape, a3, b3);
  return reshape(tape, y, {a.data.dim(0), b.data.dim(1)});
}

template <typename Scalar>
Value<Scalar> l2_normalize_rows(Tape<Scalar>* tape, const Value<Scalar>& x) {
  if (!tracking(tape) || !x.tracked()) return {medprompt::l2_normalize_rows(x.data), -1};
  Tensor<Scalar> inv_norm;
  Tensor<Scalar> y = medprompt::l2_normalize_rows(x.data, &inv_norm);
  Tensor<Scalar> xd = x.data;
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(xn, l2_normalize_rows_backward(xd, inv_norm, g));
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> scale_per_head(Tape<Scalar>* tape, const Value<Scalar>& x,
                             const Value<Scalar>& alpha) {
  Tensor<Scalar> y = medprompt::scale_per_head(x.data, alpha.data);
  if (!tracking(tape) || (!x.tracked() && !alpha.tracked())) return {y, -1};
  Tensor<Scalar> xd = x.data, al = alpha.data;
  const Index xn = x.node, an = alpha.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    auto grads = scale_per_head_backward(xd, al, g);
    if (xn >= 0) t.accumulate(xn, grads.dx);
    if (an >= 0) t.accumulate(an, grads.dalpha);
  });
  return {y, id};
}

template <typename Scalar>
Value<Scalar> mean_all(Tape<Scalar>* tape, const Value<Scalar>& x) {
  Tensor<Scalar> y = medprompt::mean_all(x.data);
  if (!tracking(tape) || !x.tracked()) return {y, -1};
  const Shape xs = x.data.shape();
  const Index xn = x.node;
  Index id = tape->add_node([=](Tape<Scalar>& t, const Tensor<Scalar>& g) {
    t.accumulate(xn, mean_all_backward(xs, g));
  });
  return {y, id};
}

}  // namespace ad
}  // namespace medprompt
