#pragma once
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "msam/volume.hpp"

// Reverse-mode automatic differentiation over dense Eigen matrices.
// A Graph is a write-once tape: ops append nodes, backward() sweeps the tape
// in reverse creation order and accumulates into bound parameter tensors.
// Values are computed eagerly, so the tape is always topologically ordered.

namespace msam::ag {

// Named parameter tensor. `buffer` marks fixed (non-learnable) state such as
// positional encoding matrices; buffers are saved in checkpoints but excluded
// from parameter counts.
template <class S>
struct Tensor {
  std::string name;
  MatX<S> value;
  MatX<S> grad;
  bool trainable = true;
  bool buffer = false;

  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad = MatX<S>::Zero(value.rows(), value.cols()); }
};

struct VarId {
  int i = -1;
  bool valid() const { return i >= 0; }
};

// Indexed gather with zero fill: out[k] = src[k] < 0 ? 0 : in[src[k]], flat
// column-major on both sides. Expresses im2col, patch extraction and
// sub-voxel shuffles with a single differentiable primitive.
struct GatherPlan {
  Eigen::Index out_rows = 0, out_cols = 0;
  Eigen::Index in_rows = 0, in_cols = 0;
  std::vector<Eigen::Index> src;
};

template <class S>
class Graph {
public:
  using Mat = MatX<S>;

  int size() const { return static_cast<int>(nodes_.size()); }
  const Mat& val(VarId v) const { return nodes_[v.i].val; }
  const Mat& grad(VarId v) const { return nodes_[v.i].grad; }
  const std::string& label(VarId v) const { return nodes_[v.i].label; }

  VarId constant(Mat m, std::string label = "const") {
    return push(std::move(m), std::move(label), nullptr);
  }

  VarId zeros(Eigen::Index r, Eigen::Index c) { return constant(Mat::Zero(r, c), "zeros"); }

  // Leaf bound to a parameter tensor; repeated calls for the same tensor
  // share one node so weight reuse accumulates correctly.
  VarId param(Tensor<S>& t) {
    auto it = param_nodes_.find(&t);
    if (it != param_nodes_.end()) return it->second;
    VarId id = push(t.value, t.name, nullptr);
    nodes_[id.i].bound = &t;
    param_nodes_.emplace(&t, id);
    return id;
  }

  VarId add(VarId a, VarId b) {
    check_same_dims(a, b, "add");
    return push(val(a) + val(b), "add", [a, b](Graph& g, int out) {
      g.acc(a) += g.nodes_[out].grad;
      g.acc(b) += g.nodes_[out].grad;
    });
  }

  VarId sub(VarId a, VarId b) {
    check_same_dims(a, b, "sub");
    return push(val(a) - val(b), "sub", [a, b](Graph& g, int out) {
      g.acc(a) += g.nodes_[out].grad;
      g.acc(b) -= g.nodes_[out].grad;
    });
  }

  VarId cmul(VarId a, VarId b) {
    check_same_dims(a, b, "cmul");
    return push((val(a).array() * val(b).array()).matrix(), "cmul", [a, b](Graph& g, int out) {
      const Mat& go = g.nodes_[out].grad;
      g.acc(a).array() += go.array() * g.val(b).array();
      g.acc(b).array() += go.array() * g.val(a).array();
    });
  }

  VarId matmul(VarId a, VarId b) {
    if (val(a).cols() != val(b).rows())
      throw ShapeMismatchError("matmul inner dims disagree: " + dims(a) + " * " + dims(b));
    return push(val(a) * val(b), "matmul", [a, b](Graph& g, int out) {
      const Mat& go = g.nodes_[out].grad;
      g.acc(a).noalias() += go * g.val(b).transpose();
      g.acc(b).noalias() += g.val(a).transpose() * go;
    });
  }

  // alpha * x + beta, elementwise constants
  VarId affine(VarId x, S alpha, S beta) {
    return push((alpha * val(x).array() + beta).matrix(), "affine", [x, alpha](Graph& g, int out) {
      g.acc(x) += alpha * g.nodes_[out].grad;
    });
  }

  // x + row-broadcast bias (bias is 1 x D)
  VarId add_bias(VarId x, VarId bias) {
    if (val(bias).rows() != 1 || val(bias).cols() != val(x).cols())
      throw ShapeMismatchError("add_bias: bias must be 1 x cols(x)");
    Mat y = val(x);
    y.rowwise() += val(bias).row(0);
    return push(std::move(y), "add_bias", [x, bias](Graph& g, int out) {
      const Mat& go = g.nodes_[out].grad;
      g.acc(x) += go;
      g.acc(bias).row(0) += go.colwise().sum();
    });
  }

  // Row-wise layer normalization with learnable scale/shift (each 1 x D).
  VarId layer_norm(VarId x, VarId gamma, VarId beta, S eps) {
    const Mat& X = val(x);
    const Eigen::Index n = X.cols();
    auto saved = std::make_shared<std::pair<Mat, MatX<S>>>();
    Mat& xhat = saved->first;
    MatX<S>& inv_std = saved->second;
    xhat.resize(X.rows(), X.cols());
    inv_std.resize(X.rows(), 1);
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      const S mu = X.row(r).mean();
      const S var = (X.row(r).array() - mu).square().mean();
      const S inv = S(1) / std::sqrt(var + eps);
      inv_std(r, 0) = inv;
      xhat.row(r) = (X.row(r).array() - mu).matrix() * inv;
    }
    Mat y = xhat;
    y.array().rowwise() *= val(gamma).row(0).array();
    y.rowwise() += val(beta).row(0);
    return push(std::move(y), "layer_norm", [x, gamma, beta, saved, n](Graph& g, int out) {
      const Mat& go = g.nodes_[out].grad;
      const Mat& xhat = saved->first;
      g.acc(gamma).row(0).array() += (go.array() * xhat.array()).colwise().sum();
      g.acc(beta).row(0) += go.colwise().sum();
      Mat dxhat = go;
      dxhat.array().rowwise() *= g.val(gamma).row(0).array();
      Mat& gx = g.acc(x);
      for (Eigen::Index r = 0; r < go.rows(); ++r) {
        const S m1 = dxhat.row(r).mean();
        const S m2 = (dxhat.row(r).array() * xhat.row(r).array()).mean();
        gx.row(r).array() +=
            saved->second(r, 0) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
      (void)n;
    });
  }

  VarId softmax_rows(VarId x) {
    Mat y = val(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const S m = y.row(r).maxCoeff();
      y.row(r) = (y.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
    auto saved = std::make_shared<Mat>(y);
    return push(std::move(y), "softmax", [x, saved](Graph& g, int out) {
      const Mat& go = g.nodes_[out].grad;
      const Mat& y = *saved;
      Mat& gx = g.acc(x);
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const S dot = (go.row(r).array() * y.row(r).array()).sum();
        gx.row(r).array() += y.row(r).array() * (go.row(r).array() - dot);
      }
    });
  }

  VarId gelu(VarId x) {
    Mat y = val(x).unaryExpr(
        [](S v) { return S(0.5) * v * (S(1) + S(std::erf(double(v) * M_SQRT1_2))); });
    return push(std::move(y), "gelu", [x](Graph& g, int out) {
      const Mat& go = g.nodes_[out].grad;
      const Mat d = g.val(x).unaryExpr([](S v) {
        const double inv_sqrt2pi = 0.3989422804014327;
        return S(0.5 * (1.0 + std::erf(double(v) * M_SQRT1_2)) +
                 double(v) * inv_sqrt2pi * std::exp(-0.5 * double(v) * double(v)));
      });
      g.acc(x).array() += go.array() * d.array();
    });
  }

  VarId transpose(VarId x) {
    return push(val(x).transpose(), "transpose", [x](Graph& g, int out) {
      g.acc(x) += g.nodes_[out].grad.transpose();
    });
  }

  VarId slice_cols(VarId x, Eigen::Index c0, Eigen::Index w) {
    if (c0 < 0 || c0 + w > val(x).cols())
      throw ShapeMismatchError("slice_cols out of range");
    return push(val(x).middleCols(c0, w), "slice_cols", [x, c0, w](Graph& g, int out) {
      g.acc(x).middleCols(c0, w) += g.nodes_[out].grad;
    });
  }

  VarId hconcat(VarId a, VarId b) {
    if (val(a).rows() != val(b).rows())
      throw ShapeMismatchError("hconcat row counts disagree");
    Mat y(val(a).rows(), val(a).cols() + val(b).cols());
    y << val(a), val(b);
    const Eigen::Index wa = val(a).cols();
    return push(std::move(y), "hconcat", [a, b, wa](Graph& g, int out) {
      const Mat& go = g.nodes_[out].grad;
      g.acc(a) += go.leftCols(wa);
      g.acc(b) += go.rightCols(go.cols() - wa);
    });
  }

  VarId sum(VarId x) {
    Mat y(1, 1);
    y(0, 0) = val(x).sum();
    return push(std::move(y), "sum", [x](Graph& g, int out) {
      g.acc(x).array() += g.nodes_[out].grad(0, 0);
    });
  }

  VarId mean(VarId x) { return affine(sum(x), S(1) / S(val(x).size()), S(0)); }

  VarId log_clamped(VarId x, S eps) {
    const Mat& X = val(x);
    Mat y = X.array().max(eps).log().matrix();
    return push(std::move(y), "log", [x, eps](Graph& g, int out) {
      const auto xa = g.val(x).array();
      g.acc(x).array() +=
          g.nodes_[out].grad.array() * (xa > eps).template cast<S>() / xa.max(eps);
    });
  }

  VarId div(VarId a, VarId b) {
    check_same_dims(a, b, "div");
    return push((val(a).array() / val(b).array()).matrix(), "div", [a, b](Graph& g, int out) {
      const Mat& go = g.nodes_[out].grad;
      const auto ba = g.val(b).array();
      g.acc(a).array() += go.array() / ba;
      g.acc(b).array() -= go.array() * g.val(a).array() / (ba * ba);
    });
  }

  VarId gather(VarId x, std::shared_ptr<const GatherPlan> plan, std::string label = "gather") {
    const Mat& X = val(x);
    if (X.rows() != plan->in_rows || X.cols() != plan->in_cols)
      throw ShapeMismatchError("gather: input dims " + dims(x) + " do not match plan");
    Mat y(plan->out_rows, plan->out_cols);
    const S* in = X.data();
    S* out = y.data();
    const auto& src = plan->src;
    for (std::size_t k = 0; k < src.size(); ++k) out[k] = src[k] < 0 ? S(0) : in[src[k]];
    return push(std::move(y), std::move(label), [x, plan](Graph& g, int out_id) {
      const S* go = g.nodes_[out_id].grad.data();
      S* gx = g.acc(x).data();
      const auto& src = plan->src;
      for (std::size_t k = 0; k < src.size(); ++k)
        if (src[k] >= 0) gx[src[k]] += go[k];
    });
  }

  // Hard threshold at 0 in the forward pass, identity in the backward pass.
  VarId straight_through_binarize(VarId x) {
    Mat y = (val(x).array() > S(0)).template cast<S>().matrix();
    return push(std::move(y), "straight_through", [x](Graph& g, int out) {
      g.acc(x) += g.nodes_[out].grad;
    });
  }

  // Seeds d(root)/d(root) = 1, sweeps the tape once, then flushes leaf
  // gradients into their bound tensors. One backward per graph.
  void backward(VarId root) {
    if (nodes_[root.i].val.size() != 1)
      throw ShapeMismatchError("backward roots must be scalar (1x1)");
    acc(root)(0, 0) = S(1);
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.back) continue;
      n.back(*this, i);
    }
    for (auto& [tensor, id] : param_nodes_) {
      Node& n = nodes_[id.i];
      if (n.grad.size() == 0) continue;
      if (tensor->grad.size() == 0) tensor->zero_grad();
      tensor->grad += n.grad;
    }
  }

  // Index of the first node whose value contains NaN/Inf, or -1.
  int first_nonfinite(int from = 0) const {
    for (int i = from; i < size(); ++i)
      if (!nodes_[i].val.allFinite()) return i;
    return -1;
  }

  const std::string& label_at(int i) const { return nodes_[i].label; }

private:
  struct Node {
    Mat val;
    Mat grad;
    std::function<void(Graph&, int)> back;
    Tensor<S>* bound = nullptr;
    std::string label;
  };

  std::vector<Node> nodes_;
  std::map<Tensor<S>*, VarId> param_nodes_;

  Mat& acc(VarId v) {
    Node& n = nodes_[v.i];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  VarId push(Mat val, std::string label, std::function<void(Graph&, int)> back) {
    nodes_.push_back(Node{std::move(val), Mat(), std::move(back), nullptr, std::move(label)});
    return VarId{static_cast<int>(nodes_.size()) - 1};
  }

  std::string dims(VarId v) const {
    return std::to_string(val(v).rows()) + "x" + std::to_string(val(v).cols());
  }

  void check_same_dims(VarId a, VarId b, const char* op) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols())
      throw ShapeMismatchError(std::string(op) + ": dims disagree: " + dims(a) + " vs " + dims(b));
  }
};

}  // namespace msam::ag
