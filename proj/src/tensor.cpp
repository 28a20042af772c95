#include "mdml/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace mdml {

Eigen::Index shape_size(const Shape& s) {
  Eigen::Index n = 1;
  for (Eigen::Index d : s) n *= d;
  return n;
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

Tensor::Tensor(Shape s, Array d) : shape(std::move(s)), data(std::move(d)) {
  if (shape.empty()) throw ShapeError("tensor: shape must have at least one dimension");
  for (Eigen::Index dim : shape) {
    if (dim <= 0) throw ShapeError("tensor: dimension sizes must be positive, got " + shape_str(shape));
  }
  if (shape_size(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match value count " + std::to_string(data.size()));
  }
}

Eigen::Index Tensor::rows() const { return ndim() == 1 ? 1 : shape[0]; }
Eigen::Index Tensor::cols() const { return ndim() == 1 ? shape[0] : shape[1]; }

double Tensor::scalar() const {
  if (!is_scalar()) throw ShapeError("tensor: expected a scalar, got " + shape_str(shape));
  return data[0];
}

double& Tensor::at(Eigen::Index r, Eigen::Index c) { return data[r * cols() + c]; }
double Tensor::at(Eigen::Index r, Eigen::Index c) const { return data[r * cols() + c]; }

ConstMatMap Tensor::mat() const {
  if (ndim() > 2) throw ShapeError("tensor: matrix view needs rank <= 2, got " + shape_str(shape));
  return ConstMatMap(data.data(), rows(), cols());
}

MatMap Tensor::mat() {
  if (ndim() > 2) throw ShapeError("tensor: matrix view needs rank <= 2, got " + shape_str(shape));
  return MatMap(data.data(), rows(), cols());
}

Tensor Tensor::zeros(Shape s) {
  Eigen::Index n = shape_size(s);
  return Tensor(std::move(s), Array::Zero(n));
}

Tensor Tensor::full(Shape s, double v) {
  Eigen::Index n = shape_size(s);
  return Tensor(std::move(s), Array::Constant(n, v));
}

Tensor Tensor::from(Shape s, std::span<const double> values) {
  Array d(static_cast<Eigen::Index>(values.size()));
  for (Eigen::Index i = 0; i < d.size(); ++i) d[i] = values[static_cast<std::size_t>(i)];
  return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  Array d(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double v : values) d[i++] = v;
  return Tensor(Shape{d.size()}, std::move(d));
}

Tensor Tensor::scalar_value(double v) { return Tensor(Shape{1}, Array::Constant(1, v)); }

Tensor Tensor::uniform(Shape s, double lo, double hi, Rng& rng) {
  Eigen::Index n = shape_size(s);
  Array d(n);
  for (Eigen::Index i = 0; i < n; ++i) d[i] = rng.uniform(lo, hi);
  return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::normal(Shape s, double mean, double stddev, Rng& rng) {
  Eigen::Index n = shape_size(s);
  Array d(n);
  for (Eigen::Index i = 0; i < n; ++i) d[i] = mean + stddev * rng.normal();
  return Tensor(std::move(s), std::move(d));
}

// ---- graph ----

Tensor Graph::watch(const Tensor& value, std::string name) {
  Tensor out = value.detached();
  out.graph = this;
  out.node = add_node("leaf", out.shape, {}, nullptr);
  if (!name.empty()) nodes_.back().name = std::move(name);
  return out;
}

int Graph::add_node(const char* op, Shape shape, std::vector<int> inputs, BackwardFn backward) {
  if (backward_done_) throw GraphError("graph: cannot extend a graph after backward");
  nodes_.push_back(Node{op, std::move(shape), std::move(inputs), std::move(backward), {}});
  return static_cast<int>(nodes_.size()) - 1;
}

void Graph::accumulate(int node, const Array& g) {
  Array& slot = grads_[static_cast<std::size_t>(node)];
  if (slot.size() == 0) {
    slot = g;
  } else {
    slot += g;
  }
}

void Graph::backward(const Tensor& loss) {
  if (!loss.tracked() || loss.graph != this) throw GraphError("backward: loss is not tracked on this graph");
  if (!loss.is_scalar()) throw GraphError("backward: loss must be a scalar, got " + shape_str(loss.shape));
  if (backward_done_) throw GraphError("backward: graph has already been backwarded");
  backward_done_ = true;
  grads_.assign(nodes_.size(), Array());
  grads_[static_cast<std::size_t>(loss.node)] = Array::Ones(1);
  for (int i = loss.node; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (grads_[static_cast<std::size_t>(i)].size() == 0 || !n.backward) continue;
    n.backward(*this, grads_[static_cast<std::size_t>(i)]);
  }
}

bool Graph::has_grad(const Tensor& t) const {
  if (!t.tracked() || t.graph != this) return false;
  if (!backward_done_) return false;
  return grads_[static_cast<std::size_t>(t.node)].size() != 0;
}

Tensor Graph::grad(const Tensor& t) const {
  if (!t.tracked() || t.graph != this) throw GraphError("grad: tensor is not tracked on this graph");
  if (!backward_done_) throw GraphError("grad: backward has not been run");
  const Array& g = grads_[static_cast<std::size_t>(t.node)];
  if (g.size() == 0) return Tensor::zeros(t.shape);
  return Tensor(t.shape, g);
}

// ---- op plumbing ----

namespace {

Graph* common_graph(std::initializer_list<const Tensor*> ts) {
  Graph* g = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (g == nullptr) {
      g = t->graph;
    } else if (g != t->graph) {
      throw GraphError("op: operands belong to different graphs");
    }
  }
  return g;
}

int node_id(const Tensor& t) { return t.tracked() ? t.node : -1; }

void check_finite(const char* op, const Array& a) {
  if (!a.allFinite()) throw NumericError(std::string(op) + ": produced non-finite values");
}

Tensor finish(const char* op, Graph* g, Shape shape, Array data, std::vector<int> inputs, Graph::BackwardFn backward) {
  check_finite(op, data);
  Tensor out(std::move(shape), std::move(data));
  if (g != nullptr) {
    out.graph = g;
    out.node = g->add_node(op, out.shape, std::move(inputs), std::move(backward));
  }
  return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shapes disagree: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.ndim() > 2) throw ShapeError(std::string(op) + ": needs rank <= 2, got " + shape_str(t.shape));
}

}  // namespace

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw ShapeError("matmul: both operands must be rank 2, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
  }
  const Eigen::Index m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
  Array out(m * n);
  MatMap(out.data(), m, n).noalias() = ConstMatMap(a.data.data(), m, k) * ConstMatMap(b.data.data(), k, n);

  Graph* g = common_graph({&a, &b});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ia = node_id(a), ib = node_id(b);
    Array a_data = a.data, b_data = b.data;
    bw = [=](Graph& gr, const Array& up) {
      ConstMatMap dC(up.data(), m, n);
      if (ia >= 0) {
        Array ga(m * k);
        MatMap(ga.data(), m, k).noalias() = dC * ConstMatMap(b_data.data(), k, n).transpose();
        gr.accumulate(ia, ga);
      }
      if (ib >= 0) {
        Array gb(k * n);
        MatMap(gb.data(), k, n).noalias() = ConstMatMap(a_data.data(), m, k).transpose() * dC;
        gr.accumulate(ib, gb);
      }
    };
  }
  return finish("matmul", g, Shape{m, n}, std::move(out), {node_id(a), node_id(b)}, std::move(bw));
}

Tensor transpose(const Tensor& x) {
  if (x.ndim() != 2) throw ShapeError("transpose: needs rank 2, got " + shape_str(x.shape));
  const Eigen::Index m = x.shape[0], n = x.shape[1];
  Array out(m * n);
  MatMap(out.data(), n, m) = ConstMatMap(x.data.data(), m, n).transpose();

  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    bw = [=](Graph& gr, const Array& up) {
      Array gx(m * n);
      MatMap(gx.data(), m, n) = ConstMatMap(up.data(), n, m).transpose();
      gr.accumulate(ix, gx);
    };
  }
  return finish("transpose", g, Shape{n, m}, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Array out = a.data + b.data;
  Graph* g = common_graph({&a, &b});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ia = node_id(a), ib = node_id(b);
    bw = [=](Graph& gr, const Array& up) {
      if (ia >= 0) gr.accumulate(ia, up);
      if (ib >= 0) gr.accumulate(ib, up);
    };
  }
  return finish("add", g, a.shape, std::move(out), {node_id(a), node_id(b)}, std::move(bw));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Array out = a.data - b.data;
  Graph* g = common_graph({&a, &b});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ia = node_id(a), ib = node_id(b);
    bw = [=](Graph& gr, const Array& up) {
      if (ia >= 0) gr.accumulate(ia, up);
      if (ib >= 0) gr.accumulate(ib, Array(-up));
    };
  }
  return finish("sub", g, a.shape, std::move(out), {node_id(a), node_id(b)}, std::move(bw));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Array out = a.data * b.data;
  Graph* g = common_graph({&a, &b});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ia = node_id(a), ib = node_id(b);
    Array a_data = a.data, b_data = b.data;
    bw = [=](Graph& gr, const Array& up) {
      if (ia >= 0) gr.accumulate(ia, Array(up * b_data));
      if (ib >= 0) gr.accumulate(ib, Array(up * a_data));
    };
  }
  return finish("mul", g, a.shape, std::move(out), {node_id(a), node_id(b)}, std::move(bw));
}

Tensor scale(const Tensor& x, double s) {
  if (!std::isfinite(s)) throw ParameterError("scale: factor must be finite");
  Array out = x.data * s;
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    bw = [=](Graph& gr, const Array& up) { gr.accumulate(ix, Array(up * s)); };
  }
  return finish("scale", g, x.shape, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank2("add_bias", x);
  if (bias.ndim() != 1 || bias.shape[0] != x.cols()) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape) + " does not match columns of " + shape_str(x.shape));
  }
  const Eigen::Index m = x.rows(), n = x.cols();
  Array out(m * n);
  MatMap(out.data(), m, n) = ConstMatMap(x.data.data(), m, n).rowwise() + Eigen::Map<const Eigen::RowVectorXd>(bias.data.data(), n);

  Graph* g = common_graph({&x, &bias});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = node_id(x), ib = node_id(bias);
    bw = [=](Graph& gr, const Array& up) {
      if (ix >= 0) gr.accumulate(ix, up);
      if (ib >= 0) {
        Array gb(n);
        Eigen::Map<Eigen::RowVectorXd>(gb.data(), n) = ConstMatMap(up.data(), m, n).colwise().sum();
        gr.accumulate(ib, gb);
      }
    };
  }
  return finish("add_bias", g, x.shape, std::move(out), {node_id(x), node_id(bias)}, std::move(bw));
}

Tensor relu(const Tensor& x) {
  Array out = x.data.max(0.0);
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    Array x_data = x.data;
    bw = [=](Graph& gr, const Array& up) {
      gr.accumulate(ix, Array(up * (x_data > 0.0).cast<double>()));
    };
  }
  return finish("relu", g, x.shape, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor exp(const Tensor& x) {
  Array out = x.data.exp();
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    Array y = out;
    bw = [=](Graph& gr, const Array& up) { gr.accumulate(ix, Array(up * y)); };
  }
  return finish("exp", g, x.shape, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor log(const Tensor& x) {
  Array out = x.data.log();
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    Array x_data = x.data;
    bw = [=](Graph& gr, const Array& up) { gr.accumulate(ix, Array(up / x_data)); };
  }
  return finish("log", g, x.shape, std::move(out), {node_id(x)}, std::move(bw));
}

namespace {

// Rows of a 2-D view along which softmax-style ops normalize. axis==1 works
// on rows of [m x n]; axis==0 on columns (handled by transposing the walk).
struct AxisWalk {
  Eigen::Index outer, inner, outer_stride, inner_stride;
};

AxisWalk axis_walk(const char* op, const Tensor& x, int axis) {
  if (x.ndim() == 1) {
    if (axis != 0) throw ShapeError(std::string(op) + ": invalid axis " + std::to_string(axis) + " for " + shape_str(x.shape));
    return {1, x.shape[0], 0, 1};
  }
  if (x.ndim() == 2) {
    if (axis == 1) return {x.shape[0], x.shape[1], x.shape[1], 1};
    if (axis == 0) return {x.shape[1], x.shape[0], 1, x.shape[1]};
    throw ShapeError(std::string(op) + ": invalid axis " + std::to_string(axis) + " for " + shape_str(x.shape));
  }
  throw ShapeError(std::string(op) + ": needs rank <= 2, got " + shape_str(x.shape));
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  AxisWalk w = axis_walk("softmax", x, axis);
  if (w.inner == 0) throw ShapeError("softmax: empty reduction axis");
  Array out(x.size());
  for (Eigen::Index o = 0; o < w.outer; ++o) {
    const Eigen::Index base = o * w.outer_stride;
    double mx = x.data[base];
    for (Eigen::Index i = 1; i < w.inner; ++i) mx = std::max(mx, x.data[base + i * w.inner_stride]);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < w.inner; ++i) {
      double e = std::exp(x.data[base + i * w.inner_stride] - mx);
      out[base + i * w.inner_stride] = e;
      sum += e;
    }
    for (Eigen::Index i = 0; i < w.inner; ++i) out[base + i * w.inner_stride] /= sum;
  }

  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    Array y = out;
    bw = [=](Graph& gr, const Array& up) {
      Array gx(up.size());
      for (Eigen::Index o = 0; o < w.outer; ++o) {
        const Eigen::Index base = o * w.outer_stride;
        double dot = 0.0;
        for (Eigen::Index i = 0; i < w.inner; ++i) {
          const Eigen::Index idx = base + i * w.inner_stride;
          dot += up[idx] * y[idx];
        }
        for (Eigen::Index i = 0; i < w.inner; ++i) {
          const Eigen::Index idx = base + i * w.inner_stride;
          gx[idx] = y[idx] * (up[idx] - dot);
        }
      }
      gr.accumulate(ix, gx);
    };
  }
  return finish("softmax", g, x.shape, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor log_softmax(const Tensor& x, int axis) {
  AxisWalk w = axis_walk("log_softmax", x, axis);
  if (w.inner == 0) throw ShapeError("log_softmax: empty reduction axis");
  Array out(x.size());
  for (Eigen::Index o = 0; o < w.outer; ++o) {
    const Eigen::Index base = o * w.outer_stride;
    double mx = x.data[base];
    for (Eigen::Index i = 1; i < w.inner; ++i) mx = std::max(mx, x.data[base + i * w.inner_stride]);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < w.inner; ++i) sum += std::exp(x.data[base + i * w.inner_stride] - mx);
    const double lse = mx + std::log(sum);
    for (Eigen::Index i = 0; i < w.inner; ++i) {
      const Eigen::Index idx = base + i * w.inner_stride;
      out[idx] = x.data[idx] - lse;
    }
  }

  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    Array lp = out;
    bw = [=](Graph& gr, const Array& up) {
      Array gx(up.size());
      for (Eigen::Index o = 0; o < w.outer; ++o) {
        const Eigen::Index base = o * w.outer_stride;
        double usum = 0.0;
        for (Eigen::Index i = 0; i < w.inner; ++i) usum += up[base + i * w.inner_stride];
        for (Eigen::Index i = 0; i < w.inner; ++i) {
          const Eigen::Index idx = base + i * w.inner_stride;
          gx[idx] = up[idx] - std::exp(lp[idx]) * usum;
        }
      }
      gr.accumulate(ix, gx);
    };
  }
  return finish("log_softmax", g, x.shape, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_rank2("layer_norm", x);
  const Eigen::Index m = x.rows(), n = x.cols();
  if (gain.ndim() != 1 || gain.shape[0] != n || bias.ndim() != 1 || bias.shape[0] != n) {
    throw ShapeError("layer_norm: gain/bias must be length-" + std::to_string(n) + " vectors");
  }
  Array out(m * n);
  Array xhat(m * n);
  Array inv_std(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const Eigen::Index base = r * n;
    double mean = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) mean += x.data[base + j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double d = x.data[base + j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double s = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    inv_std[r] = s;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double h = (x.data[base + j] - mean) * s;
      xhat[base + j] = h;
      out[base + j] = h * gain.data[j] + bias.data[j];
    }
  }

  Graph* g = common_graph({&x, &gain, &bias});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = node_id(x), ig = node_id(gain), ib = node_id(bias);
    Array gain_data = gain.data;
    bw = [=](Graph& gr, const Array& up) {
      if (ix >= 0) {
        Array gx(m * n);
        for (Eigen::Index r = 0; r < m; ++r) {
          const Eigen::Index base = r * n;
          const double s = inv_std[r];
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (Eigen::Index j = 0; j < n; ++j) {
            const double dxhat = up[base + j] * gain_data[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat[base + j];
          }
          const double inv_n = 1.0 / static_cast<double>(n);
          for (Eigen::Index j = 0; j < n; ++j) {
            const double dxhat = up[base + j] * gain_data[j];
            gx[base + j] = s * (dxhat - inv_n * sum_dxhat - xhat[base + j] * inv_n * sum_dxhat_xhat);
          }
        }
        gr.accumulate(ix, gx);
      }
      if (ig >= 0) {
        Array gg = Array::Zero(n);
        for (Eigen::Index r = 0; r < m; ++r)
          for (Eigen::Index j = 0; j < n; ++j) gg[j] += up[r * n + j] * xhat[r * n + j];
        gr.accumulate(ig, gg);
      }
      if (ib >= 0) {
        Array gb = Array::Zero(n);
        for (Eigen::Index r = 0; r < m; ++r)
          for (Eigen::Index j = 0; j < n; ++j) gb[j] += up[r * n + j];
        gr.accumulate(ib, gb);
      }
    };
  }
  return finish("layer_norm", g, x.shape, std::move(out), {node_id(x), node_id(gain), node_id(bias)}, std::move(bw));
}

Tensor mean_pool(const Tensor& x, int axis) {
  if (x.ndim() != 2) throw ShapeError("mean_pool: needs rank 2, got " + shape_str(x.shape));
  if (axis != 0 && axis != 1) throw ShapeError("mean_pool: invalid axis " + std::to_string(axis));
  const Eigen::Index m = x.shape[0], n = x.shape[1];
  const Eigen::Index keep = axis == 0 ? n : m;
  const Eigen::Index reduce = axis == 0 ? m : n;
  if (reduce == 0) throw ShapeError("mean_pool: empty reduction axis");
  Array out = Array::Zero(keep);
  if (axis == 0) {
    Eigen::Map<Eigen::RowVectorXd>(out.data(), n) = ConstMatMap(x.data.data(), m, n).colwise().mean();
  } else {
    Eigen::Map<Eigen::VectorXd>(out.data(), m) = ConstMatMap(x.data.data(), m, n).rowwise().mean();
  }

  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    bw = [=](Graph& gr, const Array& up) {
      Array gx(m * n);
      const double inv = 1.0 / static_cast<double>(reduce);
      for (Eigen::Index r = 0; r < m; ++r)
        for (Eigen::Index c = 0; c < n; ++c) gx[r * n + c] = inv * (axis == 0 ? up[c] : up[r]);
      gr.accumulate(ix, gx);
    };
  }
  return finish("mean_pool", g, Shape{keep}, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor sum_all(const Tensor& x) {
  Array out = Array::Constant(1, x.data.sum());
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    const Eigen::Index sz = x.size();
    bw = [=](Graph& gr, const Array& up) {
      gr.accumulate(ix, Array(Array::Constant(sz, up[0])));
    };
  }
  return finish("sum_all", g, Shape{1}, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be rank 2");
  const Eigen::Index v = table.shape[0], d = table.shape[1];
  const Eigen::Index n = static_cast<Eigen::Index>(ids.size());
  if (n == 0) throw ShapeError("embedding_lookup: empty id sequence");
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw ShapeError("embedding_lookup: id " + std::to_string(id) + " out of range [0, " + std::to_string(v) + ")");
    }
  }
  Array out(n * d);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.segment(i * d, d) = table.data.segment(static_cast<Eigen::Index>(ids[static_cast<std::size_t>(i)]) * d, d);
  }

  Graph* g = common_graph({&table});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int it = table.node;
    std::vector<int> ids_copy(ids.begin(), ids.end());
    bw = [=](Graph& gr, const Array& up) {
      Array gt = Array::Zero(v * d);
      for (Eigen::Index i = 0; i < n; ++i) {
        gt.segment(static_cast<Eigen::Index>(ids_copy[static_cast<std::size_t>(i)]) * d, d) += up.segment(i * d, d);
      }
      gr.accumulate(it, gt);
    };
  }
  return finish("embedding_lookup", g, Shape{n, d}, std::move(out), {node_id(table)}, std::move(bw));
}

Eigen::Index count_non_pad(std::span<const int> target_ids, int pad_id) {
  Eigen::Index c = 0;
  for (int t : target_ids)
    if (t != pad_id) ++c;
  return c;
}

Tensor cross_entropy(const Tensor& log_probs, std::span<const int> target_ids, int pad_id) {
  if (log_probs.ndim() != 2) throw ShapeError("cross_entropy: log_probs must be rank 2");
  const Eigen::Index n = log_probs.shape[0], v = log_probs.shape[1];
  if (static_cast<Eigen::Index>(target_ids.size()) != n) {
    throw ShapeError("cross_entropy: " + std::to_string(target_ids.size()) + " targets for " + std::to_string(n) + " rows");
  }
  Eigen::Index valid = 0;
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = target_ids[static_cast<std::size_t>(i)];
    if (t == pad_id) continue;
    if (t < 0 || t >= v) throw ShapeError("cross_entropy: target id " + std::to_string(t) + " out of range [0, " + std::to_string(v) + ")");
    total -= log_probs.data[i * v + t];
    ++valid;
  }
  if (valid == 0) throw ShapeError("cross_entropy: no non-pad targets (empty reduction)");
  Array out = Array::Constant(1, total / static_cast<double>(valid));

  Graph* g = common_graph({&log_probs});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ilp = log_probs.node;
    std::vector<int> targets(target_ids.begin(), target_ids.end());
    const Eigen::Index valid_count = valid;
    bw = [=](Graph& gr, const Array& up) {
      Array glp = Array::Zero(n * v);
      const double w = -up[0] / static_cast<double>(valid_count);
      for (Eigen::Index i = 0; i < n; ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        if (t == pad_id) continue;
        glp[i * v + t] += w;
      }
      gr.accumulate(ilp, glp);
    };
  }
  return finish("cross_entropy", g, Shape{1}, std::move(out), {node_id(log_probs)}, std::move(bw));
}

Tensor grad_reverse(const Tensor& x, double lambda_rev) {
  if (!(lambda_rev >= 0.0)) throw ParameterError("grad_reverse: lambda_rev must be nonnegative");
  Array out = x.data;  // forward identity, bitwise
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    bw = [=](Graph& gr, const Array& up) { gr.accumulate(ix, Array(up * -lambda_rev)); };
  }
  return finish("grad_reverse", g, x.shape, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor slice_rows(const Tensor& x, Eigen::Index start, Eigen::Index count) {
  if (x.ndim() != 2) throw ShapeError("slice_rows: needs rank 2, got " + shape_str(x.shape));
  const Eigen::Index m = x.shape[0], n = x.shape[1];
  if (start < 0 || count <= 0 || start + count > m) {
    throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) + ") outside " + shape_str(x.shape));
  }
  Array out = x.data.segment(start * n, count * n);
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    bw = [=](Graph& gr, const Array& up) {
      Array gx = Array::Zero(m * n);
      gx.segment(start * n, count * n) = up;
      gr.accumulate(ix, gx);
    };
  }
  return finish("slice_rows", g, Shape{count, n}, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor slice_cols(const Tensor& x, Eigen::Index start, Eigen::Index count) {
  if (x.ndim() != 2) throw ShapeError("slice_cols: needs rank 2, got " + shape_str(x.shape));
  const Eigen::Index m = x.shape[0], n = x.shape[1];
  if (start < 0 || count <= 0 || start + count > n) {
    throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) + ") outside " + shape_str(x.shape));
  }
  Array out(m * count);
  MatMap(out.data(), m, count) = ConstMatMap(x.data.data(), m, n).middleCols(start, count);
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    bw = [=](Graph& gr, const Array& up) {
      Array gx = Array::Zero(m * n);
      MatMap(gx.data(), m, n).middleCols(start, count) = ConstMatMap(up.data(), m, count);
      gr.accumulate(ix, gx);
    };
  }
  return finish("slice_cols", g, Shape{m, count}, std::move(out), {node_id(x)}, std::move(bw));
}

Tensor concat_cols(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("concat_cols: no inputs");
  const Eigen::Index m = xs[0].rows();
  Eigen::Index total = 0;
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(xs.size());
  for (const Tensor& t : xs) {
    if (t.ndim() != 2 || t.shape[0] != m) throw ShapeError("concat_cols: row counts disagree");
    total += t.shape[1];
    ptrs.push_back(&t);
  }
  Array out(m * total);
  MatMap outm(out.data(), m, total);
  Eigen::Index off = 0;
  for (const Tensor* t : ptrs) {
    outm.middleCols(off, t->shape[1]) = ConstMatMap(t->data.data(), m, t->shape[1]);
    off += t->shape[1];
  }

  Graph* g = nullptr;
  for (const Tensor& t : xs) {
    if (t.tracked()) {
      if (g != nullptr && g != t.graph) throw GraphError("concat_cols: operands belong to different graphs");
      g = t.graph;
    }
  }
  std::vector<int> inputs;
  std::vector<Eigen::Index> widths;
  for (const Tensor& t : xs) {
    inputs.push_back(node_id(t));
    widths.push_back(t.shape[1]);
  }
  Graph::BackwardFn bw;
  if (g != nullptr) {
    std::vector<int> in_copy = inputs;
    bw = [=](Graph& gr, const Array& up) {
      ConstMatMap upm(up.data(), m, total);
      Eigen::Index o = 0;
      for (std::size_t i = 0; i < in_copy.size(); ++i) {
        if (in_copy[i] >= 0) {
          Array gx(m * widths[i]);
          MatMap(gx.data(), m, widths[i]) = upm.middleCols(o, widths[i]);
          gr.accumulate(in_copy[i], gx);
        }
        o += widths[i];
      }
    };
  }
  return finish("concat_cols", g, Shape{m, total}, std::move(out), std::move(inputs), std::move(bw));
}

Tensor row_scale(const Tensor& x, const Tensor& weights) {
  if (x.ndim() != 2) throw ShapeError("row_scale: needs rank 2, got " + shape_str(x.shape));
  const Eigen::Index m = x.shape[0], n = x.shape[1];
  if (weights.ndim() != 1 || weights.shape[0] != m) {
    throw ShapeError("row_scale: weights " + shape_str(weights.shape) + " do not match rows of " + shape_str(x.shape));
  }
  Array out(m * n);
  for (Eigen::Index r = 0; r < m; ++r) out.segment(r * n, n) = x.data.segment(r * n, n) * weights.data[r];

  Graph* g = common_graph({&x, &weights});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = node_id(x), iw = node_id(weights);
    Array x_data = x.data, w_data = weights.data;
    bw = [=](Graph& gr, const Array& up) {
      if (ix >= 0) {
        Array gx(m * n);
        for (Eigen::Index r = 0; r < m; ++r) gx.segment(r * n, n) = up.segment(r * n, n) * w_data[r];
        gr.accumulate(ix, gx);
      }
      if (iw >= 0) {
        Array gw(m);
        for (Eigen::Index r = 0; r < m; ++r) gw[r] = (up.segment(r * n, n) * x_data.segment(r * n, n)).sum();
        gr.accumulate(iw, gw);
      }
    };
  }
  return finish("row_scale", g, x.shape, std::move(out), {node_id(x), node_id(weights)}, std::move(bw));
}

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_size(s) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(s));
  }
  Array out = x.data;
  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    bw = [=](Graph& gr, const Array& up) { gr.accumulate(ix, up); };
  }
  return finish("reshape", g, std::move(s), std::move(out), {node_id(x)}, std::move(bw));
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  Array mask(x.size());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < x.size(); ++i) mask[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
  Array out = x.data * mask;

  Graph* g = common_graph({&x});
  Graph::BackwardFn bw;
  if (g != nullptr) {
    const int ix = x.node;
    bw = [=](Graph& gr, const Array& up) { gr.accumulate(ix, Array(up * mask)); };
  }
  return finish("dropout", g, x.shape, std::move(out), {node_id(x)}, std::move(bw));
}

}  // namespace mdml
