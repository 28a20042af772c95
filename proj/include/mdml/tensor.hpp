#pragma once

#include <Eigen/Dense>

#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdml/rng.hpp"

namespace mdml {

using Array = Eigen::ArrayXd;
using Shape = std::vector<Eigen::Index>;
using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class ParameterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Eigen::Index shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Graph;

/// Dense row-major double tensor. Optionally tied to a node of a Graph, in
/// which case operations on it are recorded for reverse-mode backprop.
struct Tensor {
  Shape shape;
  Array data;
  Graph* graph = nullptr;
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, Array d);

  Eigen::Index size() const { return data.size(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  Eigen::Index dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  Eigen::Index rows() const;
  Eigen::Index cols() const;
  bool tracked() const { return graph != nullptr && node >= 0; }
  bool is_scalar() const { return size() == 1; }
  double scalar() const;

  double& at(Eigen::Index i) { return data[i]; }
  double at(Eigen::Index i) const { return data[i]; }
  double& at(Eigen::Index r, Eigen::Index c);
  double at(Eigen::Index r, Eigen::Index c) const;

  ConstMatMap mat() const;  // 2-D view ([n] tensors map to [1xn])
  MatMap mat();

  Tensor detached() const { return Tensor(shape, data); }

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor from(Shape s, std::span<const double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor scalar_value(double v);
  static Tensor uniform(Shape s, double lo, double hi, Rng& rng);
  static Tensor normal(Shape s, double mean, double stddev, Rng& rng);
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order by construction; backward walks the tape once in
/// reverse. A graph may be backwarded exactly once.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers a differentiable leaf (a parameter). Returns a tracked copy.
  Tensor watch(const Tensor& value, std::string name = {});

  void backward(const Tensor& loss);
  bool backward_done() const { return backward_done_; }

  /// Gradient of the loss w.r.t. a tracked tensor; zeros when the tensor is
  /// not on a path to the loss.
  Tensor grad(const Tensor& t) const;
  bool has_grad(const Tensor& t) const;

  std::size_t node_count() const { return nodes_.size(); }

  // --- used by the op implementations ---
  using BackwardFn = std::function<void(Graph&, const Array& upstream)>;
  int add_node(const char* op, Shape shape, std::vector<int> inputs, BackwardFn backward);
  void accumulate(int node, const Array& g);
  const Array& upstream(int node) const { return grads_[static_cast<std::size_t>(node)]; }

 private:
  struct Node {
    const char* op;
    Shape shape;
    std::vector<int> inputs;
    BackwardFn backward;
    std::string name;  // leaves only
  };
  std::vector<Node> nodes_;
  std::vector<Array> grads_;
  bool backward_done_ = false;
};

// ---- op library (free functions; track when any input is tracked) ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // the only broadcast: [m x n] + [n]
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor mean_pool(const Tensor& x, int axis);
Tensor sum_all(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
Tensor cross_entropy(const Tensor& log_probs, std::span<const int> target_ids, int pad_id);
Tensor grad_reverse(const Tensor& x, double lambda_rev);
Tensor slice_rows(const Tensor& x, Eigen::Index start, Eigen::Index count);
Tensor slice_cols(const Tensor& x, Eigen::Index start, Eigen::Index count);
Tensor concat_cols(std::span<const Tensor> xs);
Tensor row_scale(const Tensor& x, const Tensor& weights);  // scales row i by weights[i]
Tensor reshape(const Tensor& x, Shape s);
Tensor dropout(const Tensor& x, double rate, Rng& rng);

/// Number of positions in `target_ids` not equal to pad_id.
Eigen::Index count_non_pad(std::span<const int> target_ids, int pad_id);

constexpr double kLayerNormEpsilon = 1e-5;

}  // namespace mdml
