#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "scmil/tensor.hpp"

namespace scmil {

using NodeId = int;

// Gradients by node id after a backward pass. Nodes with no path to the
// loss report zeros.
class GradMap {
 public:
  explicit GradMap(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
  const Tensor& at(NodeId id) const { return grads_.at(static_cast<size_t>(id)); }
  size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

// Reverse-mode tape over dense fp64 tensors. Every op appends one node, so
// node ids are already a topological order; backward walks them once in
// reverse. A tape and its tensors belong to one logical worker.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf holding a value (parameter, batch data, constant mask).
  NodeId input(Tensor value);

  NodeId matmul(NodeId a, NodeId b);       // (m x k) . (k x n)
  NodeId add(NodeId a, NodeId b);          // same shape, or (m x n) + row bias (n)
  NodeId mul(NodeId a, NodeId b);          // elementwise, same shape
  NodeId scale(NodeId a, double c);
  NodeId relu(NodeId a);
  NodeId tanh(NodeId a);
  NodeId exp(NodeId a);
  NodeId log(NodeId a);
  NodeId reduce_sum(NodeId a);             // -> scalar
  NodeId reduce_mean(NodeId a);            // -> scalar
  NodeId softmax(NodeId a, int axis);
  NodeId log_softmax(NodeId a, int axis);  // direct form, not log(softmax)
  NodeId l2_normalize(NodeId a, int axis);
  NodeId dot(NodeId a, NodeId b);          // vectors -> scalar

  NodeId transpose(NodeId a);              // rank 2
  NodeId reshape(NodeId a, std::vector<size_t> shape);
  NodeId stack_rows(const std::vector<NodeId>& rows);  // B vectors (d) -> B x d
  // out[i] = in[i, index[i]]; backward scatters. Used to pick true-class
  // log-probabilities.
  NodeId gather(NodeId a, std::vector<size_t> index_per_row);

  const Tensor& value(NodeId id) const { return nodes_.at(static_cast<size_t>(id)).value; }
  size_t size() const { return nodes_.size(); }

  // Gradients of a scalar loss w.r.t. every node. d loss / d loss = 1.
  GradMap backward(NodeId loss) const;

 private:
  struct GradBuffer {
    std::vector<Tensor> grads;
    std::vector<char> touched;
    Tensor& acc(NodeId id, const std::vector<size_t>& shape);
  };

  struct Node {
    Tensor value;
    std::string op;
    std::function<void(const Tensor& out_grad, GradBuffer& buf)> backward;
  };

  NodeId push(Tensor value, const char* op,
              std::function<void(const Tensor&, GradBuffer&)> backward);
  const Tensor& val(NodeId id) const;
  void check_id(NodeId id, const char* op) const;

  std::deque<Node> nodes_;  // deque: value() references stay valid across pushes
};

}  // namespace scmil
