#include "scmil/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace scmil {

namespace {

constexpr double kNormGuard = 1e-12;

void check_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + ": non-finite output");
  }
}

// Decompose a shape around `axis` as outer x len x inner for slice loops.
struct AxisView {
  size_t outer = 1, len = 1, inner = 1;
  AxisView(const std::vector<size_t>& shape, int axis, const char* op) {
    if (axis < 0 || static_cast<size_t>(axis) >= shape.size()) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                       " out of range for " + Tensor::shape_str(shape));
    }
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    len = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
  }
  size_t idx(size_t o, size_t t, size_t i) const { return (o * len + t) * inner + i; }
};

}  // namespace

Tensor& Tape::GradBuffer::acc(NodeId id, const std::vector<size_t>& shape) {
  size_t k = static_cast<size_t>(id);
  if (!touched[k]) {
    grads[k] = Tensor::zeros(shape);
    touched[k] = 1;
  }
  return grads[k];
}

const Tensor& Tape::val(NodeId id) const {
  return nodes_.at(static_cast<size_t>(id)).value;
}

void Tape::check_id(NodeId id, const char* op) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
    throw ShapeError(std::string(op) + ": node id " + std::to_string(id) +
                     " not on tape");
  }
}

NodeId Tape::push(Tensor value, const char* op,
                  std::function<void(const Tensor&, GradBuffer&)> backward) {
  check_finite(value, op);
  nodes_.push_back(Node{std::move(value), op, std::move(backward)});
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::input(Tensor value) {
  return push(std::move(value), "input", nullptr);
}

NodeId Tape::matmul(NodeId a, NodeId b) {
  check_id(a, "matmul");
  check_id(b, "matmul");
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) {
    throw ShapeError("matmul: shape mismatch " + A.shape_str() + " . " + B.shape_str());
  }
  size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C({m, n});
  for (size_t i = 0; i < m; ++i) {
    for (size_t p = 0; p < k; ++p) {
      double aip = A.at(i, p);
      if (aip == 0.0) continue;
      const double* brow = &B.values[p * n];
      double* crow = &C.values[i * n];
      for (size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return push(std::move(C), "matmul", [this, a, b, m, k, n](const Tensor& g, GradBuffer& buf) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    Tensor& dA = buf.acc(a, A.shape);
    Tensor& dB = buf.acc(b, B.shape);
    // dA += g . B^T, dB += A^T . g
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < n; ++j) {
        double gij = g.at(i, j);
        if (gij == 0.0) continue;
        for (size_t p = 0; p < k; ++p) dA.at(i, p) += gij * B.at(p, j);
      }
    }
    for (size_t p = 0; p < k; ++p) {
      for (size_t i = 0; i < m; ++i) {
        double aip = A.at(i, p);
        if (aip == 0.0) continue;
        for (size_t j = 0; j < n; ++j) dB.at(p, j) += aip * g.at(i, j);
      }
    }
  });
}

NodeId Tape::add(NodeId a, NodeId b) {
  check_id(a, "add");
  check_id(b, "add");
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (A.same_shape(B)) {
    Tensor C = A;
    for (size_t i = 0; i < C.numel(); ++i) C.values[i] += B.values[i];
    return push(std::move(C), "add", [a, b](const Tensor& g, GradBuffer& buf) {
      Tensor& dA = buf.acc(a, g.shape);
      Tensor& dB = buf.acc(b, g.shape);
      for (size_t i = 0; i < g.numel(); ++i) {
        dA.values[i] += g.values[i];
        dB.values[i] += g.values[i];
      }
    });
  }
  // (m x n) + bias (n), broadcast over rows
  if (A.rank() == 2 && B.rank() == 1 && A.cols() == B.shape[0]) {
    size_t m = A.rows(), n = A.cols();
    Tensor C = A;
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < n; ++j) C.at(i, j) += B.values[j];
    }
    return push(std::move(C), "add", [this, a, b, m, n](const Tensor& g, GradBuffer& buf) {
      Tensor& dA = buf.acc(a, val(a).shape);
      Tensor& dB = buf.acc(b, val(b).shape);
      for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < n; ++j) {
          dA.at(i, j) += g.at(i, j);
          dB.values[j] += g.at(i, j);
        }
      }
    });
  }
  throw ShapeError("add: shape mismatch " + A.shape_str() + " + " + B.shape_str());
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check_id(a, "mul");
  check_id(b, "mul");
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.same_shape(B)) {
    throw ShapeError("mul: shape mismatch " + A.shape_str() + " * " + B.shape_str());
  }
  Tensor C = A;
  for (size_t i = 0; i < C.numel(); ++i) C.values[i] *= B.values[i];
  return push(std::move(C), "mul", [this, a, b](const Tensor& g, GradBuffer& buf) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    Tensor& dA = buf.acc(a, A.shape);
    Tensor& dB = buf.acc(b, B.shape);
    for (size_t i = 0; i < g.numel(); ++i) {
      dA.values[i] += g.values[i] * B.values[i];
      dB.values[i] += g.values[i] * A.values[i];
    }
  });
}

NodeId Tape::scale(NodeId a, double c) {
  check_id(a, "scale");
  Tensor C = val(a);
  for (double& v : C.values) v *= c;
  return push(std::move(C), "scale", [this, a, c](const Tensor& g, GradBuffer& buf) {
    Tensor& dA = buf.acc(a, val(a).shape);
    for (size_t i = 0; i < g.numel(); ++i) dA.values[i] += c * g.values[i];
  });
}

NodeId Tape::relu(NodeId a) {
  check_id(a, "relu");
  Tensor C = val(a);
  for (double& v : C.values) v = v > 0.0 ? v : 0.0;
  return push(std::move(C), "relu", [this, a](const Tensor& g, GradBuffer& buf) {
    const Tensor& A = val(a);
    Tensor& dA = buf.acc(a, A.shape);
    for (size_t i = 0; i < g.numel(); ++i) {
      if (A.values[i] > 0.0) dA.values[i] += g.values[i];
    }
  });
}

NodeId Tape::tanh(NodeId a) {
  check_id(a, "tanh");
  Tensor C = val(a);
  for (double& v : C.values) v = std::tanh(v);
  NodeId out = push(std::move(C), "tanh", nullptr);
  nodes_.back().backward = [this, a, out](const Tensor& g, GradBuffer& buf) {
    const Tensor& Y = val(out);
    Tensor& dA = buf.acc(a, val(a).shape);
    for (size_t i = 0; i < g.numel(); ++i) {
      dA.values[i] += g.values[i] * (1.0 - Y.values[i] * Y.values[i]);
    }
  };
  return out;
}

NodeId Tape::exp(NodeId a) {
  check_id(a, "exp");
  Tensor C = val(a);
  for (double& v : C.values) v = std::exp(v);
  NodeId out = push(std::move(C), "exp", nullptr);
  nodes_.back().backward = [this, a, out](const Tensor& g, GradBuffer& buf) {
    const Tensor& Y = val(out);
    Tensor& dA = buf.acc(a, val(a).shape);
    for (size_t i = 0; i < g.numel(); ++i) dA.values[i] += g.values[i] * Y.values[i];
  };
  return out;
}

NodeId Tape::log(NodeId a) {
  check_id(a, "log");
  Tensor C = val(a);
  for (double& v : C.values) v = std::log(v);
  return push(std::move(C), "log", [this, a](const Tensor& g, GradBuffer& buf) {
    const Tensor& A = val(a);
    Tensor& dA = buf.acc(a, A.shape);
    for (size_t i = 0; i < g.numel(); ++i) dA.values[i] += g.values[i] / A.values[i];
  });
}

NodeId Tape::reduce_sum(NodeId a) {
  check_id(a, "reduce_sum");
  const Tensor& A = val(a);
  double s = 0.0;
  for (double v : A.values) s += v;
  return push(Tensor::scalar(s), "reduce_sum", [this, a](const Tensor& g, GradBuffer& buf) {
    Tensor& dA = buf.acc(a, val(a).shape);
    for (double& v : dA.values) v += g.values[0];
  });
}

NodeId Tape::reduce_mean(NodeId a) {
  check_id(a, "reduce_mean");
  const Tensor& A = val(a);
  if (A.numel() == 0) throw ShapeError("reduce_mean: empty tensor");
  double s = 0.0;
  for (double v : A.values) s += v;
  double inv_n = 1.0 / static_cast<double>(A.numel());
  return push(Tensor::scalar(s * inv_n), "reduce_mean",
              [this, a, inv_n](const Tensor& g, GradBuffer& buf) {
                Tensor& dA = buf.acc(a, val(a).shape);
                for (double& v : dA.values) v += g.values[0] * inv_n;
              });
}

NodeId Tape::softmax(NodeId a, int axis) {
  check_id(a, "softmax");
  const Tensor& A = val(a);
  AxisView ax(A.shape, axis, "softmax");
  Tensor Y(A.shape);
  for (size_t o = 0; o < ax.outer; ++o) {
    for (size_t i = 0; i < ax.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (size_t t = 0; t < ax.len; ++t) m = std::max(m, A.values[ax.idx(o, t, i)]);
      double s = 0.0;
      for (size_t t = 0; t < ax.len; ++t) {
        double e = std::exp(A.values[ax.idx(o, t, i)] - m);
        Y.values[ax.idx(o, t, i)] = e;
        s += e;
      }
      for (size_t t = 0; t < ax.len; ++t) Y.values[ax.idx(o, t, i)] /= s;
      // Pin the slice sum to exactly 1.0: recompute the last element as the
      // complement of the running sum of the others (exact by Sterbenz when
      // that sum is >= 0.5, and within half an ulp of 1 otherwise).
      double partial = 0.0;
      for (size_t t = 0; t + 1 < ax.len; ++t) partial += Y.values[ax.idx(o, t, i)];
      double last = 1.0 - partial;
      if (last > 0.0) Y.values[ax.idx(o, ax.len - 1, i)] = last;
    }
  }
  NodeId out = push(std::move(Y), "softmax", nullptr);
  nodes_.back().backward = [this, a, out, ax](const Tensor& g, GradBuffer& buf) {
    const Tensor& Y = val(out);
    Tensor& dA = buf.acc(a, val(a).shape);
    for (size_t o = 0; o < ax.outer; ++o) {
      for (size_t i = 0; i < ax.inner; ++i) {
        double dy_dot_y = 0.0;
        for (size_t t = 0; t < ax.len; ++t) {
          size_t k = ax.idx(o, t, i);
          dy_dot_y += g.values[k] * Y.values[k];
        }
        for (size_t t = 0; t < ax.len; ++t) {
          size_t k = ax.idx(o, t, i);
          dA.values[k] += Y.values[k] * (g.values[k] - dy_dot_y);
        }
      }
    }
  };
  return out;
}

NodeId Tape::log_softmax(NodeId a, int axis) {
  check_id(a, "log_softmax");
  const Tensor& A = val(a);
  AxisView ax(A.shape, axis, "log_softmax");
  Tensor Y(A.shape);
  for (size_t o = 0; o < ax.outer; ++o) {
    for (size_t i = 0; i < ax.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (size_t t = 0; t < ax.len; ++t) m = std::max(m, A.values[ax.idx(o, t, i)]);
      double s = 0.0;
      for (size_t t = 0; t < ax.len; ++t) s += std::exp(A.values[ax.idx(o, t, i)] - m);
      double lse = m + std::log(s);
      for (size_t t = 0; t < ax.len; ++t) {
        size_t k = ax.idx(o, t, i);
        Y.values[k] = A.values[k] - lse;
      }
    }
  }
  NodeId out = push(std::move(Y), "log_softmax", nullptr);
  nodes_.back().backward = [this, a, out, ax](const Tensor& g, GradBuffer& buf) {
    const Tensor& Y = val(out);
    Tensor& dA = buf.acc(a, val(a).shape);
    for (size_t o = 0; o < ax.outer; ++o) {
      for (size_t i = 0; i < ax.inner; ++i) {
        double g_sum = 0.0;
        for (size_t t = 0; t < ax.len; ++t) g_sum += g.values[ax.idx(o, t, i)];
        for (size_t t = 0; t < ax.len; ++t) {
          size_t k = ax.idx(o, t, i);
          dA.values[k] += g.values[k] - std::exp(Y.values[k]) * g_sum;
        }
      }
    }
  };
  return out;
}

NodeId Tape::l2_normalize(NodeId a, int axis) {
  check_id(a, "l2_normalize");
  const Tensor& A = val(a);
  AxisView ax(A.shape, axis, "l2_normalize");
  Tensor Y(A.shape);
  for (size_t o = 0; o < ax.outer; ++o) {
    for (size_t i = 0; i < ax.inner; ++i) {
      double ss = 0.0;
      for (size_t t = 0; t < ax.len; ++t) {
        double v = A.values[ax.idx(o, t, i)];
        ss += v * v;
      }
      double denom = std::sqrt(ss) + kNormGuard;
      for (size_t t = 0; t < ax.len; ++t) {
        size_t k = ax.idx(o, t, i);
        Y.values[k] = A.values[k] / denom;
      }
    }
  }
  return push(std::move(Y), "l2_normalize", [this, a, ax](const Tensor& g, GradBuffer& buf) {
    const Tensor& A = val(a);
    Tensor& dA = buf.acc(a, A.shape);
    for (size_t o = 0; o < ax.outer; ++o) {
      for (size_t i = 0; i < ax.inner; ++i) {
        double ss = 0.0, g_dot_x = 0.0;
        for (size_t t = 0; t < ax.len; ++t) {
          size_t k = ax.idx(o, t, i);
          ss += A.values[k] * A.values[k];
          g_dot_x += g.values[k] * A.values[k];
        }
        double norm = std::sqrt(ss);
        double denom = norm + kNormGuard;
        double coef = g_dot_x / (std::max(norm, kNormGuard) * denom * denom);
        for (size_t t = 0; t < ax.len; ++t) {
          size_t k = ax.idx(o, t, i);
          dA.values[k] += g.values[k] / denom - A.values[k] * coef;
        }
      }
    }
  });
}

NodeId Tape::dot(NodeId a, NodeId b) {
  check_id(a, "dot");
  check_id(b, "dot");
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (A.rank() != 1 || B.rank() != 1 || A.numel() != B.numel()) {
    throw ShapeError("dot: shape mismatch " + A.shape_str() + " . " + B.shape_str());
  }
  double s = 0.0;
  for (size_t i = 0; i < A.numel(); ++i) s += A.values[i] * B.values[i];
  return push(Tensor::scalar(s), "dot", [this, a, b](const Tensor& g, GradBuffer& buf) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    Tensor& dA = buf.acc(a, A.shape);
    Tensor& dB = buf.acc(b, B.shape);
    for (size_t i = 0; i < A.numel(); ++i) {
      dA.values[i] += g.values[0] * B.values[i];
      dB.values[i] += g.values[0] * A.values[i];
    }
  });
}

NodeId Tape::transpose(NodeId a) {
  check_id(a, "transpose");
  const Tensor& A = val(a);
  if (A.rank() != 2) throw ShapeError("transpose: rank-2 expected, got " + A.shape_str());
  size_t m = A.rows(), n = A.cols();
  Tensor C({n, m});
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j < n; ++j) C.at(j, i) = A.at(i, j);
  }
  return push(std::move(C), "transpose", [this, a, m, n](const Tensor& g, GradBuffer& buf) {
    Tensor& dA = buf.acc(a, val(a).shape);
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j < n; ++j) dA.at(i, j) += g.at(j, i);
    }
  });
}

NodeId Tape::reshape(NodeId a, std::vector<size_t> shape) {
  check_id(a, "reshape");
  const Tensor& A = val(a);
  if (Tensor::numel_of(shape) != A.numel()) {
    throw ShapeError("reshape: cannot view " + A.shape_str() + " as " +
                     Tensor::shape_str(shape));
  }
  Tensor C(shape, A.values);
  return push(std::move(C), "reshape", [this, a](const Tensor& g, GradBuffer& buf) {
    Tensor& dA = buf.acc(a, val(a).shape);
    for (size_t i = 0; i < g.numel(); ++i) dA.values[i] += g.values[i];
  });
}

NodeId Tape::stack_rows(const std::vector<NodeId>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  for (NodeId r : rows) check_id(r, "stack_rows");
  size_t d = val(rows[0]).numel();
  for (NodeId r : rows) {
    const Tensor& R = val(r);
    if (R.rank() != 1 || R.numel() != d) {
      throw ShapeError("stack_rows: row shape mismatch " + R.shape_str());
    }
  }
  size_t b = rows.size();
  Tensor C({b, d});
  for (size_t i = 0; i < b; ++i) {
    const Tensor& R = val(rows[i]);
    std::copy(R.values.begin(), R.values.end(), C.values.begin() + static_cast<long>(i * d));
  }
  return push(std::move(C), "stack_rows", [this, rows, d](const Tensor& g, GradBuffer& buf) {
    for (size_t i = 0; i < rows.size(); ++i) {
      Tensor& dR = buf.acc(rows[i], val(rows[i]).shape);
      for (size_t j = 0; j < d; ++j) dR.values[j] += g.at(i, j);
    }
  });
}

NodeId Tape::gather(NodeId a, std::vector<size_t> index_per_row) {
  check_id(a, "gather");
  const Tensor& A = val(a);
  if (A.rank() != 2 || index_per_row.size() != A.rows()) {
    throw ShapeError("gather: need rank-2 input with one index per row, got " +
                     A.shape_str() + " and " + std::to_string(index_per_row.size()) +
                     " indices");
  }
  size_t m = A.rows(), n = A.cols();
  for (size_t idx : index_per_row) {
    if (idx >= n) {
      throw ShapeError("gather: index " + std::to_string(idx) + " out of range for " +
                       A.shape_str());
    }
  }
  Tensor C({m});
  for (size_t i = 0; i < m; ++i) C.values[i] = A.at(i, index_per_row[i]);
  return push(std::move(C), "gather",
              [this, a, index_per_row](const Tensor& g, GradBuffer& buf) {
                Tensor& dA = buf.acc(a, val(a).shape);
                for (size_t i = 0; i < g.numel(); ++i) {
                  dA.at(i, index_per_row[i]) += g.values[i];
                }
              });
}

GradMap Tape::backward(NodeId loss) const {
  check_id(loss, "backward");
  if (!val(loss).is_scalar()) {
    throw ShapeError("backward: loss node must be scalar, got " + val(loss).shape_str());
  }
  GradBuffer buf;
  buf.grads.resize(nodes_.size());
  buf.touched.assign(nodes_.size(), 0);
  buf.acc(loss, {}).values[0] = 1.0;
  for (NodeId i = loss; i >= 0; --i) {
    size_t k = static_cast<size_t>(i);
    if (!buf.touched[k] || !nodes_[k].backward) continue;
    nodes_[k].backward(buf.grads[k], buf);
  }
  for (size_t k = 0; k < nodes_.size(); ++k) {
    if (!buf.touched[k]) buf.grads[k] = Tensor::zeros(nodes_[k].value.shape);
  }
  return GradMap(std::move(buf.grads));
}

}  // namespace scmil
