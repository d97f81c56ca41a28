#include "questmf/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace questmf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap cmap(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

MatMap mmap(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tensor& GradientMap::at(Value param) const {
  for (Node* n : params_)
    if (n == param.node()) return n->grad;
  throw std::invalid_argument("gradient map: value is not a trainable leaf of the swept tape");
}

const Tensor& GradientMap::at_storage(const Tensor* storage) const {
  for (Node* n : params_)
    if (n->external == storage) return n->grad;
  throw std::invalid_argument("gradient map: storage does not back any trainable leaf");
}

bool GradientMap::contains(Value param) const {
  for (Node* n : params_)
    if (n == param.node()) return true;
  return false;
}

Node* Tape::make(Tensor out, std::vector<Node*> inputs) {
  auto node = std::make_unique<Node>();
  node->owned = std::move(out);
  node->inputs = std::move(inputs);
  node->owner = this;
  node->index = nodes_.size();
  for (Node* in : node->inputs)
    if (in->needs_grad) node->needs_grad = true;
  nodes_.push_back(std::move(node));
  return nodes_.back().get();
}

void Tape::check_owned(Value v, const char* op) const {
  require(v.valid(), std::string(op) + ": empty value");
  require(v.node()->owner == this, std::string(op) + ": value belongs to a different tape");
}

Value Tape::check2(Value a, Value b, const char* op) const {
  check_owned(a, op);
  check_owned(b, op);
  require(a.tensor().same_shape(b.tensor()),
          std::string(op) + ": shape mismatch " + shape_str(a.tensor().shape()) + " vs " +
              shape_str(b.tensor().shape()));
  return a;
}

Value Tape::leaf(const Tensor& t, bool trainable) {
  auto node = std::make_unique<Node>();
  node->external = &t;
  node->trainable = trainable;
  node->needs_grad = trainable;
  node->owner = this;
  node->index = nodes_.size();
  nodes_.push_back(std::move(node));
  return Value(nodes_.back().get());
}

Value Tape::constant(Tensor t) {
  Node* n = make(std::move(t), {});
  return Value(n);
}

Value Tape::add(Value a, Value b) {
  check2(a, b, "add");
  Tensor out = a.tensor();
  const auto& bv = b.tensor().values();
  for (std::size_t i = 0; i < bv.size(); ++i) out.at(i) += bv[i];
  Node* n = make(std::move(out), {a.node(), b.node()});
  n->backward = [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      Node* in = self.inputs[k];
      if (!in->needs_grad) continue;
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad.at(i) += self.grad.at(i);
    }
  };
  return Value(n);
}

Value Tape::sub(Value a, Value b) {
  check2(a, b, "sub");
  Tensor out = a.tensor();
  const auto& bv = b.tensor().values();
  for (std::size_t i = 0; i < bv.size(); ++i) out.at(i) -= bv[i];
  Node* n = make(std::move(out), {a.node(), b.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    Node* b = self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad.at(i);
      if (a->needs_grad) a->grad.at(i) += g;
      if (b->needs_grad) b->grad.at(i) -= g;
    }
  };
  return Value(n);
}

Value Tape::mul(Value a, Value b) {
  check2(a, b, "mul");
  Tensor out = a.tensor();
  const auto& bv = b.tensor().values();
  for (std::size_t i = 0; i < bv.size(); ++i) out.at(i) *= bv[i];
  Node* n = make(std::move(out), {a.node(), b.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    Node* b = self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad.at(i);
      if (a->needs_grad) a->grad.at(i) += g * b->value().at(i);
      if (b->needs_grad) b->grad.at(i) += g * a->value().at(i);
    }
  };
  return Value(n);
}

Value Tape::div(Value a, Value b) {
  check2(a, b, "div");
  Tensor out = a.tensor();
  const auto& bv = b.tensor().values();
  for (std::size_t i = 0; i < bv.size(); ++i) out.at(i) /= bv[i];
  Node* n = make(std::move(out), {a.node(), b.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    Node* b = self.inputs[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad.at(i);
      const double bi = b->value().at(i);
      if (a->needs_grad) a->grad.at(i) += g / bi;
      if (b->needs_grad) b->grad.at(i) -= g * a->value().at(i) / (bi * bi);
    }
  };
  return Value(n);
}

Value Tape::add_scalar(Value a, double c) {
  check_owned(a, "add_scalar");
  Tensor out = a.tensor();
  for (double& v : out.values()) v += c;
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad.at(i) += self.grad.at(i);
  };
  return Value(n);
}

Value Tape::scale(Value a, double c) {
  check_owned(a, "scale");
  Tensor out = a.tensor();
  for (double& v : out.values()) v *= c;
  Node* n = make(std::move(out), {a.node()});
  n->backward = [c](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad.at(i) += c * self.grad.at(i);
  };
  return Value(n);
}

Value Tape::matmul(Value a, Value b) {
  check_owned(a, "matmul");
  check_owned(b, "matmul");
  const Tensor& av = a.tensor();
  const Tensor& bv = b.tensor();
  require(av.rank() == 2 && bv.rank() == 2, "matmul: operands must be rank 2");
  require(av.cols() == bv.rows(), "matmul: inner dimensions disagree, " +
                                      shape_str(av.shape()) + " * " + shape_str(bv.shape()));
  Tensor out({av.rows(), bv.cols()});
  mmap(out).noalias() = cmap(av) * cmap(bv);
  Node* n = make(std::move(out), {a.node(), b.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    Node* b = self.inputs[1];
    ConstMatMap g = cmap(self.grad);
    if (a->needs_grad) mmap(a->grad).noalias() += g * cmap(b->value()).transpose();
    if (b->needs_grad) mmap(b->grad).noalias() += cmap(a->value()).transpose() * g;
  };
  return Value(n);
}

Value Tape::transpose(Value a) {
  check_owned(a, "transpose");
  const Tensor& av = a.tensor();
  require(av.rank() == 2, "transpose: tensor must be rank 2");
  Tensor out({av.cols(), av.rows()});
  mmap(out) = cmap(av).transpose();
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    mmap(a->grad) += cmap(self.grad).transpose();
  };
  return Value(n);
}

Value Tape::sigmoid(Value a) {
  check_owned(a, "sigmoid");
  Tensor out = a.tensor();
  for (double& v : out.values()) v = stable_sigmoid(v);
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.owned.at(i);
      a->grad.at(i) += self.grad.at(i) * s * (1.0 - s);
    }
  };
  return Value(n);
}

Value Tape::tanh(Value a) {
  check_owned(a, "tanh");
  Tensor out = a.tensor();
  for (double& v : out.values()) v = std::tanh(v);
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double t = self.owned.at(i);
      a->grad.at(i) += self.grad.at(i) * (1.0 - t * t);
    }
  };
  return Value(n);
}

Value Tape::relu(Value a) {
  check_owned(a, "relu");
  Tensor out = a.tensor();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (a->value().at(i) > 0.0) a->grad.at(i) += self.grad.at(i);
  };
  return Value(n);
}

Value Tape::log(Value a) {
  check_owned(a, "log");
  Tensor out = a.tensor();
  for (double& v : out.values()) {
    require(v > 0.0, "log: input must be positive");
    v = std::log(v);
  }
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      a->grad.at(i) += self.grad.at(i) / a->value().at(i);
  };
  return Value(n);
}

Value Tape::sqrt(Value a) {
  check_owned(a, "sqrt");
  Tensor out = a.tensor();
  for (double& v : out.values()) {
    require(v >= 0.0, "sqrt: input must be non-negative");
    v = std::sqrt(v);
  }
  Node* n = make(std::move(out), {a.node()});
  // Derivative at exactly zero is unbounded; callers clamp away from zero.
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      a->grad.at(i) += self.grad.at(i) / (2.0 * self.owned.at(i));
  };
  return Value(n);
}

Value Tape::clamp_min(Value a, double lo) {
  check_owned(a, "clamp_min");
  Tensor out = a.tensor();
  for (double& v : out.values()) v = v < lo ? lo : v;
  Node* n = make(std::move(out), {a.node()});
  n->backward = [lo](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (a->value().at(i) > lo) a->grad.at(i) += self.grad.at(i);
  };
  return Value(n);
}

Value Tape::softmax_rows(Value a) {
  check_owned(a, "softmax_rows");
  const Tensor& av = a.tensor();
  require(av.rank() == 2, "softmax_rows: tensor must be rank 2");
  Tensor out = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = out.at(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, out.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(out.at(i, j) - mx);
      out.at(i, j) = e;
      s += e;
    }
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= s;
  }
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    const std::size_t r = self.owned.rows(), c = self.owned.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad.at(i, j) * self.owned.at(i, j);
      for (std::size_t j = 0; j < c; ++j)
        a->grad.at(i, j) += self.owned.at(i, j) * (self.grad.at(i, j) - dot);
    }
  };
  return Value(n);
}

Value Tape::masked_softmax_rows(Value a, std::vector<std::uint8_t> key_mask) {
  check_owned(a, "masked_softmax_rows");
  const Tensor& av = a.tensor();
  require(av.rank() == 2, "masked_softmax_rows: tensor must be rank 2");
  require(key_mask.size() == av.cols(), "masked_softmax_rows: mask length must equal columns");
  bool any = false;
  for (auto m : key_mask) any = any || (m != 0);
  require(any, "masked_softmax_rows: all keys are masked");
  Tensor out = av;
  const std::size_t r = av.rows(), c = av.cols();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (key_mask[j]) mx = std::max(mx, out.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!key_mask[j]) {
        out.at(i, j) = 0.0;
        continue;
      }
      const double e = std::exp(out.at(i, j) - mx);
      out.at(i, j) = e;
      s += e;
    }
    for (std::size_t j = 0; j < c; ++j)
      if (key_mask[j]) out.at(i, j) /= s;
  }
  Node* n = make(std::move(out), {a.node()});
  // Masked entries carry zero weight so the plain softmax jacobian applies.
  n->backward = [mask = std::move(key_mask)](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    const std::size_t r = self.owned.rows(), c = self.owned.cols();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        if (mask[j]) dot += self.grad.at(i, j) * self.owned.at(i, j);
      for (std::size_t j = 0; j < c; ++j)
        if (mask[j]) a->grad.at(i, j) += self.owned.at(i, j) * (self.grad.at(i, j) - dot);
    }
  };
  return Value(n);
}

Value Tape::concat_cols(std::span<const Value> parts) {
  require(!parts.empty(), "concat_cols: no parts");
  std::size_t rows = 0, cols = 0;
  std::vector<Node*> ins;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    check_owned(parts[k], "concat_cols");
    const Tensor& t = parts[k].tensor();
    require(t.rank() == 2, "concat_cols: parts must be rank 2");
    if (k == 0)
      rows = t.rows();
    else
      require(t.rows() == rows, "concat_cols: row counts disagree");
    cols += t.cols();
    ins.push_back(parts[k].node());
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (const Value& p : parts) {
    const Tensor& t = p.tensor();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) out.at(i, off + j) = t.at(i, j);
    off += t.cols();
  }
  Node* n = make(std::move(out), std::move(ins));
  n->backward = [](Node& self) {
    const std::size_t rows = self.owned.rows();
    std::size_t off = 0;
    for (Node* in : self.inputs) {
      const std::size_t c = in->value().cols();
      if (in->needs_grad)
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < c; ++j) in->grad.at(i, j) += self.grad.at(i, off + j);
      off += c;
    }
  };
  return Value(n);
}

Value Tape::concat_rows(std::span<const Value> parts) {
  require(!parts.empty(), "concat_rows: no parts");
  std::size_t rows = 0, cols = 0;
  std::vector<Node*> ins;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    check_owned(parts[k], "concat_rows");
    const Tensor& t = parts[k].tensor();
    require(t.rank() == 2, "concat_rows: parts must be rank 2");
    if (k == 0)
      cols = t.cols();
    else
      require(t.cols() == cols, "concat_rows: column counts disagree");
    rows += t.rows();
    ins.push_back(parts[k].node());
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (const Value& p : parts) {
    const Tensor& t = p.tensor();
    std::copy(t.values().begin(), t.values().end(), out.values().begin() + off * cols);
    off += t.rows();
  }
  Node* n = make(std::move(out), std::move(ins));
  n->backward = [](Node& self) {
    const std::size_t cols = self.owned.cols();
    std::size_t off = 0;
    for (Node* in : self.inputs) {
      const std::size_t r = in->value().rows();
      if (in->needs_grad)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < cols; ++j) in->grad.at(i, j) += self.grad.at(off + i, j);
      off += r;
    }
  };
  return Value(n);
}

Value Tape::slice_rows(Value a, std::size_t first, std::size_t count) {
  check_owned(a, "slice_rows");
  const Tensor& av = a.tensor();
  require(av.rank() == 2, "slice_rows: tensor must be rank 2");
  require(count >= 1 && first + count <= av.rows(), "slice_rows: range out of bounds");
  const std::size_t cols = av.cols();
  Tensor out({count, cols});
  std::copy(av.values().begin() + first * cols, av.values().begin() + (first + count) * cols,
            out.values().begin());
  Node* n = make(std::move(out), {a.node()});
  n->backward = [first](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    const std::size_t count = self.owned.rows(), cols = self.owned.cols();
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t j = 0; j < cols; ++j) a->grad.at(first + i, j) += self.grad.at(i, j);
  };
  return Value(n);
}

Value Tape::slice_cols(Value a, std::size_t first, std::size_t count) {
  check_owned(a, "slice_cols");
  const Tensor& av = a.tensor();
  require(av.rank() == 2, "slice_cols: tensor must be rank 2");
  require(count >= 1 && first + count <= av.cols(), "slice_cols: range out of bounds");
  Tensor out({av.rows(), count});
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out.at(i, j) = av.at(i, first + j);
  Node* n = make(std::move(out), {a.node()});
  n->backward = [first](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    const std::size_t rows = self.owned.rows(), count = self.owned.cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < count; ++j) a->grad.at(i, first + j) += self.grad.at(i, j);
  };
  return Value(n);
}

Value Tape::pad_rows(Value a, std::size_t total_rows) {
  check_owned(a, "pad_rows");
  const Tensor& av = a.tensor();
  require(av.rank() == 2, "pad_rows: tensor must be rank 2");
  require(total_rows >= av.rows(), "pad_rows: target is smaller than input");
  Tensor out({total_rows, av.cols()});
  std::copy(av.values().begin(), av.values().end(), out.values().begin());
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    const std::size_t rows = a->value().rows(), cols = a->value().cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) a->grad.at(i, j) += self.grad.at(i, j);
  };
  return Value(n);
}

Value Tape::reshape(Value a, std::vector<std::size_t> shape) {
  check_owned(a, "reshape");
  require(shape_size(shape) == a.tensor().size(), "reshape: element count must be preserved");
  Tensor out(std::move(shape), a.tensor().values());
  Node* n = make(std::move(out), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad.at(i) += self.grad.at(i);
  };
  return Value(n);
}

Value Tape::sum(Value a) {
  check_owned(a, "sum");
  double s = 0.0;
  for (double v : a.tensor().values()) s += v;
  Node* n = make(Tensor::scalar(s), {a.node()});
  n->backward = [](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    const double g = self.grad.at(0);
    for (std::size_t i = 0; i < a->grad.size(); ++i) a->grad.at(i) += g;
  };
  return Value(n);
}

Value Tape::add_row(Value m, Value r) {
  check_owned(m, "add_row");
  check_owned(r, "add_row");
  const Tensor& mv = m.tensor();
  const Tensor& rv = r.tensor();
  require(mv.rank() == 2 && rv.rank() == 2 && rv.rows() == 1, "add_row: need m x n and 1 x n");
  require(rv.cols() == mv.cols(), "add_row: column counts disagree");
  Tensor out = mv;
  for (std::size_t i = 0; i < mv.rows(); ++i)
    for (std::size_t j = 0; j < mv.cols(); ++j) out.at(i, j) += rv.at(0, j);
  Node* n = make(std::move(out), {m.node(), r.node()});
  n->backward = [](Node& self) {
    Node* m = self.inputs[0];
    Node* r = self.inputs[1];
    const std::size_t rows = self.owned.rows(), cols = self.owned.cols();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const double g = self.grad.at(i, j);
        if (m->needs_grad) m->grad.at(i, j) += g;
        if (r->needs_grad) r->grad.at(0, j) += g;
      }
  };
  return Value(n);
}

Value Tape::dropout(Value a, double rate, RandomSource& rng) {
  check_owned(a, "dropout");
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0, 1)");
  if (rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor out = a.tensor();
  std::vector<std::uint8_t> keep(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    keep[i] = rng.next_double() >= rate ? 1 : 0;
    out.at(i) = keep[i] ? out.at(i) * keep_scale : 0.0;
  }
  Node* n = make(std::move(out), {a.node()});
  n->backward = [keep = std::move(keep), keep_scale](Node& self) {
    Node* a = self.inputs[0];
    if (!a->needs_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (keep[i]) a->grad.at(i) += self.grad.at(i) * keep_scale;
  };
  return Value(n);
}

GradientMap reverse_sweep(Tape& tape, Value loss) {
  if (!tape.owns(loss)) throw std::invalid_argument("reverse_sweep: loss is not on this tape");
  if (loss.tensor().size() != 1)
    throw std::invalid_argument("reverse_sweep: loss must be a scalar");
  const std::size_t loss_index = loss.node()->index;
  for (auto& n : tape.nodes_) {
    if (n->index <= loss_index && n->needs_grad)
      n->grad = Tensor(n->value().shape());
    else
      n->grad = Tensor();
  }
  if (loss.node()->needs_grad) loss.node()->grad.at(0) = 1.0;
  for (std::size_t i = loss_index + 1; i-- > 0;) {
    Node& n = *tape.nodes_[i];
    if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
    n.backward(n);
  }
  GradientMap map;
  for (auto& n : tape.nodes_) {
    if (!n->trainable) continue;
    if (n->grad.empty()) n->grad = Tensor(n->value().shape());
    map.params_.push_back(n.get());
  }
  return map;
}

}  // namespace questmf
