#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "questmf/random.hpp"
#include "questmf/tensor.hpp"

namespace questmf {

class Tape;

struct Node {
  const Tensor* external = nullptr;  // leaf over caller-owned storage
  Tensor owned;                      // op output, or owned constant
  Tensor grad;                       // allocated by the reverse sweep
  std::vector<Node*> inputs;
  std::function<void(Node&)> backward;  // accumulates into inputs' grads
  bool trainable = false;
  bool needs_grad = false;
  std::size_t index = 0;  // creation order on the owning tape
  const Tape* owner = nullptr;

  const Tensor& value() const { return external ? *external : owned; }
};

// Non-owning handle into a tape; valid while the tape lives.
class Value {
 public:
  Value() = default;
  const Tensor& tensor() const { return node_->value(); }
  std::size_t rows() const { return tensor().rows(); }
  std::size_t cols() const { return tensor().cols(); }
  double item() const { return tensor().at(0); }
  bool valid() const { return node_ != nullptr; }
  Node* node() const { return node_; }

 private:
  friend class Tape;
  explicit Value(Node* n) : node_(n) {}
  Node* node_ = nullptr;
};

// View over the gradients left in a swept tape. Entries cover every
// trainable leaf, in leaf creation order; leaves that do not reach the
// loss hold zero tensors. Valid until the tape is destroyed or re-swept.
class GradientMap {
 public:
  std::size_t size() const { return params_.size(); }
  const Tensor& at(Value param) const;
  // Lookup by the external storage a leaf was created over.
  const Tensor& at_storage(const Tensor* storage) const;
  bool contains(Value param) const;

 private:
  friend GradientMap reverse_sweep(Tape&, Value);
  std::vector<Node*> params_;
};

// Records operations in creation order; reverse_sweep walks it backwards.
// One tape per forward pass. Leaves reference caller-owned tensors, which
// must outlive the tape; op outputs are owned by their nodes.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value leaf(const Tensor& t, bool trainable = false);
  // A leaf references the caller's storage, so a temporary would dangle;
  // constant() owns its tensor and is the right call for rvalues.
  Value leaf(Tensor&&, bool = false) = delete;
  Value constant(Tensor t);

  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value div(Value a, Value b);
  Value add_scalar(Value a, double c);
  Value scale(Value a, double c);
  Value matmul(Value a, Value b);
  Value transpose(Value a);
  Value sigmoid(Value a);
  Value tanh(Value a);
  Value relu(Value a);
  Value log(Value a);
  Value sqrt(Value a);
  Value clamp_min(Value a, double lo);
  Value softmax_rows(Value a);
  // Masked columns (mask[j] == 0) get exactly zero weight; throws if a row
  // would have no unmasked key.
  Value masked_softmax_rows(Value a, std::vector<std::uint8_t> key_mask);
  Value concat_cols(std::span<const Value> parts);
  Value concat_rows(std::span<const Value> parts);
  Value slice_rows(Value a, std::size_t first, std::size_t count);
  Value slice_cols(Value a, std::size_t first, std::size_t count);
  Value pad_rows(Value a, std::size_t total_rows);  // appends zero rows
  Value reshape(Value a, std::vector<std::size_t> shape);
  Value sum(Value a);                // -> shape {1}
  Value add_row(Value m, Value r);   // broadcast a 1 x n row over m's rows
  // Inverted-scale dropout (train behaviour; eval callers skip the op).
  // rate == 0 returns the input unchanged and draws nothing from rng.
  Value dropout(Value a, double rate, RandomSource& rng);

  std::size_t node_count() const { return nodes_.size(); }
  bool owns(Value v) const { return v.valid() && v.node()->owner == this; }

 private:
  friend GradientMap reverse_sweep(Tape&, Value);

  Node* make(Tensor out, std::vector<Node*> inputs);
  Value check2(Value a, Value b, const char* op) const;
  void check_owned(Value v, const char* op) const;

  std::vector<std::unique_ptr<Node>> nodes_;
};

// Backpropagates d(loss)/d(leaf) for a scalar loss. Throws if loss is not
// a scalar or does not belong to this tape.
GradientMap reverse_sweep(Tape& tape, Value loss);

}  // namespace questmf
