#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "questmf/autodiff.hpp"
#include "questmf/random.hpp"

namespace questmf {

enum class Mode { train, eval };

// Named, ordered parameter store for one model. Registration order is the
// initialization draw order, so it is part of the determinism contract.
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor t);
  std::size_t count() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  std::optional<std::size_t> find(std::string_view name) const;

  std::vector<Tensor> snapshot() const { return tensors_; }
  void restore(const std::vector<Tensor>& snap);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Lifts ParamSet tensors onto a tape lazily, once each. Parameters whose
// name starts with a frozen prefix become non-trainable leaves.
class Lifter {
 public:
  Lifter(Tape& tape, ParamSet& params, std::vector<std::string> frozen_prefixes = {});
  Value operator()(std::size_t idx);
  bool frozen(std::size_t idx) const;
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  ParamSet& params_;
  std::vector<std::string> frozen_;
  std::vector<Value> cache_;
};

// Uniform in +/- 1/sqrt(fan_in), drawn in row-major element order.
Tensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in, RandomSource& rng);

// Gate columns are packed [input | forget | cell | output], each `hidden`
// wide, in one in x 4*hidden matrix per direction (and hidden x 4*hidden
// for the recurrent weights).
struct LstmDirParams {
  std::size_t w = 0;  // in x 4H
  std::size_t u = 0;  // H x 4H
  std::size_t b = 0;  // 1 x 4H
};

struct BiLstmParams {
  LstmDirParams fw, bw;
  std::size_t in_width = 0;
  std::size_t hidden = 0;  // output width is 2*hidden
};

struct AttentionParams {
  std::size_t wq = 0, wk = 0, wv = 0, wo = 0;  // all D x D, bias-free
  std::size_t width = 0;                       // D
  std::size_t heads = 0;                       // divides D
  double dropout = 0.0;                        // applied to attention weights
};

struct MlpHeadParams {
  std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;
  std::size_t in = 0, hidden = 0, out = 0;
  double drop1 = 0.0, drop2 = 0.0;  // before each affine layer
};

BiLstmParams add_bilstm(ParamSet& ps, const std::string& prefix, std::size_t in_width,
                        std::size_t hidden, RandomSource& rng);
AttentionParams add_attention(ParamSet& ps, const std::string& prefix, std::size_t width,
                              std::size_t heads, double dropout, RandomSource& rng);
MlpHeadParams add_mlp_head(ParamSet& ps, const std::string& prefix, std::size_t in,
                           std::size_t hidden, std::size_t out, double drop1, double drop2,
                           RandomSource& rng);

// Mean over rows then Euclidean normalization; an exactly zero mean stays
// the zero vector. Plain form feeds ingestion; tape form is differentiable
// away from the zero vector.
Tensor mean_pool_normalize(const Tensor& rows);
Value mean_pool_normalize(Tape& tape, Value rows);

// Standard LSTM recurrence both directions; row t of the output is
// [forward h_t | backward h_t].
Value bilstm_forward(Lifter& lift, const BiLstmParams& p, Value seq);

// Scaled dot-product attention, per-head scale 1/sqrt(D/H), no residual
// or normalization around the block, dropout on the attention weights.
// Self-attention passes the same value for query_seq and kv_seq.
Value multihead_attention_forward(Lifter& lift, const AttentionParams& p, Value query_seq,
                                  Value kv_seq, const std::vector<std::uint8_t>& kv_mask,
                                  Mode mode, RandomSource* rng);

// Identity in eval mode; in train mode requires rng.
Value dropout_forward(Tape& tape, Value x, double rate, Mode mode, RandomSource* rng);

// dropout -> affine -> relu -> dropout -> affine, applied row-wise, so a
// whole batch of flattened sessions goes through as one matrix.
Value mlp_head_forward(Lifter& lift, const MlpHeadParams& p, Value rows, Mode mode,
                       RandomSource* rng);

}  // namespace questmf
