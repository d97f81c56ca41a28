#include "questmf/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace questmf {

std::size_t ParamSet::add(std::string name, Tensor t) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  const std::size_t idx = tensors_.size();
  index_.emplace(name, idx);
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(t));
  return idx;
}

std::optional<std::size_t> ParamSet::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void ParamSet::restore(const std::vector<Tensor>& snap) {
  if (snap.size() != tensors_.size())
    throw std::invalid_argument("param snapshot size mismatch");
  for (std::size_t i = 0; i < snap.size(); ++i) {
    if (!snap[i].same_shape(tensors_[i]))
      throw std::invalid_argument("param snapshot shape mismatch at " + names_[i]);
    tensors_[i] = snap[i];
  }
}

Lifter::Lifter(Tape& tape, ParamSet& params, std::vector<std::string> frozen_prefixes)
    : tape_(tape), params_(params), frozen_(std::move(frozen_prefixes)),
      cache_(params.count()) {}

bool Lifter::frozen(std::size_t idx) const {
  const std::string& n = params_.name(idx);
  for (const std::string& p : frozen_)
    if (n.rfind(p, 0) == 0) return true;
  return false;
}

Value Lifter::operator()(std::size_t idx) {
  if (!cache_[idx].valid()) cache_[idx] = tape_.leaf(params_.tensor(idx), !frozen(idx));
  return cache_[idx];
}

Tensor init_uniform(std::vector<std::size_t> shape, std::size_t fan_in, RandomSource& rng) {
  if (fan_in == 0) throw std::invalid_argument("init_uniform: fan_in must be positive");
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

BiLstmParams add_bilstm(ParamSet& ps, const std::string& prefix, std::size_t in_width,
                        std::size_t hidden, RandomSource& rng) {
  if (in_width == 0 || hidden == 0)
    throw std::invalid_argument("bilstm: widths must be positive");
  BiLstmParams p;
  p.in_width = in_width;
  p.hidden = hidden;
  const auto dir = [&](const std::string& d) {
    LstmDirParams dp;
    dp.w = ps.add(prefix + d + "/w", init_uniform({in_width, 4 * hidden}, in_width, rng));
    dp.u = ps.add(prefix + d + "/u", init_uniform({hidden, 4 * hidden}, hidden, rng));
    dp.b = ps.add(prefix + d + "/b", Tensor({1, 4 * hidden}));
    return dp;
  };
  p.fw = dir("fw");
  p.bw = dir("bw");
  return p;
}

AttentionParams add_attention(ParamSet& ps, const std::string& prefix, std::size_t width,
                              std::size_t heads, double dropout, RandomSource& rng) {
  if (heads == 0 || width % heads != 0)
    throw std::invalid_argument("attention: head count must divide width");
  AttentionParams p;
  p.width = width;
  p.heads = heads;
  p.dropout = dropout;
  p.wq = ps.add(prefix + "wq", init_uniform({width, width}, width, rng));
  p.wk = ps.add(prefix + "wk", init_uniform({width, width}, width, rng));
  p.wv = ps.add(prefix + "wv", init_uniform({width, width}, width, rng));
  p.wo = ps.add(prefix + "wo", init_uniform({width, width}, width, rng));
  return p;
}

MlpHeadParams add_mlp_head(ParamSet& ps, const std::string& prefix, std::size_t in,
                           std::size_t hidden, std::size_t out, double drop1, double drop2,
                           RandomSource& rng) {
  MlpHeadParams p;
  p.in = in;
  p.hidden = hidden;
  p.out = out;
  p.drop1 = drop1;
  p.drop2 = drop2;
  p.w1 = ps.add(prefix + "w1", init_uniform({in, hidden}, in, rng));
  p.b1 = ps.add(prefix + "b1", Tensor({1, hidden}));
  p.w2 = ps.add(prefix + "w2", init_uniform({hidden, out}, hidden, rng));
  p.b2 = ps.add(prefix + "b2", Tensor({1, out}));
  return p;
}

Tensor mean_pool_normalize(const Tensor& rows) {
  if (rows.rank() != 2 || rows.rows() == 0 || rows.cols() == 0)
    throw std::invalid_argument("mean_pool_normalize: need a non-empty matrix");
  const std::size_t m = rows.rows(), w = rows.cols();
  Tensor out({1, w});
  for (std::size_t j = 0; j < w; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += rows.at(i, j);
    out.at(0, j) = s / static_cast<double>(m);
  }
  double sq = 0.0;
  for (std::size_t j = 0; j < w; ++j) sq += out.at(0, j) * out.at(0, j);
  if (sq == 0.0) return out;
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t j = 0; j < w; ++j) out.at(0, j) *= inv;
  return out;
}

Value mean_pool_normalize(Tape& tape, Value rows) {
  const Tensor& rv = rows.tensor();
  if (rv.rank() != 2 || rv.rows() == 0 || rv.cols() == 0)
    throw std::invalid_argument("mean_pool_normalize: need a non-empty matrix");
  const std::size_t m = rv.rows(), w = rv.cols();
  Tensor ones({1, m});
  ones.fill(1.0 / static_cast<double>(m));
  Value mean = tape.matmul(tape.constant(std::move(ones)), rows);  // 1 x w
  Value sq = tape.sum(tape.mul(mean, mean));
  // The clamp keeps the zero-mean case finite: 0 / sqrt(tiny) == 0.
  Value norm = tape.sqrt(tape.clamp_min(sq, 1e-300));
  Tensor onesw({1, w});
  onesw.fill(1.0);
  Value norm_row = tape.matmul(tape.reshape(norm, {1, 1}), tape.constant(std::move(onesw)));
  return tape.div(mean, norm_row);
}

namespace {

Value lstm_direction(Lifter& lift, const LstmDirParams& dp, std::size_t hidden, Value seq,
                     bool backward) {
  Tape& tape = lift.tape();
  const std::size_t m = seq.rows();
  Value xw = tape.add_row(tape.matmul(seq, lift(dp.w)), lift(dp.b));  // m x 4H
  Value u = lift(dp.u);
  Value h = tape.constant(Tensor({1, hidden}));
  Value c = tape.constant(Tensor({1, hidden}));
  std::vector<Value> outputs(m);
  for (std::size_t step = 0; step < m; ++step) {
    const std::size_t t = backward ? m - 1 - step : step;
    Value pre = tape.add(tape.slice_rows(xw, t, 1), tape.matmul(h, u));  // 1 x 4H
    Value gi = tape.sigmoid(tape.slice_cols(pre, 0, hidden));
    Value gf = tape.sigmoid(tape.slice_cols(pre, hidden, hidden));
    Value gg = tape.tanh(tape.slice_cols(pre, 2 * hidden, hidden));
    Value go = tape.sigmoid(tape.slice_cols(pre, 3 * hidden, hidden));
    c = tape.add(tape.mul(gf, c), tape.mul(gi, gg));
    h = tape.mul(go, tape.tanh(c));
    outputs[t] = h;
  }
  return tape.concat_rows(outputs);
}

}  // namespace

Value bilstm_forward(Lifter& lift, const BiLstmParams& p, Value seq) {
  const Tensor& sv = seq.tensor();
  if (sv.rank() != 2 || sv.cols() != p.in_width)
    throw std::invalid_argument("bilstm_forward: input width does not match parameters");
  if (sv.rows() == 0) throw std::invalid_argument("bilstm_forward: empty sequence");
  Value fw = lstm_direction(lift, p.fw, p.hidden, seq, false);
  Value bw = lstm_direction(lift, p.bw, p.hidden, seq, true);
  const Value parts[] = {fw, bw};
  return lift.tape().concat_cols(parts);
}

Value multihead_attention_forward(Lifter& lift, const AttentionParams& p, Value query_seq,
                                  Value kv_seq, const std::vector<std::uint8_t>& kv_mask,
                                  Mode mode, RandomSource* rng) {
  Tape& tape = lift.tape();
  const Tensor& qv = query_seq.tensor();
  const Tensor& kv = kv_seq.tensor();
  if (qv.rank() != 2 || kv.rank() != 2 || qv.cols() != p.width || kv.cols() != p.width)
    throw std::invalid_argument("attention: sequence width does not match parameters");
  if (kv_mask.size() != kv.rows())
    throw std::invalid_argument("attention: mask length does not match key count");
  const std::size_t dh = p.width / p.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Value q = tape.matmul(query_seq, lift(p.wq));
  Value k = tape.matmul(kv_seq, lift(p.wk));
  Value v = tape.matmul(kv_seq, lift(p.wv));
  std::vector<Value> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < p.heads; ++h) {
    Value qh = tape.slice_cols(q, h * dh, dh);
    Value kh = tape.slice_cols(k, h * dh, dh);
    Value vh = tape.slice_cols(v, h * dh, dh);
    Value scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
    Value weights = tape.masked_softmax_rows(scores, kv_mask);
    weights = dropout_forward(tape, weights, p.dropout, mode, rng);
    heads.push_back(tape.matmul(weights, vh));
  }
  return tape.matmul(tape.concat_cols(heads), lift(p.wo));
}

Value dropout_forward(Tape& tape, Value x, double rate, Mode mode, RandomSource* rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  if (!rng) throw std::invalid_argument("dropout: train mode requires a random source");
  return tape.dropout(x, rate, *rng);
}

Value mlp_head_forward(Lifter& lift, const MlpHeadParams& p, Value rows, Mode mode,
                       RandomSource* rng) {
  Tape& tape = lift.tape();
  const Tensor& rv = rows.tensor();
  if (rv.rank() != 2 || rv.cols() != p.in)
    throw std::invalid_argument("mlp_head: input width does not match parameters");
  Value h = dropout_forward(tape, rows, p.drop1, mode, rng);
  h = tape.relu(tape.add_row(tape.matmul(h, lift(p.w1)), lift(p.b1)));
  h = dropout_forward(tape, h, p.drop2, mode, rng);
  return tape.add_row(tape.matmul(h, lift(p.w2)), lift(p.b2));
}

}  // namespace questmf
