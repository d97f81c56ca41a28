#include "questmf/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace questmf {

namespace {

std::array<double, kNumClasses> softmax4(const std::array<double, kNumClasses>& logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::array<double, kNumClasses> p{};
  double sum = 0.0;
  for (int i = 0; i < kNumClasses; ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

// Sessions are stored as a prefix of real turns followed by padding, so a
// valid mask is true exactly on a non-empty prefix.
std::size_t prefix_length(const std::vector<std::uint8_t>& mask) {
  std::size_t n = 0;
  while (n < mask.size() && mask[n]) ++n;
  for (std::size_t t = n; t < mask.size(); ++t)
    if (mask[t]) throw std::invalid_argument("mask must be a true prefix");
  if (n == 0) throw std::invalid_argument("empty mask");
  return n;
}

Tensor slice_session(const Tensor& enc3, std::size_t i, std::size_t n) {
  if (enc3.rank() != 3) throw std::invalid_argument("encodings must be batch x turns x width");
  const std::size_t w = enc3.shape()[2];
  if (n > enc3.shape()[1]) throw std::invalid_argument("mask longer than encoding");
  Tensor out({n, w});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < w; ++j) out.at(t, j) = enc3.at3(i, t, j);
  return out;
}

}  // namespace

int argmax_class(const std::array<double, kNumClasses>& p) {
  int best = 0;
  for (int i = 1; i < kNumClasses; ++i)
    if (p[i] > p[best]) best = i;
  return best;
}

const char* name(Framework f) { return f == Framework::questmf ? "questmf" : "total"; }

std::optional<Framework> framework_from(std::string_view s) {
  if (s == "questmf") return Framework::questmf;
  if (s == "total") return Framework::total;
  return std::nullopt;
}

std::size_t NetSpec::position_width() const {
  if (modalities.size() <= 1) return enc_width();
  if (modalities.size() == 2) return 2 * enc_width();
  return 6 * enc_width();
}

std::size_t NetSpec::head_out() const {
  if (framework == Framework::total || loss == LossKind::mse) return 1;
  return kNumClasses;
}

NetSpec NetSpec::single(Framework fw, LossKind loss, Modality m, std::size_t in_width) {
  NetSpec s;
  s.framework = fw;
  s.loss = loss;
  s.modalities = {m};
  s.in_widths[m] = in_width;
  validate(s);
  return s;
}

NetSpec NetSpec::fused_spec(Framework fw, LossKind loss, std::vector<Modality> ms,
                            const std::map<Modality, std::size_t>& widths) {
  NetSpec s;
  s.framework = fw;
  s.loss = loss;
  std::sort(ms.begin(), ms.end());
  s.modalities = std::move(ms);
  for (Modality m : s.modalities) {
    auto it = widths.find(m);
    if (it == widths.end())
      throw ConfigError(std::string("missing input width for ") + name(m));
    s.in_widths[m] = it->second;
  }
  validate(s);
  return s;
}

void validate(const NetSpec& spec) {
  if (spec.modalities.empty()) throw ConfigError("a network needs at least one modality");
  if (spec.modalities.size() > 3) throw ConfigError("at most three modalities");
  for (std::size_t i = 1; i < spec.modalities.size(); ++i)
    if (!(spec.modalities[i - 1] < spec.modalities[i]))
      throw ConfigError("modalities must be unique and in canonical order");
  for (Modality m : spec.modalities) {
    auto it = spec.in_widths.find(m);
    if (it == spec.in_widths.end() || it->second == 0)
      throw ConfigError(std::string("missing input width for ") + name(m));
  }
  if (spec.framework == Framework::total && spec.loss != LossKind::mse)
    throw ConfigError("the total framework supports only the mse loss");
  if (spec.d_lstm == 0 || spec.heads == 0 || spec.max_turns == 0 || spec.head_hidden == 0)
    throw ConfigError("network sizes must be positive");
  if (spec.enc_width() % spec.heads != 0)
    throw ConfigError("attention width must be divisible by the head count");
}

std::size_t encoder_attn_layers(Modality m) { return m == Modality::text ? 1 : 2; }

double encoder_attn_dropout(Modality m) { return m == Modality::text ? 0.5 : 0.2; }

QuestionNet::QuestionNet(NetSpec spec, RandomSource& init_rng) : spec_(std::move(spec)) {
  validate(spec_);
  const std::size_t width = spec_.enc_width();
  for (Modality m : spec_.modalities) {
    const std::string base = std::string("enc/") + name(m) + "/";
    EncoderHandles h;
    h.lstm = add_bilstm(params_, base + "lstm/", spec_.in_widths.at(m), spec_.d_lstm, init_rng);
    for (std::size_t l = 0; l < encoder_attn_layers(m); ++l)
      h.attn.push_back(add_attention(params_, base + "attn" + std::to_string(l) + "/", width,
                                     spec_.heads, encoder_attn_dropout(m), init_rng));
    encoders_.emplace(m, std::move(h));
  }
  if (spec_.fused()) {
    constexpr double kFusionDrop = 0.8;
    const auto cross_name = [](Modality kv, Modality q) {
      return std::string("fusion/cross/") + name(kv) + "_to_" + name(q) + "/";
    };
    std::vector<std::pair<Modality, Modality>> pairs;  // (key/value, query)
    if (spec_.modalities.size() == 2) {
      const Modality m1 = spec_.modalities[0], m2 = spec_.modalities[1];
      pairs = {{m1, m2}, {m2, m1}};
    } else {
      const Modality t = Modality::text, a = Modality::audio, v = Modality::video;
      pairs = {{t, a}, {v, a}, {a, t}, {v, t}, {t, v}, {a, v}};
    }
    for (const auto& [kv, q] : pairs)
      cross_.push_back(
          add_attention(params_, cross_name(kv, q), width, spec_.heads, kFusionDrop, init_rng));
    const std::size_t self_width = spec_.modalities.size() == 2 ? width : 2 * width;
    for (Modality m : spec_.modalities)
      self_.push_back(add_attention(params_, std::string("fusion/self/") + name(m) + "/",
                                    self_width, spec_.heads, kFusionDrop, init_rng));
  }
  const double d1 = spec_.fused() ? 0.8 : 0.2;
  const double d2 = spec_.fused() ? 0.5 : 0.2;
  head_ = add_mlp_head(params_, "head/", spec_.flatten_width(), spec_.head_hidden,
                       spec_.head_out(), d1, d2, init_rng);
}

Value QuestionNet::encode_on_tape(Lifter& lift, Modality m, Value seq, Mode mode,
                                  RandomSource* rng) const {
  const EncoderHandles& h = encoders_.at(m);
  Value x = bilstm_forward(lift, h.lstm, seq);
  const std::vector<std::uint8_t> ones(x.rows(), 1);
  for (const AttentionParams& a : h.attn)
    x = multihead_attention_forward(lift, a, x, x, ones, mode, rng);
  return x;
}

Value QuestionNet::fuse_positions(Lifter& lift, std::span<const Value> encs, Mode mode,
                                  RandomSource* rng) const {
  if (!spec_.fused()) throw ConfigError("fuse_positions on a single-modality network");
  if (encs.size() != spec_.modalities.size())
    throw std::invalid_argument("fuse_positions: one encoding per modality");
  const std::size_t n = encs[0].rows();
  for (const Value& e : encs)
    if (e.rows() != n || e.cols() != spec_.enc_width())
      throw std::invalid_argument("fuse_positions: encoding shape mismatch");
  Tape& tape = lift.tape();
  const std::vector<std::uint8_t> ones(n, 1);
  const auto mha = [&](const AttentionParams& p, Value q, Value kv) {
    return multihead_attention_forward(lift, p, q, kv, ones, mode, rng);
  };
  if (spec_.modalities.size() == 2) {
    // cross_[0] is M1->M2 (query enc2), cross_[1] is M2->M1 (query enc1);
    // branches concatenate in query-modality order.
    Value out_q2 = mha(cross_[0], encs[1], encs[0]);
    Value out_q1 = mha(cross_[1], encs[0], encs[1]);
    Value b1 = mha(self_[0], out_q1, out_q1);
    Value b2 = mha(self_[1], out_q2, out_q2);
    const std::array<Value, 2> parts{b1, b2};
    return tape.concat_cols(parts);
  }
  Value t_to_a = mha(cross_[0], encs[1], encs[0]);
  Value v_to_a = mha(cross_[1], encs[1], encs[2]);
  Value a_to_t = mha(cross_[2], encs[0], encs[1]);
  Value v_to_t = mha(cross_[3], encs[0], encs[2]);
  Value t_to_v = mha(cross_[4], encs[2], encs[0]);
  Value a_to_v = mha(cross_[5], encs[2], encs[1]);
  const std::array<Value, 2> acc_t_parts{a_to_t, v_to_t};
  const std::array<Value, 2> acc_a_parts{t_to_a, v_to_a};
  const std::array<Value, 2> acc_v_parts{t_to_v, a_to_v};
  Value acc_t = tape.concat_cols(acc_t_parts);
  Value acc_a = tape.concat_cols(acc_a_parts);
  Value acc_v = tape.concat_cols(acc_v_parts);
  Value s_t = mha(self_[0], acc_t, acc_t);
  Value s_a = mha(self_[1], acc_a, acc_a);
  Value s_v = mha(self_[2], acc_v, acc_v);
  const std::array<Value, 3> parts{s_t, s_a, s_v};
  return tape.concat_cols(parts);
}

Value QuestionNet::head_over_sessions(Lifter& lift, std::span<const Value> session_positions,
                                      Mode mode, RandomSource* rng) {
  if (session_positions.empty()) throw std::invalid_argument("head_over_sessions: empty batch");
  Tape& tape = lift.tape();
  std::vector<Value> flat;
  for (const Value& pos : session_positions) {
    if (pos.cols() != spec_.position_width())
      throw std::invalid_argument("head_over_sessions: position width mismatch");
    if (pos.rows() > spec_.max_turns)
      throw std::invalid_argument("head_over_sessions: too many turns");
    Value padded = pos.rows() == spec_.max_turns ? pos : tape.pad_rows(pos, spec_.max_turns);
    flat.push_back(tape.reshape(padded, {std::size_t{1}, spec_.flatten_width()}));
  }
  Value rows = flat.size() == 1 ? flat[0] : tape.concat_rows(flat);
  return mlp_head_forward(lift, head_, rows, mode, rng);
}

Value QuestionNet::forward(Lifter& lift, const PaddedBatch& batch, Mode mode, RandomSource* rng,
                           const FrozenTextCache* text_cache) {
  if (batch.max_turns != spec_.max_turns)
    throw std::invalid_argument("batch max_turns does not match the network");
  Tape& tape = lift.tape();
  std::vector<Value> positions;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::vector<Value> encs;
    for (Modality m : spec_.modalities) {
      if (m == Modality::text && text_cache) {
        auto it = text_cache->encodings.find(batch.ids[i]);
        if (it == text_cache->encodings.end())
          throw DataError("no cached text encoding for session " + batch.ids[i]);
        if (it->second.rows() != batch.n_turns[i])
          throw DataError("cached text encoding has wrong turn count for " + batch.ids[i]);
        encs.push_back(tape.constant(it->second));
        continue;
      }
      auto fit = batch.features.find(m);
      if (fit == batch.features.end())
        throw DataError(std::string("batch lacks modality ") + name(m));
      if (fit->second.shape()[2] != spec_.in_widths.at(m))
        throw DataError(std::string("input width mismatch for ") + name(m));
      encs.push_back(encode_on_tape(lift, m, tape.constant(batch.session_rows(m, i)), mode, rng));
    }
    positions.push_back(spec_.fused() ? fuse_positions(lift, encs, mode, rng) : encs[0]);
  }
  return head_over_sessions(lift, positions, mode, rng);
}

Tensor QuestionNet::encode_turns_eval(Modality m, const Tensor& rows) {
  Tape tape;
  Lifter lift(tape, params_);
  Value v = encode_on_tape(lift, m, tape.constant(rows), Mode::eval, nullptr);
  return v.tensor();
}

FrozenTextCache precompute_text_encodings(QuestionNet& text_net, const Dataset& ds,
                                          std::size_t max_turns) {
  FrozenTextCache cache;
  for (const Session& s : ds.sessions) {
    const Tensor& feat = s.features.at(Modality::text);
    const std::size_t n = std::min(feat.rows(), max_turns);
    Tensor rows({n, feat.cols()});
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t j = 0; j < feat.cols(); ++j) rows.at(t, j) = feat.at(t, j);
    cache.encodings.emplace(s.id, text_net.encode_turns_eval(Modality::text, rows));
  }
  return cache;
}

void validate(const QuestMfModel& model) {
  const std::size_t want = model.framework == Framework::questmf ? kNumQuestions : 1;
  if (model.nets.size() != want)
    throw ConfigError("model holds the wrong number of question networks");
  for (const QuestionNet& net : model.nets) {
    if (net.spec().framework != model.framework || net.spec().loss != model.loss)
      throw ConfigError("network spec disagrees with the model tags");
  }
}

EncodeResult encode_single_modality(QuestionNet& net, const PaddedBatch& batch, Mode mode,
                                    RandomSource* rng) {
  if (net.spec().fused()) throw ConfigError("encode_single_modality needs a single-modality net");
  const Modality m = net.spec().modalities[0];
  auto fit = batch.features.find(m);
  if (fit == batch.features.end())
    throw DataError(std::string("batch lacks modality ") + name(m));
  if (fit->second.shape()[2] != net.spec().in_widths.at(m))
    throw DataError(std::string("input width mismatch for ") + name(m));
  Tape tape;
  Lifter lift(tape, net.params());
  const std::size_t b = batch.size();
  const std::size_t width = net.spec().enc_width();
  Tensor enc3({b, net.spec().max_turns, width});
  std::vector<Value> positions;
  for (std::size_t i = 0; i < b; ++i) {
    Value e = net.encode_on_tape(lift, m, tape.constant(batch.session_rows(m, i)), mode, rng);
    const Tensor& et = e.tensor();
    for (std::size_t t = 0; t < et.rows(); ++t)
      for (std::size_t j = 0; j < width; ++j) enc3.at3(i, t, j) = et.at(t, j);
    positions.push_back(e);
  }
  Value head = net.head_over_sessions(lift, positions, mode, rng);
  return EncodeResult{std::move(enc3), head.tensor()};
}

namespace {

Tensor fuse_injected(QuestionNet& net, std::span<const Tensor* const> encs,
                     const std::vector<std::vector<std::uint8_t>>& mask, Mode mode,
                     RandomSource* rng) {
  const std::size_t b = mask.size();
  if (b == 0) throw std::invalid_argument("empty batch");
  for (const Tensor* e : encs) {
    if (e->rank() != 3 || e->shape()[0] != b)
      throw std::invalid_argument("encodings must be batch x turns x width");
    if (e->shape()[2] != net.spec().enc_width())
      throw std::invalid_argument("encoding width mismatch");
    if (e->shape()[1] != encs[0]->shape()[1])
      throw std::invalid_argument("encoding turn counts disagree");
  }
  Tape tape;
  Lifter lift(tape, net.params());
  std::vector<Value> positions;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t n = prefix_length(mask[i]);
    std::vector<Value> parts;
    for (const Tensor* e : encs) parts.push_back(tape.constant(slice_session(*e, i, n)));
    positions.push_back(net.fuse_positions(lift, parts, mode, rng));
  }
  Value head = net.head_over_sessions(lift, positions, mode, rng);
  return head.tensor();
}

}  // namespace

Tensor fuse_two_modalities(QuestionNet& net, const Tensor& enc1, const Tensor& enc2,
                           const std::vector<std::vector<std::uint8_t>>& mask, Mode mode,
                           RandomSource* rng) {
  if (net.spec().modalities.size() != 2)
    throw ConfigError("fuse_two_modalities needs a two-modality net");
  const std::array<const Tensor*, 2> encs{&enc1, &enc2};
  return fuse_injected(net, encs, mask, mode, rng);
}

Tensor fuse_three_modalities(QuestionNet& net, const Tensor& enc_text, const Tensor& enc_audio,
                             const Tensor& enc_video,
                             const std::vector<std::vector<std::uint8_t>>& mask, Mode mode,
                             RandomSource* rng) {
  if (net.spec().modalities.size() != 3)
    throw ConfigError("fuse_three_modalities needs a three-modality net");
  const std::array<const Tensor*, 3> encs{&enc_text, &enc_audio, &enc_video};
  return fuse_injected(net, encs, mask, mode, rng);
}

std::vector<SessionPrediction> questmf_forward(QuestMfModel& model, const PaddedBatch& batch,
                                               Mode mode, RandomSource* rng) {
  if (model.framework != Framework::questmf)
    throw ConfigError("questmf_forward needs the questmf framework");
  validate(model);
  const std::size_t b = batch.size();
  std::vector<SessionPrediction> out(b);
  for (std::size_t i = 0; i < b; ++i) out[i].id = batch.ids[i];
  for (int q = 0; q < kNumQuestions; ++q) {
    QuestionNet& net = model.nets[static_cast<std::size_t>(q)];
    Tape tape;
    Lifter lift(tape, net.params());
    const Tensor& t = net.forward(lift, batch, mode, rng).tensor();
    for (std::size_t i = 0; i < b; ++i) {
      QuestionOutput& qo = out[i].questions[static_cast<std::size_t>(q)];
      if (net.spec().head_out() == kNumClasses) {
        std::array<double, kNumClasses> logits{};
        for (int c = 0; c < kNumClasses; ++c) logits[c] = t.at(i, static_cast<std::size_t>(c));
        qo.probs = softmax4(logits);
        qo.cls = argmax_class(qo.probs);
        qo.score = static_cast<double>(qo.cls);
      } else {
        qo.score = clamp(t.at(i, 0), 0.0, 3.0);
        qo.cls = static_cast<int>(std::floor(qo.score + 0.5));
        qo.probs = {};
        qo.probs[static_cast<std::size_t>(qo.cls)] = 1.0;
      }
    }
  }
  for (SessionPrediction& p : out) {
    p.total = 0.0;
    for (const QuestionOutput& qo : p.questions) p.total += qo.score;
  }
  return out;
}

std::vector<double> total_forward(QuestMfModel& model, const PaddedBatch& batch, Mode mode,
                                  RandomSource* rng) {
  if (model.framework != Framework::total)
    throw ConfigError("total_forward needs the total framework");
  validate(model);
  QuestionNet& net = model.nets[0];
  Tape tape;
  Lifter lift(tape, net.params());
  const Tensor& t = net.forward(lift, batch, mode, rng).tensor();
  std::vector<double> out(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) out[i] = clamp(t.at(i, 0), 0.0, 24.0);
  return out;
}

}  // namespace questmf
