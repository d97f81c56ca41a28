#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "questmf/data.hpp"
#include "questmf/errors.hpp"
#include "questmf/layers.hpp"
#include "questmf/losses.hpp"

namespace questmf {

enum class Framework { questmf, total };

const char* name(Framework f);
std::optional<Framework> framework_from(std::string_view s);

// Shape of one network: a single-modality encoder with its own head when one
// modality is listed, a fused model otherwise. The total framework predicts
// one scalar and therefore only pairs with mse.
struct NetSpec {
  Framework framework = Framework::questmf;
  LossKind loss = LossKind::imboll;
  std::vector<Modality> modalities;            // canonical order, unique
  std::map<Modality, std::size_t> in_widths;   // turn-vector width per modality
  std::size_t d_lstm = 50;
  std::size_t heads = 4;
  std::size_t max_turns = 120;
  std::size_t head_hidden = 256;

  bool fused() const { return modalities.size() >= 2; }
  std::size_t enc_width() const { return 2 * d_lstm; }
  // Per-position width after fusion: one branch per modality for two
  // modalities, a two-way concatenation per modality for three.
  std::size_t position_width() const;
  std::size_t flatten_width() const { return max_turns * position_width(); }
  std::size_t head_out() const;

  static NetSpec single(Framework fw, LossKind loss, Modality m, std::size_t in_width);
  static NetSpec fused_spec(Framework fw, LossKind loss, std::vector<Modality> ms,
                            const std::map<Modality, std::size_t>& widths);
};

void validate(const NetSpec& spec);

// Encoder stack sizes and dropout rates are fixed per role: the text encoder
// uses one attention layer at dropout 0.5, audio and video use two at 0.2,
// fusion attention runs at 0.8, encoder heads at 0.2/0.2, fusion heads at
// 0.8/0.5.
std::size_t encoder_attn_layers(Modality m);
double encoder_attn_dropout(Modality m);

// Eval-mode turn encodings of a frozen text branch, precomputed once per
// session and injected into fusion tapes as constants.
struct FrozenTextCache {
  std::map<std::string, Tensor> encodings;  // session id -> n_i x enc_width
};

// One question's network. Parameter registration order (which is the
// initialization draw order) is: encoders in canonical modality order (per
// encoder: lstm fw w/u/b, bw w/u/b, then its attention layers in stack
// order, each wq/wk/wv/wo), then for fused nets the cross-attention layers
// in listed order (two modalities: M1->M2, M2->M1; three: T->A, V->A, A->T,
// V->T, T->V, A->V), then one self-attention layer per modality in
// canonical order, then the head (w1, b1, w2, b2). Dropout draws during a
// forward pass follow the same layer order, session by session, with the
// head last.
class QuestionNet {
 public:
  QuestionNet(NetSpec spec, RandomSource& init_rng);

  const NetSpec& spec() const { return spec_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Batch forward on the caller's tape: one row of head output per session.
  // A frozen text cache replaces the text encoder with stored constants.
  Value forward(Lifter& lift, const PaddedBatch& batch, Mode mode, RandomSource* rng = nullptr,
                const FrozenTextCache* text_cache = nullptr);

  // Turn encodings for one modality of one session, on the caller's tape.
  Value encode_on_tape(Lifter& lift, Modality m, Value seq, Mode mode, RandomSource* rng) const;
  // The fused per-position encoding (n x position_width) from per-modality
  // encodings given in canonical order.
  Value fuse_positions(Lifter& lift, std::span<const Value> encs, Mode mode,
                       RandomSource* rng) const;
  // Pads per-position rows to max_turns, flattens to one row per session,
  // applies the head to the whole batch.
  Value head_over_sessions(Lifter& lift, std::span<const Value> session_positions, Mode mode,
                           RandomSource* rng);

  // Eval-mode encodings as a plain tensor (n_i x enc_width), for caching.
  Tensor encode_turns_eval(Modality m, const Tensor& rows);

 private:
  NetSpec spec_;
  ParamSet params_;
  struct EncoderHandles {
    BiLstmParams lstm;
    std::vector<AttentionParams> attn;
  };
  std::map<Modality, EncoderHandles> encoders_;
  std::vector<AttentionParams> cross_;  // listed order
  std::vector<AttentionParams> self_;   // canonical modality order
  MlpHeadParams head_;
};

FrozenTextCache precompute_text_encodings(QuestionNet& text_net, const Dataset& ds,
                                          std::size_t max_turns);

// A full model: 8 question networks under the questmf framework, 1 under
// total.
struct QuestMfModel {
  Framework framework = Framework::questmf;
  LossKind loss = LossKind::imboll;
  std::vector<QuestionNet> nets;
};

void validate(const QuestMfModel& model);

// Classification decision rule: highest probability, ties to the lower
// class (strict improvement required to move up).
int argmax_class(const std::array<double, kNumClasses>& probs);

struct QuestionOutput {
  std::array<double, kNumClasses> probs{};  // classification; one-hot of the
                                            // reported class under mse
  double score = 0.0;                       // argmax class, or clamped scalar
  int cls = 0;                              // argmax (ties lowest) or round-half-up
};

struct SessionPrediction {
  std::string id;
  std::array<QuestionOutput, kNumQuestions> questions{};
  double total = 0.0;
};

// Batch exports of the public operations. Turn encodings come back zero
// padded to batch x max_turns x enc_width alongside the head output.
struct EncodeResult {
  Tensor turn_encodings;
  Tensor head_output;
};

EncodeResult encode_single_modality(QuestionNet& net, const PaddedBatch& batch, Mode mode,
                                    RandomSource* rng = nullptr);

// Fusion over injected encodings (batch x max_turns x enc_width tensors with
// a prefix-true mask per session), returning head outputs. The net supplies
// the fusion and head parameters; its encoders are bypassed.
Tensor fuse_two_modalities(QuestionNet& net, const Tensor& enc1, const Tensor& enc2,
                           const std::vector<std::vector<std::uint8_t>>& mask, Mode mode,
                           RandomSource* rng = nullptr);
Tensor fuse_three_modalities(QuestionNet& net, const Tensor& enc_text, const Tensor& enc_audio,
                             const Tensor& enc_video,
                             const std::vector<std::vector<std::uint8_t>>& mask, Mode mode,
                             RandomSource* rng = nullptr);

// Runs all eight question networks; classification picks argmax (ties to the
// lower class) and totals sum the picked classes; mse clamps each scalar to
// [0,3], sums the clamped values, and reports round-half-up classes.
std::vector<SessionPrediction> questmf_forward(QuestMfModel& model, const PaddedBatch& batch,
                                               Mode mode = Mode::eval,
                                               RandomSource* rng = nullptr);

// Single fused regressor; outputs clamp to [0,24] with no rounding.
std::vector<double> total_forward(QuestMfModel& model, const PaddedBatch& batch,
                                  Mode mode = Mode::eval, RandomSource* rng = nullptr);

}  // namespace questmf
