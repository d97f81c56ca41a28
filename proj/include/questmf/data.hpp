#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "questmf/errors.hpp"
#include "questmf/losses.hpp"
#include "questmf/tensor.hpp"

namespace questmf {

enum class Modality { text = 0, audio = 1, video = 2 };
enum class Split { train = 0, val = 1, test = 2 };
enum class Layout { turns, frames };

const char* name(Modality m);
const char* name(Split s);
std::optional<Modality> modality_from(std::string_view s);
std::optional<Split> split_from(std::string_view s);
// Parses a comma-separated modality list into canonical text<audio<video
// order; rejects unknown names, duplicates, and empty lists.
std::vector<Modality> parse_modalities(std::string_view csv);

struct TurnTiming {
  std::size_t index = 0;
  double t_start = 0.0;
  double t_end = 0.0;
};

// One interview: participant turns only, all modalities aligned per turn.
struct Session {
  std::string id;
  Split split = Split::train;
  std::optional<std::array<int, kNumQuestions>> labels;  // classes 0..3
  std::optional<int> total;                              // 0..24
  std::vector<TurnTiming> timings;                       // empty when not ingested
  std::map<Modality, Tensor> features;                   // n_turns x width each
  std::size_t n_turns() const;
};

struct Dataset {
  std::vector<Session> sessions;
  std::vector<const Session*> split_sessions(Split s) const;
  std::map<Modality, std::size_t> widths() const;
  bool has_modality(Modality m) const;
};

// Feature file: magic "QMF1", u32 rows, u32 cols (little-endian), then
// row-major float32 values, widened to float64 on read.
Tensor read_feature_matrix(const std::filesystem::path& path);
void write_feature_matrix(const std::filesystem::path& path, const Tensor& matrix);

// Mean over frame rows with indices in [floor(t_start*rate),
// floor(t_end*rate)) clipped to [0, T); optional unit normalization.
Tensor aggregate_turn_window(const Tensor& frames, double t_start, double t_end, double rate,
                             bool normalize);

struct ModalityRef {
  std::string path;
  Layout layout = Layout::turns;
  double rate = 0.0;  // frames per second; required for frames layout
};

struct SessionDescriptor {
  std::string id;
  Split split = Split::train;
  std::optional<std::array<int, kNumQuestions>> labels;
  std::optional<int> total;
  std::map<Modality, ModalityRef> modalities;
  std::optional<std::string> transcript;
};

// Validates schema, label ranges, label/total consistency, id uniqueness,
// and that every referenced file exists. Paths stay relative to the
// manifest's directory.
std::vector<SessionDescriptor> parse_manifest(const std::filesystem::path& manifest_path);

// Full ingestion: reads feature files, filters participant transcript
// rows, aggregates frame-layout modalities per turn window, unit-
// normalizes text and video turn vectors (audio stays raw), and checks
// turn-count and width consistency.
Dataset load_dataset(const std::filesystem::path& manifest_path);

struct PaddedBatch {
  std::vector<std::string> ids;
  std::vector<std::size_t> n_turns;  // post-truncation real turn counts
  std::map<Modality, Tensor> features;  // batch x max_turns x width
  std::vector<std::vector<std::uint8_t>> mask;  // 1 at real turns
  std::vector<std::optional<std::array<int, kNumQuestions>>> labels;
  std::vector<std::optional<int>> totals;
  std::size_t max_turns = 0;
  std::size_t size() const { return ids.size(); }
  // Copy of the real (unpadded) turn rows of one session.
  Tensor session_rows(Modality m, std::size_t i) const;
};

// Sessions longer than max_turns keep their first max_turns turns.
PaddedBatch build_padded_batch(std::span<const Session* const> sessions,
                               std::span<const Modality> modalities, std::size_t max_turns);

struct SynthConfig {
  std::size_t train_sessions = 163;
  std::size_t val_sessions = 56;
  std::size_t test_sessions = 56;
  std::array<double, kNumClasses> class_prior = {0.50, 0.25, 0.15, 0.10};
  // Signal-to-noise per modality is strength / noise_scale; text strongest
  // by default, mirroring the single-modality performance ordering.
  double text_strength = 3.0;
  double audio_strength = 2.0;
  double video_strength = 1.2;
  double noise_scale = 0.75;
  std::size_t min_turns = 5;
  std::size_t max_turns = 14;
  std::size_t d_text = 384;
  std::size_t d_audio = 23;
  std::size_t d_video = 2048;
  std::uint64_t seed = 7;
  bool test_item_labels = false;
};

void validate(const SynthConfig& cfg);

// Deterministic in cfg.seed. Per session, per-question classes come from
// the prior; each turn's modality vector is signal + noise where the
// signal mixes 8 orthonormal per-question directions scaled by s_q/3 plus
// a constant base direction (so normalization keeps classes separable).
// Features are quantized to float32 precision at generation time, which
// makes the in-memory dataset bit-identical to a write/reload round trip.
// A deterministic repair pass guarantees every class appears for every
// question in the train split.
Dataset synth_generate(const SynthConfig& cfg);

// Writes manifest.json plus per-session feature files and transcripts.
// Text and video are stored per turn; audio is stored as 100 Hz frames
// with the turn windows in the transcript, exercising the frame-
// aggregation ingestion path on reload.
void synth_write(const std::filesystem::path& dir, const SynthConfig& cfg);

}  // namespace questmf
