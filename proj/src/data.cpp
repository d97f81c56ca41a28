#include "questmf/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "questmf/random.hpp"

namespace questmf {

namespace {

using nlohmann::json;

constexpr char kManifestFormat[] = "questmf-manifest-v1";
constexpr double kAudioRate = 100.0;
constexpr double kTurnSeconds = 1.5;

double quantize32(double v) { return static_cast<double>(static_cast<float>(v)); }

void normalize_row(Tensor& m, std::size_t r) {
  double sq = 0.0;
  for (std::size_t j = 0; j < m.cols(); ++j) sq += m.at(r, j) * m.at(r, j);
  if (sq == 0.0) return;
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t j = 0; j < m.cols(); ++j) m.at(r, j) *= inv;
}

bool normalized_modality(Modality m) { return m != Modality::audio; }

}  // namespace

const char* name(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::audio: return "audio";
    default: return "video";
  }
}

const char* name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

std::optional<Modality> modality_from(std::string_view s) {
  if (s == "text") return Modality::text;
  if (s == "audio") return Modality::audio;
  if (s == "video") return Modality::video;
  return std::nullopt;
}

std::optional<Split> split_from(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val" || s == "validation") return Split::val;
  if (s == "test") return Split::test;
  return std::nullopt;
}

std::vector<Modality> parse_modalities(std::string_view csv) {
  std::set<Modality> seen;
  std::string item;
  std::stringstream ss{std::string(csv)};
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    auto m = modality_from(item);
    if (!m) throw ConfigError("unknown modality: " + item);
    if (!seen.insert(*m).second) throw ConfigError("duplicate modality: " + item);
  }
  if (seen.empty()) throw ConfigError("modality list is empty");
  return std::vector<Modality>(seen.begin(), seen.end());
}

std::size_t Session::n_turns() const {
  if (features.empty()) return 0;
  return features.begin()->second.rows();
}

std::vector<const Session*> Dataset::split_sessions(Split s) const {
  std::vector<const Session*> out;
  for (const Session& sess : sessions)
    if (sess.split == s) out.push_back(&sess);
  return out;
}

std::map<Modality, std::size_t> Dataset::widths() const {
  std::map<Modality, std::size_t> w;
  if (!sessions.empty())
    for (const auto& [m, t] : sessions.front().features) w[m] = t.cols();
  return w;
}

bool Dataset::has_modality(Modality m) const {
  if (sessions.empty()) return false;
  return sessions.front().features.count(m) > 0;
}

Tensor read_feature_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "QMF1", 4) != 0)
    throw DataError("bad magic in feature file: " + path.string());
  unsigned char hdr[8];
  if (!in.read(reinterpret_cast<char*>(hdr), 8))
    throw DataError("truncated header in feature file: " + path.string());
  const auto u32 = [&hdr](int off) {
    return static_cast<std::uint32_t>(hdr[off]) | (static_cast<std::uint32_t>(hdr[off + 1]) << 8) |
           (static_cast<std::uint32_t>(hdr[off + 2]) << 16) |
           (static_cast<std::uint32_t>(hdr[off + 3]) << 24);
  };
  const std::size_t rows = u32(0), cols = u32(4);
  if (cols == 0) throw DataError("feature file has zero columns: " + path.string());
  const std::size_t n = rows * cols;
  std::vector<unsigned char> payload(n * 4);
  if (!in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(n * 4)))
    throw DataError("truncated payload in feature file: " + path.string());
  char extra;
  if (in.read(&extra, 1)) throw DataError("trailing bytes in feature file: " + path.string());
  Tensor out({rows, cols});
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t bits = static_cast<std::uint32_t>(payload[4 * i]) |
                         (static_cast<std::uint32_t>(payload[4 * i + 1]) << 8) |
                         (static_cast<std::uint32_t>(payload[4 * i + 2]) << 16) |
                         (static_cast<std::uint32_t>(payload[4 * i + 3]) << 24);
    const float f = std::bit_cast<float>(bits);
    if (!std::isfinite(f)) throw DataError("non-finite value in feature file: " + path.string());
    out.at(i) = static_cast<double>(f);
  }
  return out;
}

void write_feature_matrix(const std::filesystem::path& path, const Tensor& matrix) {
  if (matrix.rank() != 2) throw std::invalid_argument("write_feature_matrix: need rank 2");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write feature file: " + path.string());
  out.write("QMF1", 4);
  const auto put_u32 = [&out](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  put_u32(static_cast<std::uint32_t>(matrix.rows()));
  put_u32(static_cast<std::uint32_t>(matrix.cols()));
  std::vector<unsigned char> payload(matrix.size() * 4);
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(matrix.at(i)));
    payload[4 * i] = static_cast<unsigned char>(bits & 0xff);
    payload[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    payload[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    payload[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) throw DataError("short write on feature file: " + path.string());
}

Tensor aggregate_turn_window(const Tensor& frames, double t_start, double t_end, double rate,
                             bool normalize) {
  if (frames.rank() != 2 || frames.cols() == 0)
    throw std::invalid_argument("aggregate_turn_window: need a non-empty matrix");
  if (rate <= 0.0) throw std::invalid_argument("aggregate_turn_window: rate must be positive");
  if (!(t_start >= 0.0) || !(t_end > t_start))
    throw DataError("aggregate_turn_window: need t_end > t_start >= 0");
  const double lo = std::floor(t_start * rate), hi = std::floor(t_end * rate);
  const std::size_t t = frames.rows();
  std::size_t i0 = lo >= static_cast<double>(t) ? t : static_cast<std::size_t>(lo);
  std::size_t i1 = hi >= static_cast<double>(t) ? t : static_cast<std::size_t>(hi);
  if (i0 >= i1) throw DataError("aggregate_turn_window: empty window");
  const std::size_t w = frames.cols();
  Tensor out({1, w});
  for (std::size_t j = 0; j < w; ++j) {
    double s = 0.0;
    for (std::size_t i = i0; i < i1; ++i) s += frames.at(i, j);
    out.at(0, j) = s / static_cast<double>(i1 - i0);
  }
  if (normalize) normalize_row(out, 0);
  return out;
}

namespace {

struct RawModality {
  Layout layout = Layout::turns;
  double rate = 0.0;
  Tensor payload;
};

std::vector<TurnTiming> parse_transcript(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open transcript: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty transcript: " + path.string());
  if (line != "turn_index\tt_start\tt_end\tspeaker\ttext")
    throw DataError("unexpected transcript header: " + path.string());
  std::vector<TurnTiming> turns;
  std::size_t ln = 1;
  while (std::getline(in, line)) {
    ++ln;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t pos = 0;
    while (cells.size() < 4) {
      const std::size_t tab = line.find('\t', pos);
      if (tab == std::string::npos) break;
      cells.push_back(line.substr(pos, tab - pos));
      pos = tab + 1;
    }
    if (cells.size() < 4)
      throw DataError("transcript row " + std::to_string(ln) + " has too few columns: " +
                      path.string());
    if (cells[3] != "participant") continue;
    TurnTiming tt;
    try {
      const long long idx = std::stoll(cells[0]);
      if (idx < 0) throw std::invalid_argument("negative");
      tt.index = static_cast<std::size_t>(idx);
      tt.t_start = std::stod(cells[1]);
      tt.t_end = std::stod(cells[2]);
    } catch (const std::exception&) {
      throw DataError("unparsable transcript row " + std::to_string(ln) + ": " + path.string());
    }
    if (!(tt.t_start >= 0.0) || !(tt.t_end > tt.t_start))
      throw DataError("bad turn times at transcript row " + std::to_string(ln) + ": " +
                      path.string());
    turns.push_back(tt);
  }
  return turns;
}

Session assemble_session(std::string id, Split split,
                         std::optional<std::array<int, kNumQuestions>> labels,
                         std::optional<int> total, std::vector<TurnTiming> timings,
                         const std::map<Modality, RawModality>& raws) {
  Session s;
  s.id = std::move(id);
  s.split = split;
  s.labels = labels;
  s.total = total;
  s.timings = std::move(timings);

  std::optional<std::size_t> n_turns;
  if (!s.timings.empty()) n_turns = s.timings.size();
  const auto meet = [&](std::size_t n, const char* what) {
    if (n_turns && *n_turns != n)
      throw DataError("session " + s.id + ": turn count disagreement at " + what);
    n_turns = n;
  };

  for (const auto& [m, raw] : raws) {
    if (raw.payload.cols() == 0)
      throw DataError("session " + s.id + ": empty feature width for " + name(m));
    if (raw.layout == Layout::turns) {
      meet(raw.payload.rows(), name(m));
      Tensor feat = raw.payload;
      if (normalized_modality(m))
        for (std::size_t r = 0; r < feat.rows(); ++r) normalize_row(feat, r);
      s.features.emplace(m, std::move(feat));
    } else {
      if (s.timings.empty())
        throw DataError("session " + s.id + ": frame-layout " + std::string(name(m)) +
                        " requires a transcript");
      Tensor feat({s.timings.size(), raw.payload.cols()});
      for (std::size_t t = 0; t < s.timings.size(); ++t) {
        Tensor row = aggregate_turn_window(raw.payload, s.timings[t].t_start, s.timings[t].t_end,
                                           raw.rate, normalized_modality(m));
        for (std::size_t j = 0; j < feat.cols(); ++j) feat.at(t, j) = row.at(0, j);
      }
      s.features.emplace(m, std::move(feat));
    }
  }
  if (!n_turns || *n_turns == 0)
    throw DataError("session " + s.id + ": no turns");

  if (s.labels) {
    int sum = 0;
    for (int v : *s.labels) {
      if (v < 0 || v >= kNumClasses)
        throw DataError("session " + s.id + ": label out of range");
      sum += v;
    }
    if (s.total && *s.total != sum)
      throw DataError("session " + s.id + ": total does not equal label sum");
    if (!s.total) s.total = sum;
  }
  if (s.total && (*s.total < 0 || *s.total > 24))
    throw DataError("session " + s.id + ": total out of range");
  return s;
}

}  // namespace

std::vector<SessionDescriptor> parse_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest: " + manifest_path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object() || j.value("format", "") != kManifestFormat)
    throw DataError("manifest format must be " + std::string(kManifestFormat));
  if (!j.contains("sessions") || !j["sessions"].is_array())
    throw DataError("manifest lacks a sessions array");

  const std::filesystem::path base = manifest_path.parent_path();
  std::set<std::string> ids;
  std::vector<SessionDescriptor> out;
  for (const json& js : j["sessions"]) {
    SessionDescriptor d;
    if (!js.is_object() || !js.contains("id") || !js["id"].is_string())
      throw DataError("manifest session lacks an id");
    d.id = js["id"].get<std::string>();
    if (d.id.empty()) throw DataError("manifest session has an empty id");
    if (!ids.insert(d.id).second) throw DataError("duplicate session id: " + d.id);
    const auto split = split_from(js.value("split", ""));
    if (!split) throw DataError("session " + d.id + ": unknown split");
    d.split = *split;
    if (js.contains("labels")) {
      if (!js["labels"].is_array() || js["labels"].size() != kNumQuestions)
        throw DataError("session " + d.id + ": labels must be 8 integers");
      std::array<int, kNumQuestions> arr{};
      for (int q = 0; q < kNumQuestions; ++q) {
        if (!js["labels"][q].is_number_integer())
          throw DataError("session " + d.id + ": labels must be integers");
        arr[q] = js["labels"][q].get<int>();
        if (arr[q] < 0 || arr[q] >= kNumClasses)
          throw DataError("session " + d.id + ": label out of range {0..3}");
      }
      d.labels = arr;
    }
    if (js.contains("total")) {
      if (!js["total"].is_number_integer())
        throw DataError("session " + d.id + ": total must be an integer");
      d.total = js["total"].get<int>();
      if (*d.total < 0 || *d.total > 24)
        throw DataError("session " + d.id + ": total out of range {0..24}");
    }
    if (d.labels && d.total) {
      int sum = 0;
      for (int v : *d.labels) sum += v;
      if (sum != *d.total)
        throw DataError("session " + d.id + ": total does not equal label sum");
    }
    if (!js.contains("modalities") || !js["modalities"].is_object() || js["modalities"].empty())
      throw DataError("session " + d.id + ": needs a non-empty modalities object");
    for (const auto& [key, jm] : js["modalities"].items()) {
      const auto m = modality_from(key);
      if (!m) throw DataError("session " + d.id + ": unknown modality " + key);
      ModalityRef ref;
      ref.path = jm.value("path", "");
      if (ref.path.empty()) throw DataError("session " + d.id + ": missing path for " + key);
      const std::string layout = jm.value("layout", "turns");
      if (layout == "turns")
        ref.layout = Layout::turns;
      else if (layout == "frames")
        ref.layout = Layout::frames;
      else
        throw DataError("session " + d.id + ": unknown layout " + layout);
      if (ref.layout == Layout::frames) {
        ref.rate = jm.value("rate", 0.0);
        if (!(ref.rate > 0.0))
          throw DataError("session " + d.id + ": frame layout requires a positive rate");
      }
      if (!std::filesystem::exists(base / ref.path))
        throw DataError("session " + d.id + ": missing feature file " + ref.path);
      d.modalities.emplace(*m, std::move(ref));
    }
    if (js.contains("transcript")) {
      if (!js["transcript"].is_string())
        throw DataError("session " + d.id + ": transcript must be a path string");
      d.transcript = js["transcript"].get<std::string>();
      if (!std::filesystem::exists(base / *d.transcript))
        throw DataError("session " + d.id + ": missing transcript " + *d.transcript);
    }
    for (const auto& [m, ref] : d.modalities)
      if (ref.layout == Layout::frames && !d.transcript)
        throw DataError("session " + d.id + ": frame-layout " + std::string(name(m)) +
                        " requires a transcript");
    out.push_back(std::move(d));
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const auto descriptors = parse_manifest(manifest_path);
  const std::filesystem::path base = manifest_path.parent_path();
  Dataset ds;
  for (const auto& d : descriptors) {
    std::map<Modality, RawModality> raws;
    for (const auto& [m, ref] : d.modalities) {
      RawModality raw;
      raw.layout = ref.layout;
      raw.rate = ref.rate;
      raw.payload = read_feature_matrix(base / ref.path);
      raws.emplace(m, std::move(raw));
    }
    std::vector<TurnTiming> timings;
    if (d.transcript) timings = parse_transcript(base / *d.transcript);
    ds.sessions.push_back(
        assemble_session(d.id, d.split, d.labels, d.total, std::move(timings), raws));
  }
  // Widths must agree across sessions so one model fits all of them.
  std::map<Modality, std::size_t> widths;
  for (const Session& s : ds.sessions)
    for (const auto& [m, t] : s.features) {
      auto [it, fresh] = widths.emplace(m, t.cols());
      if (!fresh && it->second != t.cols())
        throw DataError("session " + s.id + ": width of " + std::string(name(m)) +
                        " differs from earlier sessions");
    }
  for (const Session& s : ds.sessions)
    for (const auto& [m, w] : widths)
      if (!s.features.count(m))
        throw DataError("session " + s.id + ": missing modality " + std::string(name(m)));
  return ds;
}

Tensor PaddedBatch::session_rows(Modality m, std::size_t i) const {
  const Tensor& f = features.at(m);
  const std::size_t w = f.shape()[2];
  Tensor out({n_turns[i], w});
  for (std::size_t t = 0; t < n_turns[i]; ++t)
    for (std::size_t j = 0; j < w; ++j) out.at(t, j) = f.at3(i, t, j);
  return out;
}

PaddedBatch build_padded_batch(std::span<const Session* const> sessions,
                               std::span<const Modality> modalities, std::size_t max_turns) {
  if (sessions.empty()) throw std::invalid_argument("build_padded_batch: empty batch");
  if (max_turns == 0) throw std::invalid_argument("build_padded_batch: max_turns must be >= 1");
  PaddedBatch b;
  b.max_turns = max_turns;
  const std::size_t n = sessions.size();
  for (const Session* s : sessions) {
    if (s->n_turns() == 0) throw DataError("session " + s->id + ": no turns");
    b.ids.push_back(s->id);
    b.n_turns.push_back(std::min(s->n_turns(), max_turns));
    b.labels.push_back(s->labels);
    b.totals.push_back(s->total);
  }
  for (Modality m : modalities) {
    if (!sessions[0]->features.count(m))
      throw DataError("batch requires modality " + std::string(name(m)));
    const std::size_t w = sessions[0]->features.at(m).cols();
    Tensor f({n, max_turns, w});
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor& src = sessions[i]->features.at(m);
      if (src.cols() != w) throw DataError("batch width mismatch for " + std::string(name(m)));
      for (std::size_t t = 0; t < b.n_turns[i]; ++t)
        for (std::size_t j = 0; j < w; ++j) f.at3(i, t, j) = src.at(t, j);
    }
    b.features.emplace(m, std::move(f));
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> mask(max_turns, 0);
    for (std::size_t t = 0; t < b.n_turns[i]; ++t) mask[t] = 1;
    b.mask.push_back(std::move(mask));
  }
  return b;
}

void validate(const SynthConfig& cfg) {
  double sum = 0.0;
  for (double p : cfg.class_prior) {
    if (!(p > 0.0)) throw ConfigError("synth: class priors must be positive");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("synth: class priors must sum to 1");
  // The repair pass needs one distinct slot per class within each question.
  if (cfg.train_sessions < static_cast<std::size_t>(kNumClasses))
    throw ConfigError("synth: need at least 4 train sessions");
  if (cfg.val_sessions == 0 || cfg.test_sessions == 0)
    throw ConfigError("synth: val and test splits must be non-empty");
  if (cfg.min_turns == 0 || cfg.min_turns > cfg.max_turns)
    throw ConfigError("synth: bad turn-count range");
  const std::size_t min_dim = kNumQuestions + 1;
  if (cfg.d_text < min_dim || cfg.d_audio < min_dim || cfg.d_video < min_dim)
    throw ConfigError("synth: feature widths must be at least 9");
  if (cfg.noise_scale < 0.0) throw ConfigError("synth: noise scale must be non-negative");
  if (!(cfg.text_strength > 0.0) || !(cfg.audio_strength > 0.0) || !(cfg.video_strength > 0.0))
    throw ConfigError("synth: signal strengths must be positive");
}

namespace {

struct RawSession {
  std::string id;
  Split split = Split::train;
  std::optional<std::array<int, kNumQuestions>> labels;
  std::optional<int> total;
  std::vector<TurnTiming> timings;
  std::map<Modality, RawModality> raws;
};

// 8 question directions plus one base direction, orthonormalized.
std::vector<std::vector<double>> draw_directions(std::size_t dim, RandomSource& rng) {
  const std::size_t k = kNumQuestions + 1;
  std::vector<std::vector<double>> dirs(k, std::vector<double>(dim));
  for (auto& v : dirs)
    for (double& x : v) x = rng.normal();
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) dot += dirs[i][d] * dirs[j][d];
      for (std::size_t d = 0; d < dim; ++d) dirs[i][d] -= dot * dirs[j][d];
    }
    double sq = 0.0;
    for (double x : dirs[i]) sq += x * x;
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : dirs[i]) x *= inv;
  }
  return dirs;
}

struct SynthPlan {
  std::vector<RawSession> sessions;
};

double modality_strength(const SynthConfig& cfg, Modality m) {
  switch (m) {
    case Modality::text: return cfg.text_strength;
    case Modality::audio: return cfg.audio_strength;
    default: return cfg.video_strength;
  }
}

std::size_t modality_dim(const SynthConfig& cfg, Modality m) {
  switch (m) {
    case Modality::text: return cfg.d_text;
    case Modality::audio: return cfg.d_audio;
    default: return cfg.d_video;
  }
}

SynthPlan synth_raw(const SynthConfig& cfg) {
  validate(cfg);
  RandomSource root(cfg.seed);

  RandomSource dir_rng = root.split("directions");
  std::map<Modality, std::vector<std::vector<double>>> dirs;
  for (Modality m : {Modality::text, Modality::audio, Modality::video})
    dirs.emplace(m, draw_directions(modality_dim(cfg, m), dir_rng));

  struct Meta {
    Split split;
    std::size_t n_turns;
    std::array<int, kNumQuestions> labels;
  };
  RandomSource label_rng = root.split("labels");
  std::vector<Meta> metas;
  const std::array<std::pair<Split, std::size_t>, 3> splits = {
      {{Split::train, cfg.train_sessions}, {Split::val, cfg.val_sessions},
       {Split::test, cfg.test_sessions}}};
  for (const auto& [split, count] : splits)
    for (std::size_t i = 0; i < count; ++i) {
      Meta m;
      m.split = split;
      m.n_turns = cfg.min_turns +
                  static_cast<std::size_t>(label_rng.next_below(cfg.max_turns - cfg.min_turns + 1));
      for (int q = 0; q < kNumQuestions; ++q)
        m.labels[q] = static_cast<int>(label_rng.categorical(cfg.class_prior));
      metas.push_back(m);
    }

  // Repair: every class must occur for every question in the train split,
  // or the per-question class weights would be undefined. When class c is
  // missing for question q, relabel the first train session whose current
  // label for q has another instance elsewhere; with at least 4 train
  // sessions such a surplus session always exists, and taking it cannot
  // empty a different class.
  for (int q = 0; q < kNumQuestions; ++q)
    for (int c = 0; c < kNumClasses; ++c) {
      std::array<std::size_t, kNumClasses> counts{};
      for (std::size_t i = 0; i < cfg.train_sessions; ++i) counts[metas[i].labels[q]]++;
      if (counts[c] > 0) continue;
      for (std::size_t i = 0; i < cfg.train_sessions; ++i)
        if (counts[metas[i].labels[q]] > 1) {
          metas[i].labels[q] = c;
          break;
        }
    }

  RandomSource feature_rng = root.split("features");
  SynthPlan plan;
  const std::size_t audio_frames_per_turn =
      static_cast<std::size_t>(kTurnSeconds * kAudioRate);  // 150
  const double frame_jitter = 0.02 * cfg.noise_scale;
  std::size_t serial = 0;
  for (const Meta& meta : metas) {
    ++serial;
    RawSession rs;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "syn%04zu", serial);
    rs.id = idbuf;
    rs.split = meta.split;
    int total = 0;
    for (int v : meta.labels) total += v;
    rs.total = total;
    if (meta.split != Split::test || cfg.test_item_labels) rs.labels = meta.labels;

    const std::size_t n = meta.n_turns;
    for (std::size_t t = 0; t < n; ++t)
      rs.timings.push_back({t, kTurnSeconds * static_cast<double>(t),
                            kTurnSeconds * static_cast<double>(t + 1)});

    std::map<Modality, Tensor> turn_raw;  // pre-quantization turn vectors
    for (Modality m : {Modality::text, Modality::audio, Modality::video})
      turn_raw.emplace(m, Tensor({n, modality_dim(cfg, m)}));
    Tensor audio_frames({n * audio_frames_per_turn, cfg.d_audio});

    for (std::size_t t = 0; t < n; ++t) {
      for (Modality m : {Modality::text, Modality::audio, Modality::video}) {
        const std::size_t dim = modality_dim(cfg, m);
        const double strength = modality_strength(cfg, m);
        const auto& ds = dirs.at(m);
        Tensor& out = turn_raw.at(m);
        for (std::size_t d = 0; d < dim; ++d) {
          double v = strength * ds[kNumQuestions][d];  // base direction
          for (int q = 0; q < kNumQuestions; ++q)
            v += strength * (static_cast<double>(meta.labels[q]) / 3.0) * ds[q][d];
          v += cfg.noise_scale * feature_rng.normal();
          out.at(t, d) = v;
        }
      }
      for (std::size_t f = 0; f < audio_frames_per_turn; ++f) {
        const std::size_t row = t * audio_frames_per_turn + f;
        for (std::size_t d = 0; d < cfg.d_audio; ++d)
          audio_frames.at(row, d) =
              quantize32(turn_raw.at(Modality::audio).at(t, d) + frame_jitter * feature_rng.normal());
      }
    }

    // Text payload mirrors upstream embedding dumps: already unit-norm.
    Tensor text_payload = turn_raw.at(Modality::text);
    for (std::size_t t = 0; t < n; ++t) normalize_row(text_payload, t);
    for (double& v : text_payload.values()) v = quantize32(v);
    Tensor video_payload = turn_raw.at(Modality::video);
    for (double& v : video_payload.values()) v = quantize32(v);

    rs.raws.emplace(Modality::text, RawModality{Layout::turns, 0.0, std::move(text_payload)});
    rs.raws.emplace(Modality::audio, RawModality{Layout::frames, kAudioRate,
                                                 std::move(audio_frames)});
    rs.raws.emplace(Modality::video, RawModality{Layout::turns, 0.0, std::move(video_payload)});
    plan.sessions.push_back(std::move(rs));
  }
  return plan;
}

}  // namespace

Dataset synth_generate(const SynthConfig& cfg) {
  SynthPlan plan = synth_raw(cfg);
  Dataset ds;
  for (RawSession& rs : plan.sessions)
    ds.sessions.push_back(assemble_session(rs.id, rs.split, rs.labels, rs.total,
                                           std::move(rs.timings), rs.raws));
  return ds;
}

void synth_write(const std::filesystem::path& dir, const SynthConfig& cfg) {
  SynthPlan plan = synth_raw(cfg);
  std::filesystem::create_directories(dir);
  json sessions = json::array();
  for (const RawSession& rs : plan.sessions) {
    const std::filesystem::path sdir = dir / rs.id;
    std::filesystem::create_directories(sdir);
    json jm;
    for (const auto& [m, raw] : rs.raws) {
      const std::string fname = std::string(name(m)) + ".qmf";
      write_feature_matrix(sdir / fname, raw.payload);
      json jref{{"path", rs.id + "/" + fname},
                {"layout", raw.layout == Layout::frames ? "frames" : "turns"}};
      if (raw.layout == Layout::frames) jref["rate"] = raw.rate;
      jm[name(m)] = jref;
    }
    {
      std::ofstream ts(sdir / "transcript.tsv", std::ios::trunc);
      ts << "turn_index\tt_start\tt_end\tspeaker\ttext\n";
      for (const TurnTiming& tt : rs.timings) {
        char s0[32], s1[32];
        std::snprintf(s0, sizeof(s0), "%.3f", tt.t_start);
        std::snprintf(s1, sizeof(s1), "%.3f", tt.t_end);
        ts << "-1\t" << s0 << '\t' << s0 << "\tagent\tprompt " << tt.index << '\n';
        ts << tt.index << '\t' << s0 << '\t' << s1 << "\tparticipant\tturn " << tt.index
           << " response\n";
      }
      if (!ts) throw DataError("cannot write transcript for " + rs.id);
    }
    json js{{"id", rs.id},
            {"split", name(rs.split)},
            {"modalities", jm},
            {"transcript", rs.id + "/transcript.tsv"}};
    if (rs.labels) js["labels"] = *rs.labels;
    if (rs.total) js["total"] = *rs.total;
    sessions.push_back(js);
  }
  json manifest{{"format", kManifestFormat}, {"sessions", sessions}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw DataError("cannot write manifest");
}

}  // namespace questmf
