#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "questmf/data.hpp"

using namespace questmf;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static std::atomic<int> counter{0};
    path = fs::temp_directory_path() /
           ("questmf_data_" + std::to_string(counter.fetch_add(1)) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this) & 0xffff));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ofstream& out, float f) {
  out.write(reinterpret_cast<const char*>(&f), 4);
}

SynthConfig tiny_synth(std::size_t train = 4, std::size_t val = 1, std::size_t test = 1) {
  SynthConfig cfg;
  cfg.train_sessions = train;
  cfg.val_sessions = val;
  cfg.test_sessions = test;
  cfg.min_turns = 2;
  cfg.max_turns = 4;
  cfg.d_text = 9;
  cfg.d_audio = 9;
  cfg.d_video = 9;
  cfg.seed = 3;
  return cfg;
}

// Mutates a written manifest and expects ingestion to reject it.
void expect_manifest_rejected(const fs::path& dir, const std::function<void(json&)>& mutate) {
  json m = json::parse(std::ifstream(dir / "manifest.json"));
  mutate(m);
  const fs::path bad = dir / "manifest_bad.json";
  std::ofstream(bad, std::ios::trunc) << m.dump(2);
  CHECK_THROWS_AS(parse_manifest(bad), DataError);
}

}  // namespace

TEST_CASE("feature files round trip and reject malformed input") {
  TempDir td;
  const fs::path p = td.path / "m.qmf";

  Tensor m({2, 3}, {1.5, -0.25, 3.0, 0.0, -2.0, 0.125});  // exact in float32
  write_feature_matrix(p, m);
  CHECK(bitwise_equal(read_feature_matrix(p), m));

  CHECK_THROWS_AS(write_feature_matrix(td.path / "bad.qmf", Tensor({3})),
                  std::invalid_argument);
  CHECK_THROWS_AS(read_feature_matrix(td.path / "missing.qmf"), DataError);

  {
    std::ofstream out(td.path / "magic.qmf", std::ios::binary);
    out << "QMFX";
    put_u32(out, 1);
    put_u32(out, 1);
    put_f32(out, 1.0f);
  }
  CHECK_THROWS_AS(read_feature_matrix(td.path / "magic.qmf"), DataError);

  {
    std::ofstream out(td.path / "header.qmf", std::ios::binary);
    out << "QMF1";
    put_u32(out, 2);  // cols field missing entirely
  }
  CHECK_THROWS_AS(read_feature_matrix(td.path / "header.qmf"), DataError);

  {
    std::ofstream out(td.path / "short.qmf", std::ios::binary);
    out << "QMF1";
    put_u32(out, 2);
    put_u32(out, 2);
    put_f32(out, 1.0f);
    put_f32(out, 2.0f);
    put_f32(out, 3.0f);  // one value short
  }
  CHECK_THROWS_AS(read_feature_matrix(td.path / "short.qmf"), DataError);

  {
    std::ofstream out(td.path / "trailing.qmf", std::ios::binary);
    out << "QMF1";
    put_u32(out, 1);
    put_u32(out, 1);
    put_f32(out, 1.0f);
    out << 'x';
  }
  CHECK_THROWS_AS(read_feature_matrix(td.path / "trailing.qmf"), DataError);

  {
    std::ofstream out(td.path / "inf.qmf", std::ios::binary);
    out << "QMF1";
    put_u32(out, 1);
    put_u32(out, 1);
    put_f32(out, std::numeric_limits<float>::infinity());
  }
  CHECK_THROWS_AS(read_feature_matrix(td.path / "inf.qmf"), DataError);

  {
    std::ofstream out(td.path / "zerocols.qmf", std::ios::binary);
    out << "QMF1";
    put_u32(out, 1);
    put_u32(out, 0);
  }
  CHECK_THROWS_AS(read_feature_matrix(td.path / "zerocols.qmf"), DataError);

  // Zero rows is a legal (empty) matrix as long as the width is known.
  {
    std::ofstream out(td.path / "zerorows.qmf", std::ios::binary);
    out << "QMF1";
    put_u32(out, 0);
    put_u32(out, 3);
  }
  const Tensor empty = read_feature_matrix(td.path / "zerorows.qmf");
  CHECK(empty.rows() == 0);
  CHECK(empty.cols() == 3);
}

TEST_CASE("turn windows average exactly the covered frame rows") {
  Tensor frames({5, 2}, {0, 10, 1, 20, 2, 30, 3, 40, 4, 50});

  // rate 2: window [0.5, 1.6) covers frame indices [1, 3).
  const Tensor avg = aggregate_turn_window(frames, 0.5, 1.6, 2.0, false);
  CHECK(avg.rows() == 1);
  CHECK(avg.at(0, 0) == doctest::Approx(1.5));
  CHECK(avg.at(0, 1) == doctest::Approx(25.0));

  // Far end clips to the last row.
  const Tensor clipped = aggregate_turn_window(frames, 1.5, 99.0, 1.0, false);
  CHECK(clipped.at(0, 0) == doctest::Approx((1 + 2 + 3 + 4) / 4.0));

  const Tensor unit = aggregate_turn_window(frames, 0.0, 5.0, 1.0, true);
  CHECK(std::hypot(unit.at(0, 0), unit.at(0, 1)) == doctest::Approx(1.0));
  const Tensor raw = aggregate_turn_window(frames, 0.0, 5.0, 1.0, false);
  CHECK(unit.at(0, 1) * std::hypot(raw.at(0, 0), raw.at(0, 1)) ==
        doctest::Approx(raw.at(0, 1)));

  // Window that lands between frames is empty.
  CHECK_THROWS_AS(aggregate_turn_window(frames, 0.2, 0.4, 1.0, false), DataError);
  // Start beyond the clip is empty too.
  CHECK_THROWS_AS(aggregate_turn_window(frames, 7.0, 9.0, 1.0, false), DataError);
  CHECK_THROWS_AS(aggregate_turn_window(frames, 2.0, 1.0, 1.0, false), DataError);
  CHECK_THROWS_AS(aggregate_turn_window(frames, -1.0, 1.0, 1.0, false), DataError);
  CHECK_THROWS_AS(aggregate_turn_window(frames, 0.0, 1.0, 0.0, false), std::invalid_argument);
  CHECK_THROWS_AS(aggregate_turn_window(Tensor({4}), 0.0, 1.0, 1.0, false),
                  std::invalid_argument);
  // A frameless matrix means every window is empty.
  CHECK_THROWS_AS(aggregate_turn_window(Tensor({0, 2}), 0.0, 1.0, 1.0, false), DataError);
}

TEST_CASE("modality lists parse into canonical order") {
  const auto all = parse_modalities("video,audio,text");
  REQUIRE(all.size() == 3);
  CHECK(all[0] == Modality::text);
  CHECK(all[1] == Modality::audio);
  CHECK(all[2] == Modality::video);

  const auto tv = parse_modalities("video,text");
  REQUIRE(tv.size() == 2);
  CHECK(tv[0] == Modality::text);
  CHECK(tv[1] == Modality::video);

  CHECK(parse_modalities("audio").size() == 1);
  CHECK_THROWS_AS(parse_modalities("text,text"), ConfigError);
  CHECK_THROWS_AS(parse_modalities("text,smell"), ConfigError);
  CHECK_THROWS_AS(parse_modalities(""), ConfigError);

  CHECK(std::string(name(Modality::audio)) == "audio");
  CHECK(modality_from("video") == Modality::video);
  CHECK(!modality_from("x").has_value());
  CHECK(split_from("val") == Split::val);
  CHECK(!split_from("dev").has_value());
}

TEST_CASE("manifest validation rejects structural and label errors") {
  TempDir td;
  synth_write(td.path, tiny_synth());
  REQUIRE(parse_manifest(td.path / "manifest.json").size() == 6);

  expect_manifest_rejected(td.path, [](json& m) { m["format"] = "something-else"; });
  expect_manifest_rejected(td.path, [](json& m) { m.erase("sessions"); });
  expect_manifest_rejected(td.path,
                           [](json& m) { m["sessions"].push_back(m["sessions"][0]); });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0].erase("id"); });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0]["id"] = ""; });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0]["split"] = "dev"; });
  expect_manifest_rejected(td.path,
                           [](json& m) { m["sessions"][0]["labels"] = {0, 1, 2}; });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0]["labels"][3] = 4; });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0]["labels"][3] = -1; });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0]["labels"][0] = 1.5; });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0]["total"] = 25; });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0]["total"] = -1; });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0].erase("modalities"); });
  expect_manifest_rejected(td.path,
                           [](json& m) { m["sessions"][0]["modalities"] = json::object(); });
  expect_manifest_rejected(td.path, [](json& m) {
    m["sessions"][0]["modalities"]["smell"] = {{"path", "x.qmf"}};
  });
  expect_manifest_rejected(td.path,
                           [](json& m) { m["sessions"][0]["modalities"]["text"].erase("path"); });
  expect_manifest_rejected(td.path, [](json& m) {
    m["sessions"][0]["modalities"]["text"]["layout"] = "columns";
  });
  expect_manifest_rejected(td.path, [](json& m) {
    m["sessions"][0]["modalities"]["audio"].erase("rate");  // frames layout needs one
  });
  expect_manifest_rejected(td.path, [](json& m) {
    m["sessions"][0]["modalities"]["text"]["path"] = "nothing/here.qmf";
  });
  expect_manifest_rejected(td.path, [](json& m) {
    m["sessions"][0].erase("transcript");  // audio is stored as frames
  });
  expect_manifest_rejected(td.path, [](json& m) { m["sessions"][0]["transcript"] = 7; });
  expect_manifest_rejected(td.path, [](json& m) {
    m["sessions"][0]["transcript"] = "nothing/here.tsv";
  });

  // A stated total that disagrees with the item labels is rejected.
  expect_manifest_rejected(td.path, [](json& m) {
    for (json& js : m["sessions"])
      if (js.contains("labels") && js.contains("total")) {
        int total = js["total"].get<int>();
        js["total"] = total + (total < 24 ? 1 : -1);
        return;
      }
  });

  std::ofstream(td.path / "manifest_bad.json", std::ios::trunc) << "{not json";
  CHECK_THROWS_AS(parse_manifest(td.path / "manifest_bad.json"), DataError);
}

TEST_CASE("transcripts filter to participant rows and reject bad rows") {
  TempDir td;
  synth_write(td.path, tiny_synth());
  const Dataset good = load_dataset(td.path / "manifest.json");
  const fs::path ts = td.path / good.sessions[0].id / "transcript.tsv";
  const std::size_t turns = good.sessions[0].n_turns();

  // Non-participant rows are skipped before any number parsing.
  {
    std::ofstream app(ts, std::ios::app);
    app << "junk\tnot-a-number\talso-not\tagent\tignored\n";
    app << "\n";
  }
  CHECK(load_dataset(td.path / "manifest.json").sessions[0].n_turns() == turns);

  auto rewrite = [&](const std::string& content) {
    std::ofstream(ts, std::ios::trunc) << content;
  };
  const std::string header = "turn_index\tt_start\tt_end\tspeaker\ttext\n";

  rewrite("index\tstart\tend\twho\twhat\n0\t0.0\t1.0\tparticipant\thi\n");
  CHECK_THROWS_AS(load_dataset(td.path / "manifest.json"), DataError);

  rewrite(header + "0\t0.0\tparticipant\n");
  CHECK_THROWS_AS(load_dataset(td.path / "manifest.json"), DataError);

  rewrite(header + "zero\t0.0\t1.0\tparticipant\thi\n");
  CHECK_THROWS_AS(load_dataset(td.path / "manifest.json"), DataError);

  rewrite(header + "-2\t0.0\t1.0\tparticipant\thi\n");
  CHECK_THROWS_AS(load_dataset(td.path / "manifest.json"), DataError);

  rewrite(header + "0\t1.0\t1.0\tparticipant\thi\n");  // zero-length turn
  CHECK_THROWS_AS(load_dataset(td.path / "manifest.json"), DataError);

  rewrite("");
  CHECK_THROWS_AS(load_dataset(td.path / "manifest.json"), DataError);

  // Fewer participant rows than audio turn windows expect.
  rewrite(header + "0\t0.0\t1.0\tparticipant\thi\n");
  if (turns != 1) CHECK_THROWS_AS(load_dataset(td.path / "manifest.json"), DataError);
}

TEST_CASE("widths must agree and every session needs every modality") {
  TempDir td;
  synth_write(td.path, tiny_synth());
  const auto descriptors = parse_manifest(td.path / "manifest.json");

  // Widen one session's text matrix by a column.
  const fs::path textfile = td.path / descriptors[1].modalities.at(Modality::text).path;
  const Tensor orig = read_feature_matrix(textfile);
  Tensor wide({orig.rows(), orig.cols() + 1});
  for (std::size_t i = 0; i < orig.rows(); ++i)
    for (std::size_t j = 0; j < orig.cols(); ++j) wide.at(i, j) = orig.at(i, j);
  write_feature_matrix(textfile, wide);
  CHECK_THROWS_AS(load_dataset(td.path / "manifest.json"), DataError);
  write_feature_matrix(textfile, orig);

  json m = json::parse(std::ifstream(td.path / "manifest.json"));
  m["sessions"][0]["modalities"].erase("video");
  std::ofstream(td.path / "manifest_bad.json", std::ios::trunc) << m.dump(2);
  CHECK_THROWS_AS(load_dataset(td.path / "manifest_bad.json"), DataError);
}

TEST_CASE("padded batches carry masks, truncation, and exact row copies") {
  SynthConfig cfg = tiny_synth(6, 1, 1);
  cfg.min_turns = 3;
  cfg.max_turns = 5;
  const Dataset ds = synth_generate(cfg);
  const auto train = ds.split_sessions(Split::train);
  REQUIRE(train.size() == 6);

  const std::vector<Modality> mods{Modality::text, Modality::audio};
  const std::size_t cap = 4;
  const PaddedBatch b = build_padded_batch(train, mods, cap);

  CHECK(b.size() == 6);
  CHECK(b.max_turns == cap);
  CHECK(b.features.at(Modality::text).shape()[0] == 6);
  CHECK(b.features.at(Modality::text).shape()[1] == cap);
  CHECK(b.features.at(Modality::text).shape()[2] == 9);
  CHECK(!b.features.count(Modality::video));

  for (std::size_t i = 0; i < b.size(); ++i) {
    const Session& s = *train[i];
    CHECK(b.ids[i] == s.id);
    CHECK(b.n_turns[i] == std::min(s.n_turns(), cap));
    for (std::size_t t = 0; t < cap; ++t)
      CHECK(b.mask[i][t] == (t < b.n_turns[i] ? 1 : 0));
    for (Modality m : mods) {
      const Tensor& src = s.features.at(m);
      const Tensor rows = b.session_rows(m, i);
      CHECK(rows.rows() == b.n_turns[i]);
      for (std::size_t t = 0; t < b.n_turns[i]; ++t)
        for (std::size_t j = 0; j < src.cols(); ++j) {
          CHECK(rows.at(t, j) == src.at(t, j));
          CHECK(b.features.at(m).at3(i, t, j) == src.at(t, j));
        }
      for (std::size_t t = b.n_turns[i]; t < cap; ++t)
        for (std::size_t j = 0; j < src.cols(); ++j)
          CHECK(b.features.at(m).at3(i, t, j) == 0.0);
    }
    CHECK(b.labels[i] == s.labels);
    CHECK(b.totals[i] == s.total);
  }

  CHECK_THROWS_AS(build_padded_batch({}, mods, cap), std::invalid_argument);
  CHECK_THROWS_AS(build_padded_batch(train, mods, 0), std::invalid_argument);
}

TEST_CASE("synthetic data is deterministic and round trips through files") {
  const SynthConfig cfg = tiny_synth(5, 2, 2);
  const Dataset a = synth_generate(cfg);
  const Dataset b = synth_generate(cfg);
  REQUIRE(a.sessions.size() == 9);
  REQUIRE(b.sessions.size() == 9);

  for (std::size_t i = 0; i < a.sessions.size(); ++i) {
    CHECK(a.sessions[i].id == b.sessions[i].id);
    CHECK(a.sessions[i].labels == b.sessions[i].labels);
    CHECK(a.sessions[i].total == b.sessions[i].total);
    for (const auto& [m, t] : a.sessions[i].features)
      CHECK(bitwise_equal(t, b.sessions[i].features.at(m)));
  }

  TempDir td;
  synth_write(td.path, cfg);
  const Dataset loaded = load_dataset(td.path / "manifest.json");
  REQUIRE(loaded.sessions.size() == a.sessions.size());
  for (std::size_t i = 0; i < a.sessions.size(); ++i) {
    const Session& x = a.sessions[i];
    const Session& y = loaded.sessions[i];
    CHECK(x.id == y.id);
    CHECK(x.split == y.split);
    CHECK(x.labels == y.labels);
    CHECK(x.total == y.total);
    REQUIRE(x.n_turns() == y.n_turns());
    for (const auto& [m, t] : x.features) CHECK(bitwise_equal(t, y.features.at(m)));
  }

  SynthConfig other = cfg;
  other.seed = 4;
  const Dataset c = synth_generate(other);
  bool any_diff = false;
  for (std::size_t i = 0; i < c.sessions.size() && !any_diff; ++i)
    any_diff = !bitwise_equal(c.sessions[i].features.at(Modality::text),
                              a.sessions[i].features.at(Modality::text)) ||
               c.sessions[i].labels != a.sessions[i].labels;
  CHECK(any_diff);

  const auto widths = a.widths();
  CHECK(widths.at(Modality::text) == 9);
  CHECK(a.has_modality(Modality::video));
  CHECK(a.split_sessions(Split::train).size() == 5);
  CHECK(a.split_sessions(Split::val).size() == 2);
  CHECK(a.split_sessions(Split::test).size() == 2);
}

TEST_CASE("every train class appears for every question, even in tiny corpora") {
  for (std::size_t train : {4ul, 16ul}) {
    const Dataset ds = synth_generate(tiny_synth(train, 1, 1));
    for (int q = 0; q < kNumQuestions; ++q) {
      std::set<int> seen;
      for (const Session* s : ds.split_sessions(Split::train)) seen.insert((*s->labels)[q]);
      CHECK(seen == std::set<int>{0, 1, 2, 3});
    }
  }
}

TEST_CASE("labels follow the prior; test item labels are hidden by default") {
  SynthConfig cfg = tiny_synth(1000, 1, 4);
  const Dataset ds = synth_generate(cfg);

  std::array<std::size_t, kNumClasses> counts{};
  std::size_t n = 0;
  for (const Session* s : ds.split_sessions(Split::train)) {
    REQUIRE(s->labels.has_value());
    int sum = 0;
    for (int q = 0; q < kNumQuestions; ++q) {
      counts[(*s->labels)[q]]++;
      sum += (*s->labels)[q];
      ++n;
    }
    REQUIRE(s->total.has_value());
    CHECK(*s->total == sum);
    CHECK(s->n_turns() >= cfg.min_turns);
    CHECK(s->n_turns() <= cfg.max_turns);
  }
  // 3.5 sigma plus slack for the class-coverage repair pass.
  for (int c = 0; c < kNumClasses; ++c) {
    const double p = cfg.class_prior[c];
    const double freq = static_cast<double>(counts[c]) / static_cast<double>(n);
    const double tol = 3.5 * std::sqrt(p * (1 - p) / static_cast<double>(n)) + 32.0 / n;
    CHECK(std::abs(freq - p) < tol);
  }

  for (const Session* s : ds.split_sessions(Split::test)) {
    CHECK(!s->labels.has_value());
    CHECK(s->total.has_value());
  }
  for (const Session* s : ds.split_sessions(Split::val)) CHECK(s->labels.has_value());

  cfg.test_sessions = 2;
  cfg.train_sessions = 4;
  cfg.test_item_labels = true;
  for (const Session* s : synth_generate(cfg).split_sessions(Split::test)) {
    REQUIRE(s->labels.has_value());
    int sum = 0;
    for (int q = 0; q < kNumQuestions; ++q) sum += (*s->labels)[q];
    CHECK(*s->total == sum);
  }
}

TEST_CASE("synth validation rejects bad configurations") {
  auto broken = [](const std::function<void(SynthConfig&)>& f) {
    SynthConfig cfg;
    f(cfg);
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  };
  broken([](SynthConfig& c) { c.class_prior = {0.5, 0.5, 0.25, 0.25}; });
  broken([](SynthConfig& c) { c.class_prior = {1.0, 0.0, 0.0, 0.0}; });
  broken([](SynthConfig& c) { c.train_sessions = 3; });
  broken([](SynthConfig& c) { c.val_sessions = 0; });
  broken([](SynthConfig& c) { c.test_sessions = 0; });
  broken([](SynthConfig& c) { c.min_turns = 0; });
  broken([](SynthConfig& c) { c.min_turns = 9; c.max_turns = 8; });
  broken([](SynthConfig& c) { c.d_text = 8; });
  broken([](SynthConfig& c) { c.d_audio = 5; });
  broken([](SynthConfig& c) { c.noise_scale = -0.1; });
  broken([](SynthConfig& c) { c.video_strength = 0.0; });
  CHECK_NOTHROW(validate(SynthConfig{}));
}
