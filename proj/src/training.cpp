#include "questmf/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "questmf/optimizer.hpp"
#include "questmf/random.hpp"

namespace questmf {

namespace {

using nlohmann::json;

double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

double label_target(const Session& s, int question) {
  if (question >= 0) {
    if (!s.labels) throw DataError("session " + s.id + " lacks item labels");
    return static_cast<double>((*s.labels)[static_cast<std::size_t>(question)]);
  }
  if (!s.total) throw DataError("session " + s.id + " lacks a total score");
  return static_cast<double>(*s.total);
}

int score_class(const Tensor& out, std::size_t row) {
  int best = 0;
  for (int c = 1; c < kNumClasses; ++c)
    if (out.at(row, static_cast<std::size_t>(c)) > out.at(row, static_cast<std::size_t>(best)))
      best = c;
  return best;
}

const char* pooling_name(WeightPooling p) {
  return p == WeightPooling::per_question ? "per_question" : "pooled";
}

std::optional<WeightPooling> pooling_from(std::string_view s) {
  if (s == "per_question") return WeightPooling::per_question;
  if (s == "pooled") return WeightPooling::pooled;
  return std::nullopt;
}

json config_to_json(const TrainConfig& cfg) {
  json mods = json::array();
  for (Modality m : cfg.modalities) mods.push_back(name(m));
  return json{{"framework", name(cfg.framework)},
              {"loss", name(cfg.loss)},
              {"alpha", cfg.alpha},
              {"beta", cfg.beta},
              {"pooling", pooling_name(cfg.pooling)},
              {"modalities", mods},
              {"lr", cfg.lr},
              {"batch_size", cfg.batch_size},
              {"epochs",
               json{{"text", cfg.epochs.text},
                    {"audio", cfg.epochs.audio},
                    {"video", cfg.epochs.video},
                    {"fusion", cfg.epochs.fusion}}},
              {"d_lstm", cfg.d_lstm},
              {"heads", cfg.heads},
              {"max_turns", cfg.max_turns},
              {"head_hidden", cfg.head_hidden},
              {"seed", cfg.seed}};
}

NetSpec spec_from_cfg(const TrainConfig& cfg, const std::map<Modality, std::size_t>& widths,
                      std::span<const Modality> mods) {
  NetSpec s;
  s.framework = cfg.framework;
  s.loss = cfg.loss;
  s.modalities.assign(mods.begin(), mods.end());
  std::sort(s.modalities.begin(), s.modalities.end());
  for (Modality m : s.modalities) {
    auto it = widths.find(m);
    if (it == widths.end()) throw DataError(std::string("dataset lacks modality ") + name(m));
    s.in_widths[m] = it->second;
  }
  s.d_lstm = cfg.d_lstm;
  s.heads = cfg.heads;
  s.max_turns = cfg.max_turns;
  s.head_hidden = cfg.head_hidden;
  validate(s);
  return s;
}

std::string qtag(int question) {
  return question < 0 ? std::string("all") : "q" + std::to_string(question);
}

std::string modalities_csv(std::span<const Modality> mods) {
  std::string out;
  for (Modality m : mods) {
    if (!out.empty()) out += ',';
    out += name(m);
  }
  return out;
}

// Decision-rule predictions only; usable on splits without labels.
std::vector<double> net_scores(QuestionNet& net, std::span<const Session* const> sessions,
                               const TrainConfig& cfg, int question,
                               const FrozenTextCache* cache) {
  const bool ordinal = net.spec().head_out() == kNumClasses;
  const double hi = question >= 0 ? 3.0 : 24.0;
  std::vector<double> scores;
  for (std::size_t start = 0; start < sessions.size(); start += cfg.batch_size) {
    const std::size_t bsz = std::min(cfg.batch_size, sessions.size() - start);
    std::vector<const Session*> chunk(sessions.begin() + static_cast<std::ptrdiff_t>(start),
                                      sessions.begin() + static_cast<std::ptrdiff_t>(start + bsz));
    PaddedBatch batch = build_padded_batch(chunk, net.spec().modalities, cfg.max_turns);
    Tape tape;
    Lifter lift(tape, net.params());
    const Tensor& out = net.forward(lift, batch, Mode::eval, nullptr, cache).tensor();
    for (std::size_t i = 0; i < bsz; ++i)
      scores.push_back(ordinal ? static_cast<double>(score_class(out, i))
                               : clampd(out.at(i, 0), 0.0, hi));
  }
  return scores;
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + path.string());
}

MetricTriple triple(std::span<const double> pred, std::span<const double> target) {
  return MetricTriple{ccc(pred, target), rmse(pred, target), mae(pred, target)};
}

}  // namespace

const char* name(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
    case LossKind::oll: return "oll";
    default: return "imboll";
  }
}

std::optional<LossKind> loss_from(std::string_view s) {
  if (s == "mse") return LossKind::mse;
  if (s == "oll") return LossKind::oll;
  if (s == "imboll") return LossKind::imboll;
  return std::nullopt;
}

void validate(const TrainConfig& cfg) {
  if (cfg.modalities.empty()) throw ConfigError("at least one modality is required");
  for (std::size_t i = 1; i < cfg.modalities.size(); ++i)
    if (!(cfg.modalities[i - 1] < cfg.modalities[i]))
      throw ConfigError("modalities must be unique and in canonical order");
  if (cfg.framework == Framework::total && cfg.loss != LossKind::mse)
    throw ConfigError("the total framework supports only the mse loss");
  LossConfig lc;
  lc.kind = cfg.loss;
  lc.alpha = cfg.alpha;
  lc.beta = cfg.beta;
  lc.pooling = cfg.pooling;
  validate(lc);
  if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (cfg.d_lstm == 0 || cfg.heads == 0 || cfg.max_turns == 0 || cfg.head_hidden == 0)
    throw ConfigError("network sizes must be positive");
  if ((2 * cfg.d_lstm) % cfg.heads != 0)
    throw ConfigError("attention width must be divisible by the head count");
}

std::string to_json_string(const TrainConfig& cfg) { return config_to_json(cfg).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "framework") {
        auto f = framework_from(value.get<std::string>());
        if (!f) throw ConfigError("unknown framework: " + value.get<std::string>());
        cfg.framework = *f;
      } else if (key == "loss") {
        auto l = loss_from(value.get<std::string>());
        if (!l) throw ConfigError("unknown loss: " + value.get<std::string>());
        cfg.loss = *l;
      } else if (key == "alpha") {
        cfg.alpha = value.get<double>();
      } else if (key == "beta") {
        cfg.beta = value.get<double>();
      } else if (key == "pooling") {
        auto p = pooling_from(value.get<std::string>());
        if (!p) throw ConfigError("unknown pooling: " + value.get<std::string>());
        cfg.pooling = *p;
      } else if (key == "modalities") {
        if (!value.is_array() || value.empty())
          throw ConfigError("modalities must be a non-empty array");
        std::set<Modality> seen;
        for (const json& jm : value) {
          auto m = modality_from(jm.get<std::string>());
          if (!m) throw ConfigError("unknown modality: " + jm.get<std::string>());
          if (!seen.insert(*m).second)
            throw ConfigError("duplicate modality: " + jm.get<std::string>());
        }
        cfg.modalities.assign(seen.begin(), seen.end());
      } else if (key == "lr") {
        cfg.lr = value.get<double>();
      } else if (key == "batch_size") {
        cfg.batch_size = value.get<std::size_t>();
      } else if (key == "epochs") {
        if (!value.is_object()) throw ConfigError("epochs must be an object");
        for (const auto& [ek, ev] : value.items()) {
          if (ek == "text")
            cfg.epochs.text = ev.get<std::size_t>();
          else if (ek == "audio")
            cfg.epochs.audio = ev.get<std::size_t>();
          else if (ek == "video")
            cfg.epochs.video = ev.get<std::size_t>();
          else if (ek == "fusion")
            cfg.epochs.fusion = ev.get<std::size_t>();
          else
            throw ConfigError("unknown epochs key: " + ek);
        }
      } else if (key == "d_lstm") {
        cfg.d_lstm = value.get<std::size_t>();
      } else if (key == "heads") {
        cfg.heads = value.get<std::size_t>();
      } else if (key == "max_turns") {
        cfg.max_turns = value.get<std::size_t>();
      } else if (key == "head_hidden") {
        cfg.head_hidden = value.get<std::size_t>();
      } else if (key == "seed") {
        cfg.seed = value.get<std::uint64_t>();
      } else {
        throw ConfigError("unknown config key: " + key);
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError("bad config value: " + std::string(e.what()));
  }
  validate(cfg);
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return train_config_from_json(text);
}

std::string config_hash(const TrainConfig& cfg) {
  json j = config_to_json(cfg);
  j.erase("seed");
  const std::uint64_t h = fnv1a64(j.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::size_t stage1_epochs(const TrainConfig& cfg, Modality m) {
  switch (m) {
    case Modality::text: return cfg.epochs.text;
    case Modality::audio: return cfg.epochs.audio;
    default: return cfg.epochs.video;
  }
}

std::size_t select_checkpoint(std::span<const EpochRecord> history, SelectBy criterion) {
  if (history.empty()) throw std::invalid_argument("select_checkpoint: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (criterion == SelectBy::min_val_loss) {
      if (history[i].val_loss < history[best].val_loss) best = i;
    } else {
      if (history[i].val_ccc > history[best].val_ccc) best = i;
    }
  }
  return best;
}

void write_history(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  std::ofstream out(path, std::ios::trunc);
  out << "epoch\ttrain_loss\tval_loss\tval_ccc\n";
  char buf[128];
  for (const EpochRecord& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.17g\t%.17g\t%.17g\n", r.epoch, r.train_loss,
                  r.val_loss, r.val_ccc);
    out << buf;
  }
  if (!out) throw DataError("cannot write history: " + path.string());
}

std::array<double, kNumClasses> question_weights(const Dataset& ds, const TrainConfig& cfg,
                                                 int question) {
  std::array<double, kNumClasses> uniform{1.0, 1.0, 1.0, 1.0};
  if (cfg.loss != LossKind::imboll || question < 0) return uniform;
  std::array<std::array<std::int64_t, kNumClasses>, kNumQuestions> counts{};
  for (const Session* s : ds.split_sessions(Split::train)) {
    if (!s->labels) throw DataError("session " + s->id + " lacks item labels");
    for (int q = 0; q < kNumQuestions; ++q)
      ++counts[static_cast<std::size_t>(q)]
              [static_cast<std::size_t>((*s->labels)[static_cast<std::size_t>(q)])];
  }
  try {
    return ClassWeightTable::from_counts(counts, cfg.pooling).row(question);
  } catch (const std::exception& e) {
    throw DataError(std::string("class weights: ") + e.what());
  }
}

NetEval evaluate_net(QuestionNet& net, std::span<const Session* const> sessions,
                     const TrainConfig& cfg, int question,
                     const std::array<double, kNumClasses>& weights,
                     const FrozenTextCache* text_cache) {
  if (sessions.empty()) throw DataError("cannot evaluate an empty session list");
  const bool ordinal = net.spec().head_out() == kNumClasses;
  const double beta_eff = cfg.loss == LossKind::imboll ? cfg.beta : 0.0;
  const double hi = question >= 0 ? 3.0 : 24.0;
  NetEval ev;
  std::vector<double> targets;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < sessions.size(); start += cfg.batch_size) {
    const std::size_t bsz = std::min(cfg.batch_size, sessions.size() - start);
    std::vector<const Session*> chunk(sessions.begin() + static_cast<std::ptrdiff_t>(start),
                                      sessions.begin() + static_cast<std::ptrdiff_t>(start + bsz));
    PaddedBatch batch = build_padded_batch(chunk, net.spec().modalities, cfg.max_turns);
    std::vector<int> ys;
    std::vector<double> tgts;
    for (const Session* s : chunk) {
      const double t = label_target(*s, question);
      ys.push_back(static_cast<int>(t));
      tgts.push_back(t);
    }
    Tape tape;
    Lifter lift(tape, net.params());
    Value out = net.forward(lift, batch, Mode::eval, nullptr, text_cache);
    Value loss = ordinal ? ordinal_loss_batch(tape, out, ys, weights, cfg.alpha, beta_eff)
                         : mse_loss_batch(tape, out, tgts);
    loss_sum += loss.item() * static_cast<double>(bsz);
    const Tensor& o = out.tensor();
    for (std::size_t i = 0; i < bsz; ++i) {
      ev.scores.push_back(ordinal ? static_cast<double>(score_class(o, i))
                                  : clampd(o.at(i, 0), 0.0, hi));
      targets.push_back(tgts[i]);
    }
  }
  ev.loss = loss_sum / static_cast<double>(sessions.size());
  ev.ccc = ev.scores.size() >= 2 ? ccc(ev.scores, targets) : 0.0;
  return ev;
}

TrainNetResult train_one_net(QuestionNet& net, const Dataset& ds, const TrainConfig& cfg,
                             int question, std::size_t epochs, const std::string& rng_path,
                             const std::vector<std::string>& frozen_prefixes,
                             const FrozenTextCache* text_cache) {
  validate(cfg);
  if (question >= kNumQuestions) throw ConfigError("question index out of range");
  if (question < 0 && cfg.loss != LossKind::mse)
    throw ConfigError("ordinal losses need per-question targets");
  const auto train = ds.split_sessions(Split::train);
  const auto val = ds.split_sessions(Split::val);
  if (train.empty()) throw DataError("train split is empty");
  if (val.size() < 2) throw DataError("validation split needs at least two sessions");
  for (const Session* s : train) label_target(*s, question);
  for (const Session* s : val) label_target(*s, question);

  const std::array<double, kNumClasses> weights = question_weights(ds, cfg, question);
  const bool ordinal = net.spec().head_out() == kNumClasses;
  const double beta_eff = cfg.loss == LossKind::imboll ? cfg.beta : 0.0;

  RandomSource root(cfg.seed);
  RandomSource shuffle_rng = root.split("shuffle/" + rng_path);
  RandomSource dropout_rng = root.split("dropout/" + rng_path);

  ParamSet& params = net.params();
  std::vector<Tensor*> trainable;
  for (std::size_t i = 0; i < params.count(); ++i) {
    bool frozen = false;
    for (const std::string& p : frozen_prefixes)
      if (params.name(i).rfind(p, 0) == 0) frozen = true;
    if (!frozen) trainable.push_back(&params.tensor(i));
  }
  AdamWConfig ocfg;
  ocfg.lr = cfg.lr;
  AdamW opt(ocfg, trainable);

  TrainNetResult res;
  {
    const NetEval train0 = evaluate_net(net, train, cfg, question, weights, text_cache);
    const NetEval val0 = evaluate_net(net, val, cfg, question, weights, text_cache);
    res.history.push_back({0, train0.loss, val0.loss, val0.ccc});
  }
  res.best_loss_params = params.snapshot();
  res.best_ccc_params = res.best_loss_params;
  double best_loss = res.history[0].val_loss;
  double best_ccc = res.history[0].val_ccc;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    shuffle_indices(order, shuffle_rng);
    double run_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t bsz = std::min(cfg.batch_size, order.size() - start);
      std::vector<const Session*> chunk;
      std::vector<int> ys;
      std::vector<double> tgts;
      for (std::size_t k = 0; k < bsz; ++k) {
        const Session* s = train[order[start + k]];
        chunk.push_back(s);
        const double t = label_target(*s, question);
        ys.push_back(static_cast<int>(t));
        tgts.push_back(t);
      }
      PaddedBatch batch = build_padded_batch(chunk, net.spec().modalities, cfg.max_turns);
      Tape tape;
      Lifter lift(tape, params, frozen_prefixes);
      Value out = net.forward(lift, batch, Mode::train, &dropout_rng, text_cache);
      Value loss = ordinal ? ordinal_loss_batch(tape, out, ys, weights, cfg.alpha, beta_eff)
                           : mse_loss_batch(tape, out, tgts);
      GradientMap grads = reverse_sweep(tape, loss);
      std::vector<const Tensor*> gptrs;
      gptrs.reserve(trainable.size());
      for (Tensor* p : trainable) gptrs.push_back(&grads.at_storage(p));
      opt.step(gptrs);
      run_sum += loss.item() * static_cast<double>(bsz);
    }
    const NetEval ev = evaluate_net(net, val, cfg, question, weights, text_cache);
    res.history.push_back(
        {epoch, run_sum / static_cast<double>(train.size()), ev.loss, ev.ccc});
    if (ev.loss < best_loss) {
      best_loss = ev.loss;
      res.best_loss_params = params.snapshot();
      res.best_loss_epoch = epoch;
    }
    if (ev.ccc > best_ccc) {
      best_ccc = ev.ccc;
      res.best_ccc_params = params.snapshot();
      res.best_ccc_epoch = epoch;
    }
  }
  return res;
}

MetricsReport report_from_totals(std::string_view split_name,
                                 std::span<const Session* const> sessions,
                                 std::span<const double> totals) {
  if (sessions.size() < 2) throw DataError("need at least two sessions to score a split");
  if (totals.size() != sessions.size())
    throw std::invalid_argument("one predicted total per session required");
  std::vector<double> target;
  for (const Session* s : sessions) {
    if (!s->total) throw DataError("session " + s->id + " lacks a total score");
    target.push_back(static_cast<double>(*s->total));
  }
  MetricsReport rep;
  rep.split = std::string(split_name);
  rep.n_sessions = sessions.size();
  rep.total = triple(totals, target);
  return rep;
}

MetricsReport report_from_question_scores(
    std::string_view split_name, std::span<const Session* const> sessions,
    const std::vector<std::array<double, kNumQuestions>>& question_scores) {
  if (question_scores.size() != sessions.size())
    throw std::invalid_argument("one score row per session required");
  std::vector<double> totals;
  for (const auto& row : question_scores)
    totals.push_back(std::accumulate(row.begin(), row.end(), 0.0));
  MetricsReport rep = report_from_totals(split_name, sessions, totals);
  bool all_labeled = true;
  for (const Session* s : sessions) all_labeled = all_labeled && s->labels.has_value();
  if (all_labeled) {
    std::array<MetricTriple, kNumQuestions> per{};
    for (int q = 0; q < kNumQuestions; ++q) {
      std::vector<double> pred, targ;
      for (std::size_t i = 0; i < sessions.size(); ++i) {
        pred.push_back(question_scores[i][static_cast<std::size_t>(q)]);
        targ.push_back(static_cast<double>((*sessions[i]->labels)[static_cast<std::size_t>(q)]));
      }
      per[static_cast<std::size_t>(q)] = triple(pred, targ);
    }
    rep.per_question = per;
  }
  return rep;
}

MetricsReport evaluate_split(QuestMfModel& model, std::span<const Session* const> sessions,
                             std::string_view split_name, std::size_t batch_size,
                             std::size_t max_turns) {
  validate(model);
  if (batch_size == 0) throw ConfigError("batch size must be at least 1");
  if (sessions.empty()) throw DataError("cannot evaluate an empty split");
  const std::vector<Modality>& mods = model.nets[0].spec().modalities;
  std::vector<std::array<double, kNumQuestions>> qscores;
  std::vector<double> totals;
  for (std::size_t start = 0; start < sessions.size(); start += batch_size) {
    const std::size_t bsz = std::min(batch_size, sessions.size() - start);
    std::vector<const Session*> chunk(sessions.begin() + static_cast<std::ptrdiff_t>(start),
                                      sessions.begin() + static_cast<std::ptrdiff_t>(start + bsz));
    PaddedBatch batch = build_padded_batch(chunk, mods, max_turns);
    if (model.framework == Framework::questmf) {
      for (const SessionPrediction& p : questmf_forward(model, batch)) {
        std::array<double, kNumQuestions> row{};
        for (int q = 0; q < kNumQuestions; ++q)
          row[static_cast<std::size_t>(q)] = p.questions[static_cast<std::size_t>(q)].score;
        qscores.push_back(row);
      }
    } else {
      for (double t : total_forward(model, batch)) totals.push_back(t);
    }
  }
  if (model.framework == Framework::questmf)
    return report_from_question_scores(split_name, sessions, qscores);
  return report_from_totals(split_name, sessions, totals);
}

RunResult run_single_seed(const Dataset& ds, const TrainConfig& cfg,
                          const std::filesystem::path& run_root) {
  validate(cfg);
  const std::map<Modality, std::size_t> widths = ds.widths();
  const auto train = ds.split_sessions(Split::train);
  const auto val = ds.split_sessions(Split::val);
  const auto test = ds.split_sessions(Split::test);
  if (train.empty() || val.empty() || test.empty())
    throw DataError("train, val, and test splits must all be non-empty");

  const std::string hash = config_hash(cfg);
  const std::filesystem::path dir = run_root / hash / std::to_string(cfg.seed);
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "config.json", std::ios::trunc);
    out << to_json_string(cfg) << '\n';
    if (!out) throw DataError("cannot write run config");
  }

  RandomSource root(cfg.seed);
  const bool fused = cfg.modalities.size() >= 2;
  std::vector<int> questions;
  if (cfg.framework == Framework::questmf)
    for (int q = 0; q < kNumQuestions; ++q) questions.push_back(q);
  else
    questions.push_back(-1);

  std::vector<std::array<double, kNumQuestions>> val_q(val.size());
  std::vector<std::array<double, kNumQuestions>> test_q(test.size());
  std::vector<double> val_tot(val.size(), 0.0), test_tot(test.size(), 0.0);
  json model_ckpts = json::object();

  const auto record_scores = [&](QuestionNet& net, int q, const FrozenTextCache* cache) {
    const std::vector<double> sv = net_scores(net, val, cfg, q, cache);
    const std::vector<double> st = net_scores(net, test, cfg, q, cache);
    if (q >= 0) {
      for (std::size_t i = 0; i < val.size(); ++i) val_q[i][static_cast<std::size_t>(q)] = sv[i];
      for (std::size_t i = 0; i < test.size(); ++i)
        test_q[i][static_cast<std::size_t>(q)] = st[i];
    } else {
      val_tot = sv;
      test_tot = st;
    }
  };

  CheckpointMeta base_meta;
  base_meta.framework = name(cfg.framework);
  base_meta.loss = name(cfg.loss);
  base_meta.seed = cfg.seed;
  base_meta.config_hash = hash;

  const auto save_selected = [&](QuestionNet& net, const TrainNetResult& res,
                                 const std::filesystem::path& ndir, CheckpointMeta meta,
                                 std::size_t epoch_idx, const std::vector<Tensor>& snap,
                                 const char* fname) {
    meta.epoch = res.history[epoch_idx].epoch;
    meta.val_loss = res.history[epoch_idx].val_loss;
    meta.val_ccc = res.history[epoch_idx].val_ccc;
    net.params().restore(snap);
    save_checkpoint(ndir / fname, meta, net.params());
  };

  // Stage 1: one encoder per modality (and per question under questmf).
  for (Modality m : cfg.modalities) {
    const std::array<Modality, 1> mm{m};
    for (int q : questions) {
      const std::string rng_path = "stage1/" + std::string(name(m)) + "/" + qtag(q);
      const std::filesystem::path ndir = dir / "stage1" / name(m) / qtag(q);
      std::filesystem::create_directories(ndir);
      RandomSource init_rng = root.split("init/" + rng_path);
      QuestionNet net(spec_from_cfg(cfg, widths, mm), init_rng);
      TrainNetResult res =
          train_one_net(net, ds, cfg, q, stage1_epochs(cfg, m), rng_path);
      write_history(ndir / "history.tsv", res.history);
      CheckpointMeta meta = base_meta;
      meta.stage = "stage1";
      meta.modalities = name(m);
      meta.question = q;
      save_selected(net, res, ndir, meta, res.best_loss_epoch, res.best_loss_params,
                    "min_val_loss.qmc");
      save_selected(net, res, ndir, meta, res.best_ccc_epoch, res.best_ccc_params,
                    "best_val_ccc.qmc");
      if (!fused) {
        // Single-modality run: the best-CCC checkpoint is the final model.
        record_scores(net, q, nullptr);
        model_ckpts[qtag(q)] =
            "stage1/" + std::string(name(m)) + "/" + qtag(q) + "/best_val_ccc.qmc";
      }
    }
  }

  // Stage 2: fused model per question, branches seeded from the stage-1
  // lowest-validation-loss checkpoints, text branch frozen when present.
  if (fused) {
    const bool has_text = std::find(cfg.modalities.begin(), cfg.modalities.end(),
                                    Modality::text) != cfg.modalities.end();
    for (int q : questions) {
      const std::string rng_path = "stage2/fusion/" + qtag(q);
      const std::filesystem::path ndir = dir / "stage2" / "fusion" / qtag(q);
      std::filesystem::create_directories(ndir);
      RandomSource init_rng = root.split("init/" + rng_path);
      QuestionNet net(spec_from_cfg(cfg, widths, cfg.modalities), init_rng);
      for (Modality m : cfg.modalities) {
        const Checkpoint ck =
            load_checkpoint(dir / "stage1" / name(m) / qtag(q) / "min_val_loss.qmc");
        overlay_params(net.params(), ck, std::string("enc/") + name(m) + "/");
      }
      std::vector<std::string> frozen;
      FrozenTextCache cache;
      const FrozenTextCache* cache_ptr = nullptr;
      if (has_text) {
        frozen = {"enc/text/"};
        cache = precompute_text_encodings(net, ds, cfg.max_turns);
        cache_ptr = &cache;
      }
      TrainNetResult res =
          train_one_net(net, ds, cfg, q, cfg.epochs.fusion, rng_path, frozen, cache_ptr);
      write_history(ndir / "history.tsv", res.history);
      CheckpointMeta meta = base_meta;
      meta.stage = "stage2";
      meta.modalities = modalities_csv(cfg.modalities);
      meta.question = q;
      save_selected(net, res, ndir, meta, res.best_ccc_epoch, res.best_ccc_params,
                    "best_val_ccc.qmc");
      record_scores(net, q, cache_ptr);
      model_ckpts[qtag(q)] = "stage2/fusion/" + qtag(q) + "/best_val_ccc.qmc";
    }
  }

  RunResult rr;
  rr.run_dir = dir;
  if (cfg.framework == Framework::questmf) {
    rr.val = report_from_question_scores("val", val, val_q);
    rr.test = report_from_question_scores("test", test, test_q);
  } else {
    rr.val = report_from_totals("val", val, val_tot);
    rr.test = report_from_totals("test", test, test_tot);
  }

  json jwidths = json::object();
  for (Modality m : cfg.modalities) jwidths[name(m)] = widths.at(m);
  write_json_file(dir / "model.json", json{{"config", json::parse(to_json_string(cfg))},
                                           {"widths", jwidths},
                                           {"checkpoints", model_ckpts}});
  write_json_file(dir / "report.json", json{{"seed", cfg.seed},
                                            {"val", json::parse(to_json(rr.val))},
                                            {"test", json::parse(to_json(rr.test))}});
  return rr;
}

AggregateReport run_multi_seed(const Dataset& ds, const TrainConfig& cfg,
                               std::span<const std::uint64_t> seeds,
                               const std::filesystem::path& run_root) {
  if (seeds.empty()) throw ConfigError("need at least one seed");
  std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) throw ConfigError("duplicate seeds");
  std::vector<MetricsReport> reports;
  for (std::uint64_t s : seeds) {
    TrainConfig c = cfg;
    c.seed = s;
    reports.push_back(run_single_seed(ds, c, run_root).test);
  }
  const AggregateReport agg = aggregate_seeds(reports, seeds);
  const std::filesystem::path adir = run_root / config_hash(cfg);
  write_json_file(adir / "aggregate.json", json::parse(to_json(agg)));
  {
    std::ofstream out(adir / "aggregate.txt", std::ios::trunc);
    out << format_table(agg);
    if (!out) throw DataError("cannot write aggregate table");
  }
  return agg;
}

LoadedModel load_final_model(const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "model.json");
  if (!in) throw DataError("cannot open model manifest: " + (run_dir / "model.json").string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw DataError("bad model manifest: " + std::string(e.what()));
  }
  LoadedModel lm;
  lm.cfg = train_config_from_json(j.at("config").dump());
  std::map<Modality, std::size_t> widths;
  for (const auto& [key, value] : j.at("widths").items()) {
    auto m = modality_from(key);
    if (!m) throw DataError("unknown modality in model manifest: " + key);
    widths[*m] = value.get<std::size_t>();
  }
  lm.model.framework = lm.cfg.framework;
  lm.model.loss = lm.cfg.loss;
  std::vector<int> questions;
  if (lm.cfg.framework == Framework::questmf)
    for (int q = 0; q < kNumQuestions; ++q) questions.push_back(q);
  else
    questions.push_back(-1);
  for (int q : questions) {
    const std::string tag = qtag(q);
    if (!j.at("checkpoints").contains(tag))
      throw DataError("model manifest lacks checkpoint for " + tag);
    RandomSource dummy(0);
    QuestionNet net(spec_from_cfg(lm.cfg, widths, lm.cfg.modalities), dummy);
    const Checkpoint ck =
        load_checkpoint(run_dir / j.at("checkpoints").at(tag).get<std::string>());
    restore_params(net.params(), ck);
    lm.model.nets.push_back(std::move(net));
  }
  validate(lm.model);
  return lm;
}

}  // namespace questmf
