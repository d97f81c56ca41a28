#include "questmf/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "questmf/data.hpp"
#include "questmf/errors.hpp"
#include "questmf/metrics.hpp"
#include "questmf/model.hpp"
#include "questmf/training.hpp"

namespace questmf {

namespace {

using nlohmann::json;

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t comma = csv.find(',', pos);
    const std::string item =
        comma == std::string::npos ? csv.substr(pos) : csv.substr(pos, comma - pos);
    std::size_t used = 0;
    try {
      seeds.push_back(std::stoull(item, &used));
    } catch (const std::exception&) {
      throw ConfigError("bad seed: '" + item + "'");
    }
    if (used != item.size()) throw ConfigError("bad seed: '" + item + "'");
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

MetricTriple triple_from_json(const json& j) {
  return {j.at("ccc").get<double>(), j.at("rmse").get<double>(), j.at("mae").get<double>()};
}

MetricsReport report_from_json(const json& j) {
  MetricsReport r;
  r.split = j.at("split").get<std::string>();
  r.n_sessions = j.at("n_sessions").get<std::size_t>();
  r.total = triple_from_json(j.at("total"));
  if (j.contains("per_question")) {
    const json& arr = j.at("per_question");
    if (!arr.is_array() || arr.size() != kNumQuestions)
      throw DataError("report has a malformed per_question block");
    std::array<MetricTriple, kNumQuestions> per{};
    for (std::size_t q = 0; q < kNumQuestions; ++q) per[q] = triple_from_json(arr[q]);
    r.per_question = per;
  }
  return r;
}

void run_validate(const std::filesystem::path& manifest) {
  const Dataset ds = load_dataset(manifest);
  std::cout << "ok: " << ds.sessions.size() << " sessions (train "
            << ds.split_sessions(Split::train).size() << ", val "
            << ds.split_sessions(Split::val).size() << ", test "
            << ds.split_sessions(Split::test).size() << ")\n";
  for (const auto& [m, width] : ds.widths())
    std::cout << "  " << name(m) << ": " << width << " dims\n";
}

void run_eval(const std::filesystem::path& model_dir, const std::filesystem::path& manifest,
              const std::string& split_name) {
  const auto split = split_from(split_name);
  if (!split) throw ConfigError("unknown split: " + split_name);
  LoadedModel lm = load_final_model(model_dir);
  const Dataset ds = load_dataset(manifest);
  const MetricsReport rep = evaluate_split(lm.model, ds.split_sessions(*split), split_name,
                                           lm.cfg.batch_size, lm.cfg.max_turns);
  std::cout << to_json(rep) << '\n';
}

void run_predict(const std::filesystem::path& model_dir, const std::filesystem::path& manifest,
                 const std::string& split_name) {
  LoadedModel lm = load_final_model(model_dir);
  const Dataset ds = load_dataset(manifest);
  std::vector<const Session*> sessions;
  if (split_name.empty()) {
    for (const Session& s : ds.sessions) sessions.push_back(&s);
  } else {
    const auto split = split_from(split_name);
    if (!split) throw ConfigError("unknown split: " + split_name);
    sessions = ds.split_sessions(*split);
  }
  if (sessions.empty()) throw DataError("no sessions to predict");
  const std::vector<Modality>& mods = lm.model.nets[0].spec().modalities;
  char buf[160];
  for (std::size_t start = 0; start < sessions.size(); start += lm.cfg.batch_size) {
    const std::size_t bsz = std::min(lm.cfg.batch_size, sessions.size() - start);
    std::vector<const Session*> chunk(sessions.begin() + static_cast<std::ptrdiff_t>(start),
                                      sessions.begin() + static_cast<std::ptrdiff_t>(start + bsz));
    PaddedBatch batch = build_padded_batch(chunk, mods, lm.cfg.max_turns);
    if (lm.model.framework == Framework::questmf) {
      for (const SessionPrediction& p : questmf_forward(lm.model, batch)) {
        std::cout << "session " << p.id << '\n';
        for (int q = 0; q < kNumQuestions; ++q) {
          const QuestionOutput& o = p.questions[static_cast<std::size_t>(q)];
          std::snprintf(buf, sizeof(buf),
                        "  q%d  class %d  p0 %.4f  p1 %.4f  p2 %.4f  p3 %.4f\n", q + 1,
                        o.cls, o.probs[0], o.probs[1], o.probs[2], o.probs[3]);
          std::cout << buf;
        }
        std::snprintf(buf, sizeof(buf), "  total %g\n", p.total);
        std::cout << buf;
      }
    } else {
      const std::vector<double> totals = total_forward(lm.model, batch);
      for (std::size_t i = 0; i < bsz; ++i) {
        std::snprintf(buf, sizeof(buf), "session %s\n  total %g\n", chunk[i]->id.c_str(),
                      totals[i]);
        std::cout << buf;
      }
    }
  }
}

void run_report(const std::filesystem::path& run_dir) {
  std::vector<std::pair<std::uint64_t, MetricsReport>> rows;
  if (!std::filesystem::is_directory(run_dir))
    throw DataError("not a run directory: " + run_dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(run_dir)) {
    const std::filesystem::path rp = entry.path() / "report.json";
    if (!entry.is_directory() || !std::filesystem::exists(rp)) continue;
    std::ifstream in(rp);
    json j;
    try {
      in >> j;
      rows.emplace_back(j.at("seed").get<std::uint64_t>(),
                        report_from_json(j.at("test")));
    } catch (const json::exception& e) {
      throw DataError("bad report " + rp.string() + ": " + e.what());
    }
  }
  if (rows.empty()) throw DataError("no seed reports under " + run_dir.string());
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::uint64_t> seeds;
  std::vector<MetricsReport> reports;
  for (auto& [seed, rep] : rows) {
    seeds.push_back(seed);
    reports.push_back(std::move(rep));
  }
  std::cout << format_table(aggregate_seeds(reports, seeds));
}

}  // namespace

int dispatch(std::vector<std::string> args) {
  CLI::App app{"question-wise multimodal PHQ-8 severity scoring"};
  app.require_subcommand(1);

  // synth
  SynthConfig synth_cfg;
  std::string synth_out;
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_cfg.seed, "generator seed");
  synth->add_option("--train-sessions", synth_cfg.train_sessions, "train split size");
  synth->add_option("--val-sessions", synth_cfg.val_sessions, "validation split size");
  synth->add_option("--test-sessions", synth_cfg.test_sessions, "test split size");
  synth->add_option("--noise", synth_cfg.noise_scale, "noise scale");
  synth->add_option("--min-turns", synth_cfg.min_turns, "minimum turns per session");
  synth->add_option("--max-turns", synth_cfg.max_turns, "maximum turns per session");
  synth->add_flag("--test-item-labels", synth_cfg.test_item_labels,
                  "keep per-question labels on the test split");

  // validate
  std::string val_data;
  CLI::App* validate_cmd = app.add_subcommand("validate", "check a dataset manifest");
  validate_cmd->add_option("--data", val_data, "manifest path")->required();

  // train
  std::string tr_data, tr_out, tr_config, tr_framework, tr_loss, tr_modalities, tr_seeds;
  double tr_alpha = 0.0, tr_beta = 0.0;
  std::uint64_t tr_seed = 0;
  CLI::App* train = app.add_subcommand("train", "run the staged training pipeline");
  train->add_option("--data", tr_data, "manifest path")->required();
  train->add_option("--out", tr_out, "run root directory")->required();
  train->add_option("--config", tr_config, "JSON config file");
  train->add_option("--framework", tr_framework, "questmf or total");
  CLI::Option* o_loss = train->add_option("--loss", tr_loss, "mse, oll, or imboll");
  CLI::Option* o_alpha = train->add_option("--alpha", tr_alpha, "ordinal distance exponent");
  CLI::Option* o_beta = train->add_option("--beta", tr_beta, "class weight exponent");
  CLI::Option* o_mods =
      train->add_option("--modalities", tr_modalities, "comma-separated modality list");
  CLI::Option* o_seed = train->add_option("--seed", tr_seed, "single-run seed");
  CLI::Option* o_seeds = train->add_option("--seeds", tr_seeds, "comma-separated seed list");
  CLI::Option* o_framework = train->get_option("--framework");

  // eval
  std::string ev_model, ev_data, ev_split = "test";
  CLI::App* eval_cmd = app.add_subcommand("eval", "score a trained model on a split");
  eval_cmd->add_option("--model", ev_model, "run directory with model.json")->required();
  eval_cmd->add_option("--data", ev_data, "manifest path")->required();
  eval_cmd->add_option("--split", ev_split, "train, val, or test");

  // predict
  std::string pr_model, pr_data, pr_split;
  CLI::App* predict = app.add_subcommand("predict", "emit per-question predictions");
  predict->add_option("--model", pr_model, "run directory with model.json")->required();
  predict->add_option("--data", pr_data, "manifest path")->required();
  predict->add_option("--split", pr_split, "restrict to one split");

  // report
  std::string rp_run;
  CLI::App* report = app.add_subcommand("report", "aggregate seed runs into one table");
  report->add_option("--run", rp_run, "directory holding per-seed run directories")
      ->required();

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.push_back("questmf");
  for (std::string& a : args) argv_store.push_back(std::move(a));
  std::vector<const char*> argv;
  for (const std::string& s : argv_store) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "questmf: usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (synth->parsed()) {
      synth_write(synth_out, synth_cfg);
      std::cout << "wrote " << (synth_cfg.train_sessions + synth_cfg.val_sessions +
                                synth_cfg.test_sessions)
                << " sessions to " << (std::filesystem::path(synth_out) / "manifest.json").string()
                << '\n';
    } else if (validate_cmd->parsed()) {
      run_validate(val_data);
    } else if (train->parsed()) {
      TrainConfig cfg;
      if (!tr_config.empty()) cfg = load_train_config(tr_config);
      if (o_framework->count() > 0) {
        const auto f = framework_from(tr_framework);
        if (!f) throw ConfigError("unknown framework: " + tr_framework);
        cfg.framework = *f;
      }
      if (o_loss->count() > 0) {
        const auto l = loss_from(tr_loss);
        if (!l) throw ConfigError("unknown loss: " + tr_loss);
        cfg.loss = *l;
      }
      if (o_alpha->count() > 0) cfg.alpha = tr_alpha;
      if (o_beta->count() > 0) cfg.beta = tr_beta;
      if (o_mods->count() > 0) cfg.modalities = parse_modalities(tr_modalities);
      if (o_seed->count() > 0) cfg.seed = tr_seed;
      validate(cfg);
      std::cout << to_json_string(cfg) << '\n';
      const Dataset ds = load_dataset(tr_data);
      if (o_seeds->count() > 0) {
        const std::vector<std::uint64_t> seeds = parse_seed_list(tr_seeds);
        const AggregateReport agg = run_multi_seed(ds, cfg, seeds, tr_out);
        std::cout << "run " << (std::filesystem::path(tr_out) / config_hash(cfg)).string()
                  << '\n'
                  << format_table(agg);
      } else {
        const RunResult rr = run_single_seed(ds, cfg, tr_out);
        std::cout << "run " << rr.run_dir.string() << '\n'
                  << to_json(rr.val) << '\n'
                  << to_json(rr.test) << '\n';
      }
    } else if (eval_cmd->parsed()) {
      run_eval(ev_model, ev_data, ev_split);
    } else if (predict->parsed()) {
      run_predict(pr_model, pr_data, pr_split);
    } else if (report->parsed()) {
      run_report(rp_run);
    }
  } catch (const ConfigError& e) {
    std::cerr << "questmf: config error: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "questmf: data error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "questmf: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace questmf
