// narvid: generate planted data, train, evaluate and inspect filtering.
//
// Exit codes: 0 success, 2 usage / configuration / input problems,
// 3 numeric failure (non-finite loss or parameters).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "narvid/narvid.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

// ------------------------------------------------------------------ config

narvid::TrainConfig parse_train_config(const fs::path& path) {
  narvid::TrainConfig c;
  if (path.empty()) return c;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(narvid::io::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw narvid::ConfigError("cannot parse config '" + path.string() + "': " + e.what());
  }
  if (!j.is_object()) throw narvid::ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto number = [&] {
      if (!value.is_number()) throw narvid::ConfigError("config key '" + key + "' must be a number");
      return value.get<double>();
    };
    const auto count = [&] {
      if (!value.is_number_unsigned()) throw narvid::ConfigError("config key '" + key + "' must be a non-negative integer");
      return value.get<std::uint64_t>();
    };
    if (key == "p") c.p = number();
    else if (key == "lambda") c.lambda = number();
    else if (key == "eta") c.eta = number();
    else if (key == "alpha") c.alpha = number();
    else if (key == "tau") c.tau = number();
    else if (key == "lr") c.lr = number();
    else if (key == "warmup") c.warmup = number();
    else if (key == "epochs") c.epochs = count();
    else if (key == "batch_size") c.batch_size = count();
    else if (key == "heads") c.heads = count();
    else if (key == "seed") c.seed = count();
    else if (key == "top_k") c.top_k = count();
    else if (key == "hard_loss") {
      const std::string v = value.is_string() ? value.get<std::string>() : "";
      if (v == "rank") c.hard_loss = narvid::HardLoss::rank;
      else if (v == "info_nce") c.hard_loss = narvid::HardLoss::info_nce;
      else throw narvid::ConfigError("hard_loss must be \"rank\" or \"info_nce\"");
    } else {
      throw narvid::ConfigError("unknown config key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::map<std::string, double> config_meta(const narvid::TrainConfig& c) {
  return {{"p", c.p},
          {"lambda", c.lambda},
          {"eta", c.eta},
          {"alpha", c.alpha},
          {"tau", c.tau},
          {"lr", c.lr},
          {"warmup", c.warmup},
          {"epochs", static_cast<double>(c.epochs)},
          {"batch_size", static_cast<double>(c.batch_size)},
          {"top_k", static_cast<double>(c.top_k)},
          {"hard_loss", c.hard_loss == narvid::HardLoss::rank ? 0.0 : 1.0},
          {"seed", static_cast<double>(c.seed)}};
}

ordered_json config_json(const narvid::TrainConfig& c) {
  return {{"p", c.p},
          {"lambda", c.lambda},
          {"eta", c.eta},
          {"alpha", c.alpha},
          {"tau", c.tau},
          {"lr", c.lr},
          {"warmup", c.warmup},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"heads", c.heads},
          {"top_k", c.top_k},
          {"hard_loss", c.hard_loss == narvid::HardLoss::rank ? "rank" : "info_nce"},
          {"seed", c.seed}};
}

narvid::FilterOptions filter_options(const narvid::Checkpoint& ck) {
  narvid::FilterOptions opt;
  if (auto it = ck.meta.find("p"); it != ck.meta.end()) opt.p = it->second;
  if (auto it = ck.meta.find("tau"); it != ck.meta.end()) opt.tau = it->second;
  if (auto it = ck.meta.find("top_k"); it != ck.meta.end()) opt.top_k = static_cast<std::size_t>(it->second);
  return opt;
}

ordered_json step_json(const narvid::StepResult& r) {
  return {{"step", r.step}, {"lr", r.lr},       {"loss", r.loss},
          {"l_nce", r.l_nce}, {"l_cvh", r.l_cvh}, {"hard_mean", r.hard_mean}};
}

ordered_json selection_json(const narvid::FilterSelection& s) {
  return {{"raw_sims", s.raw_sims}, {"probs", s.probs}, {"selected", s.selected}, {"weights", s.weights}};
}

void emit(const ordered_json& j, const std::string& out_path) {
  const std::string text = j.dump(2) + "\n";
  if (out_path.empty()) std::cout << text;
  else narvid::io::write_file(out_path, text);
}

// ---------------------------------------------------------------- commands

struct GenArgs {
  narvid::PlantSpec spec;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  const narvid::Dataset d = narvid::gen_planted(a.spec);
  narvid::write_container(d, a.out);
  std::cerr << "wrote " << d.size() << " episodes to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string data, config, out, log;
};

int cmd_train(const TrainArgs& a) {
  const narvid::TrainConfig config = parse_train_config(a.config);
  const narvid::Dataset data = narvid::read_container(a.data);
  if (config.batch_size > data.size())
    throw narvid::UsageError("batch_size " + std::to_string(config.batch_size) + " exceeds dataset size " +
                             std::to_string(data.size()));

  std::ofstream log_file;
  if (!a.log.empty()) {
    log_file.open(a.log, std::ios::trunc);
    if (!log_file) throw narvid::IoError("cannot open log '" + a.log + "'");
  }
  std::ostream& log = a.log.empty() ? std::cout : log_file;

  std::optional<narvid::StepResult> last;
  try {
    const narvid::ModelParams params = narvid::train(data, config, [&](const narvid::StepResult& r) {
      log << step_json(r).dump() << "\n";
      last = r;
    });
    narvid::save_checkpoint(a.out, params, config_meta(config));
  } catch (const narvid::NumericError& e) {
    const std::string dump_path = a.out + ".nan.json";
    ordered_json dump{{"error", e.what()},
                      {"data", a.data},
                      {"config", config_json(config)},
                      {"last_good_step", last ? step_json(*last) : ordered_json(nullptr)}};
    narvid::io::write_file(dump_path, dump.dump(2) + "\n");
    std::cerr << "numeric failure: " << e.what() << "\ndiagnostic dump: " << dump_path << "\n";
    return kExitNumeric;
  }
  std::cerr << "wrote checkpoint " << a.out << "\n";
  return 0;
}

struct EvalArgs {
  std::string data, ckpt, mode = "standardized", direction = "t2v", out;
  bool zero_shot = false;
};

int cmd_eval(const EvalArgs& a) {
  const narvid::FusionMode mode = narvid::parse_fusion_mode(a.mode);
  const narvid::Direction dir = narvid::parse_direction(a.direction);
  if (!a.zero_shot && a.ckpt.empty()) throw narvid::UsageError("--ckpt is required unless --zero-shot is given");
  if (!a.zero_shot && !fs::exists(a.ckpt)) throw narvid::UsageError("checkpoint '" + a.ckpt + "' does not exist");
  const narvid::Dataset data = narvid::read_container(a.data);
  if (data.size() == 0) throw narvid::UsageError("dataset is empty");

  narvid::ScoreMatrices s;
  if (a.zero_shot) {
    s = narvid::zero_shot_scores(data);
  } else {
    const narvid::Checkpoint ck = narvid::load_checkpoint(a.ckpt);
    s = narvid::score_dataset(data, ck.params, filter_options(ck));
  }
  emit(narvid::report_for(s.qv, s.qn, mode, dir).to_json(), a.out);
  return 0;
}

struct FilterArgs {
  std::string data, ckpt;
  std::size_t query = 0, candidate = 0;
  std::optional<double> p;
};

int cmd_filter(const FilterArgs& a) {
  const narvid::Dataset data = narvid::read_container(a.data);
  if (a.query >= data.size() || a.candidate >= data.size())
    throw narvid::UsageError("episode index out of range (dataset has " + std::to_string(data.size()) + ")");
  const narvid::Checkpoint ck = narvid::load_checkpoint(a.ckpt);
  narvid::FilterOptions opt = filter_options(ck);
  if (a.p) {
    opt.p = *a.p;
    opt.top_k = 0;
  }
  if (!(opt.p > 0.0 && opt.p <= 1.0)) throw narvid::ConfigError("p must lie in (0, 1]");

  narvid::NoGradGuard no_grad;
  const narvid::Episode& q = data.episodes[a.query];
  const narvid::Episode& c = data.episodes[a.candidate];
  const narvid::EnhancedFeatures f = narvid::enhance(c, ck.params);
  const narvid::QueryTensors qt = narvid::QueryTensors::from(q);
  const narvid::FilterPair fp = narvid::filter_pair(qt.eos, f.v_check, f.n_check, opt);
  const ordered_json out{{"query", q.id},
                         {"candidate", c.id},
                         {"p", opt.p},
                         {"tau", opt.tau},
                         {"video", selection_json(fp.video.selection)},
                         {"narration", selection_json(fp.narration.selection)}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NarVid text-video retrieval on precomputed embeddings"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Write a planted synthetic container");
  g->add_option("--episodes", gen.spec.episodes, "Number of episodes")->capture_default_str();
  g->add_option("--frames", gen.spec.frames, "Frames per episode (K)")->capture_default_str();
  g->add_option("--words", gen.spec.words, "Query words per episode (L)")->capture_default_str();
  g->add_option("--dim", gen.spec.dim, "Embedding width (D)")->capture_default_str();
  g->add_option("--signal", gen.spec.signal, "Signal strength s in [0, 1]")->capture_default_str();
  g->add_option("--corrupt", gen.spec.corrupt, "Corrupted caption fraction in [0, 1]")->capture_default_str();
  g->add_option("--overlap", gen.spec.overlap, "Foreign-topic frame fraction in [0, 1]")->capture_default_str();
  g->add_option("--seed", gen.spec.seed, "Generator seed")->capture_default_str();
  g->add_option("--out", gen.out, "Output container path")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train on a container and write a checkpoint");
  t->add_option("--data", tr.data, "Input container")->required();
  t->add_option("--config", tr.config, "JSON config (missing keys take defaults)");
  t->add_option("--out", tr.out, "Output checkpoint path")->required();
  t->add_option("--log", tr.log, "JSON-lines step log (default: stdout)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate retrieval and print a JSON report");
  e->add_option("--data", ev.data, "Input container")->required();
  e->add_option("--ckpt", ev.ckpt, "Checkpoint");
  e->add_option("--mode", ev.mode, "standardized | sum | qv | qn")->capture_default_str();
  e->add_option("--direction", ev.direction, "t2v | v2t")->capture_default_str();
  e->add_flag("--zero-shot", ev.zero_shot, "Training-free baseline on raw features");
  e->add_option("--out", ev.out, "Write the report here instead of stdout");

  FilterArgs fa;
  auto* f = app.add_subcommand("filter", "Dump the filtering decision for one query/candidate pair");
  f->add_option("--data", fa.data, "Input container")->required();
  f->add_option("--ckpt", fa.ckpt, "Checkpoint")->required();
  f->add_option("--query", fa.query, "Query episode index")->required();
  f->add_option("--candidate", fa.candidate, "Candidate episode index")->required();
  f->add_option("--p", fa.p, "Nucleus threshold (default: the checkpoint's)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*f) return cmd_filter(fa);
  } catch (const narvid::NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return kExitNumeric;
  } catch (const narvid::Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
