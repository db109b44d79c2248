// Command-line front end: dataset generation, training, evaluation,
// single-image inference and graph inspection.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "edapseg/evaluation.hpp"
#include "edapseg/synthetic_benchmark.hpp"
#include "edapseg/training_engine.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace edapseg;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--config", c.config, "Configuration file");
  auto* o = cmd->add_option("--out", c.out, "Output location");
  if (out_required) o->required();
}

std::string file_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu.png", i);
  return buf;
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  Common common;
  int height = 64;
  int width = 128;
  int source_count = 400;
  int target_count = 400;
  int eval_count = 50;
};

int run_gen_data(const GenArgs& a) {
  bench::DomainSpec src = bench::source_spec(), tgt = bench::target_spec();
  if (!a.common.config.empty()) {
    std::ifstream in(a.common.config);
    if (!in) throw std::invalid_argument("cannot read spec " + a.common.config);
    const auto j = nlohmann::json::parse(in);
    if (j.contains("source")) src = bench::spec_from_json(j.at("source"));
    if (j.contains("target")) tgt = bench::spec_from_json(j.at("target"));
  }
  const std::uint64_t seed = a.common.seed.value_or(0);
  const fs::path root = a.common.out;
  struct Split {
    const char* name;
    const bench::DomainSpec* spec;
    int count;
    std::uint64_t stream;
  };
  for (const Split& s : {Split{"source_train", &src, a.source_count, 100},
                         Split{"target_train", &tgt, a.target_count, 200},
                         Split{"target_eval", &tgt, a.eval_count, 300}}) {
    auto ds = bench::make_split(*s.spec, s.count, derive_seed(seed, s.stream), a.height, a.width);
    bench::write_dataset(root, s.name, ds);
    std::cout << "wrote " << s.count << " images to " << (root / s.name).string() << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  std::string data;
  std::string resume;
  int checkpoint_every = 0;
  std::optional<int> steps;
};

train::TrainConfig resolve_config(const Common& c) {
  train::TrainConfig cfg = c.config.empty() ? train::TrainConfig{} : train::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

int run_train(const TrainArgs& a) {
  train::TrainConfig cfg = resolve_config(a.common);
  if (a.steps) {
    cfg.total_steps = *a.steps;
    cfg.validate();
  }
  const fs::path out = a.common.out;
  fs::create_directories(out);
  auto src = bench::load_dataset(a.data, "source_train");
  auto tgt = bench::load_dataset(a.data, "target_train", src.meta.num_base);
  {
    std::ofstream cf(out / "config.cfg");
    cf << train::to_text(cfg);
  }
  train::Trainer trainer(cfg, src, tgt);
  if (!a.resume.empty()) trainer.load(a.resume);
  trainer.run(out / "metrics.csv", [&](const train::StepMetrics& m) {
    if (m.skipped) std::cerr << "step " << m.step << ": non-finite loss, step skipped\n";
    if (m.step % 100 == 0 || m.step == cfg.total_steps)
      std::cout << "step " << m.step << " lr " << m.lr << " seg " << m.seg << " mixup " << m.mixup
                << " graph " << m.graph << " total " << m.total << std::endl;
    if (a.checkpoint_every > 0 && m.step % a.checkpoint_every == 0 && !m.skipped)
      trainer.save(out / ("checkpoint_" + std::to_string(m.step) + ".bin"));
  });
  trainer.save(out / "checkpoint.bin");
  std::cout << "saved " << (out / "checkpoint.bin").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::string data;
  std::string split = "target_eval";
  std::string predictions;
};

int run_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() == a.predictions.empty())
    throw CLI::ValidationError("eval", "exactly one of --checkpoint or --predictions is required");
  eval::MetricsReport report;
  if (!a.predictions.empty()) {
    auto ds = bench::load_dataset(a.data, a.split);
    std::vector<bench::LabelMap> preds;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto p = bench::read_png_gray(fs::path(a.predictions) / file_name(i), ds.meta.num_base);
      bench::validate_label_ids(p, (fs::path(a.predictions) / file_name(i)).string());
      preds.push_back(std::move(p));
    }
    report = eval::evaluate_predictions(preds, ds);
  } else {
    auto [state, info] = train::load_checkpoint(a.checkpoint);
    if (!a.common.config.empty()) {
      auto cfg = train::load_config(a.common.config);
      if (train::config_hash(cfg) != info.config_hash)
        throw std::invalid_argument("config " + a.common.config + " (hash " +
                                    train::config_hash(cfg) + ") does not match checkpoint (hash " +
                                    info.config_hash + ")");
    }
    auto ds = bench::load_dataset(a.data, a.split, info.num_base);
    report = eval::evaluate(state.student, ds, info.step, info.config_hash);
  }
  eval::write_report(report, a.common.out);
  std::cout << std::fixed << std::setprecision(2) << "common " << report.common << " private "
            << report.private_iou << " h_score " << report.h_score << "\n";
  return 0;
}

// ---------------------------------------------------------------- infer

struct InferArgs {
  Common common;
  std::string checkpoint;
  std::string image;
};

int run_infer(const InferArgs& a) {
  auto [state, info] = train::load_checkpoint(a.checkpoint);
  auto img = bench::read_png_rgb(a.image);
  if (img.height % 16 || img.width % 16)
    throw std::invalid_argument(a.image + ": size " + std::to_string(img.height) + "x" +
                                std::to_string(img.width) + " not divisible by 16");
  auto pred = eval::predict(state.student, img);
  const fs::path out = a.common.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  bench::write_png_gray(out, pred);
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- inspect-graph

struct InspectArgs {
  Common common;
  std::string checkpoint;
  std::string data;
};

std::string describe(const gma::NodeInfo& n, const std::vector<std::string>& names) {
  return names.at(n.class_id) + "," + bench::to_string(n.domain) + "," + gma::to_string(n.kind);
}

void dump_matrix(const fs::path& path, const ad::Var& m, const std::vector<gma::NodeInfo>& rows,
                 const std::vector<gma::NodeInfo>& cols, const std::vector<std::string>& names) {
  std::ofstream out(path);
  out << "row_class,row_domain,row_kind";
  for (std::size_t j = 0; j < cols.size(); ++j)
    out << "," << j << ":" << names.at(cols[j].class_id) << ":" << bench::to_string(cols[j].domain)
        << ":" << gma::to_string(cols[j].kind);
  out << "\n" << std::setprecision(17);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << describe(rows[i], names);
    for (std::size_t j = 0; j < cols.size(); ++j) out << "," << m.value()[i * cols.size() + j];
    out << "\n";
  }
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

int run_inspect(const InspectArgs& a) {
  const auto info = train::read_checkpoint_info(a.checkpoint);
  if (!a.common.config.empty() && train::config_hash(train::load_config(a.common.config)) != info.config_hash)
    throw std::invalid_argument("config " + a.common.config + " does not match checkpoint");
  auto src = bench::load_dataset(a.data, "source_train", info.num_base);
  auto tgt = bench::load_dataset(a.data, "target_train", info.num_base);
  train::Trainer trainer(info.config, src, tgt);
  trainer.load(a.checkpoint);
  trainer.state().rng = Rng(derive_seed(a.common.seed.value_or(0), 7));
  auto [s, t] = trainer.next_batches();
  auto g = train::graph_snapshot(trainer.state(), s, t, info.config);
  if (!g.valid) throw std::invalid_argument("batch produced no nodes in one domain; try another --seed");
  const fs::path out = a.common.out;
  fs::create_directories(out);
  const auto& names = info.class_names;
  dump_matrix(out / "A.csv", g.a, g.info_s, g.info_t, names);
  dump_matrix(out / "M.csv", g.m, g.info_s, g.info_t, names);
  dump_matrix(out / "xi_s.csv", g.xi_s, g.info_s, g.info_s, names);
  dump_matrix(out / "xi_t.csv", g.xi_t, g.info_t, g.info_t, names);
  std::cout << "source nodes " << g.info_s.size() << ", target nodes " << g.info_t.size()
            << ", graph loss " << g.loss.total.item() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-set domain adaptive segmentation toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate the synthetic source/target benchmark");
  add_common(c_gen, gen.common);
  c_gen->add_option("--height", gen.height, "Image height")->check(CLI::PositiveNumber);
  c_gen->add_option("--width", gen.width, "Image width")->check(CLI::PositiveNumber);
  c_gen->add_option("--source-count", gen.source_count, "Source training images")->check(CLI::PositiveNumber);
  c_gen->add_option("--target-count", gen.target_count, "Target training images")->check(CLI::PositiveNumber);
  c_gen->add_option("--eval-count", gen.eval_count, "Target evaluation images")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train from a dataset directory");
  add_common(c_train, tr.common);
  c_train->add_option("--data", tr.data, "Dataset root")->required();
  c_train->add_option("--resume", tr.resume, "Checkpoint to continue from");
  c_train->add_option("--checkpoint-every", tr.checkpoint_every, "Save every N steps");
  c_train->add_option("--steps", tr.steps, "Override total_steps");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Score a checkpoint or saved predictions");
  add_common(c_eval, ev.common);
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  c_eval->add_option("--data", ev.data, "Dataset root")->required();
  c_eval->add_option("--split", ev.split, "Split to evaluate");
  c_eval->add_option("--predictions", ev.predictions, "Directory of predicted label PNGs");

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Predict a label map for one image");
  add_common(c_infer, inf.common);
  c_infer->add_option("--checkpoint", inf.checkpoint, "Checkpoint file")->required();
  c_infer->add_option("--image", inf.image, "Input PNG")->required();

  InspectArgs ins;
  auto* c_inspect = app.add_subcommand("inspect-graph", "Dump graph matrices for one batch");
  add_common(c_inspect, ins.common);
  c_inspect->add_option("--checkpoint", ins.checkpoint, "Checkpoint file")->required();
  c_inspect->add_option("--data", ins.data, "Dataset root")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*c_gen) return run_gen_data(gen);
    if (*c_train) return run_train(tr);
    if (*c_eval) return run_eval(ev);
    if (*c_infer) return run_infer(inf);
    if (*c_inspect) return run_inspect(ins);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
