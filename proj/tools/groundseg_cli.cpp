// Command-line front end: gen-data, train, eval, grad-check, inspect.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>

#include "groundseg/train.hpp"

namespace fs = std::filesystem;
using namespace groundseg;

namespace {

int gen_data(const fs::path& out, int slides, int per_slide, std::uint64_t seed) {
  const auto records = generate_dataset(slides, per_slide, seed);
  const auto splits = split_dataset(records, {8, 1, 1}, seed);
  persist_dataset(splits, out);
  int dropped = 0;
  for (const auto& r : records) dropped += r.dropped_instances;
  std::cout << "wrote " << records.size() << " patches to " << out.string() << " (train " << splits.train.size()
            << ", val " << splits.val.size() << ", test " << splits.test.size() << "; " << dropped
            << " nuclei dropped)\n";
  return 0;
}

RunConfig read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
  auto cfg = RunConfig::from_json(j);
  // Relative data paths are taken from the config file's directory.
  if (!cfg.data_dir.empty() && fs::path(cfg.data_dir).is_relative())
    cfg.data_dir = (path.parent_path() / cfg.data_dir).lexically_normal().string();
  return cfg;
}

int train_cmd(const fs::path& config_path, const fs::path& out, int log_every) {
  const auto cfg = read_config(config_path);
  TrainOptions opts;
  opts.abort_dir = out;
  opts.on_step = [&](const StepRecord& r) {
    if (log_every > 0 && (r.step % log_every == 0 || r.step + 1 == cfg.steps))
      std::cerr << "step " << r.step << " total " << r.total << " mask " << r.mask << " txt " << r.txt << " con "
                << r.con << "\n";
  };
  try {
    const auto result = train(cfg, opts);
    save_checkpoint(result.checkpoint, out);
    save_train_log(result.log, out / "train_log.jsonl");
    std::cout << "checkpoint written to " << out.string() << " after " << result.checkpoint.step << " steps\n";
  } catch (const TrainingAborted& e) {
    std::cerr << e.what() << "\nlast good checkpoint saved to " << out.string() << "\n";
    return 1;
  }
  return 0;
}

int eval_cmd(const fs::path& ckpt_dir, const std::string& split, const std::string& task, const fs::path& report,
             const std::string& data_dir) {
  auto ckpt = load_checkpoint(ckpt_dir);
  if (!data_dir.empty()) ckpt.config.data_dir = data_dir;
  const auto r = evaluate(ckpt, split, parse_task(task));
  const auto table = r.table();
  std::cout << table;
  if (!report.empty()) {
    std::ofstream(report) << r.to_json().dump(2) << "\n";
    auto txt = report;
    txt.replace_extension(".txt");
    std::ofstream(txt) << table;
  }
  return 0;
}

int grad_check_cmd(const std::string& fixture) {
  std::vector<std::string> names;
  if (fixture == "all")
    names = grad_check_fixture_names();
  else
    names.push_back(fixture);
  bool ok = true;
  for (const auto& n : names) {
    const auto r = run_grad_check_fixture(n);
    const double tol = grad_check_tolerance(n);
    const bool pass = r.finite && r.max_rel_error < tol;
    ok = ok && pass;
    std::cout << std::left << std::setw(12) << n << (pass ? "PASS" : "FAIL") << "  max_rel_error=" << std::scientific
              << std::setprecision(3) << r.max_rel_error << " tol=" << tol << " checked=" << r.checked
              << " worst=" << r.worst_param << "[" << r.worst_index << "]" << std::defaultfloat;
    if (!r.message.empty()) std::cout << "  " << r.message;
    std::cout << "\n";
  }
  return ok ? 0 : 1;
}

int inspect_cmd(const fs::path& ckpt_dir) {
  const auto ckpt = load_checkpoint(ckpt_dir);
  std::cout << "step " << ckpt.step << "\nvocabulary " << ckpt.vocab.size() << " tokens\n";
  std::cout << "config " << ckpt.config.to_json().dump(2) << "\n";
  std::size_t total = 0;
  for (const auto* p : ckpt.model.parameters()) {
    double sq = 0;
    for (float v : p->value.data) sq += static_cast<double>(v) * v;
    std::cout << std::left << std::setw(24) << p->name << std::setw(16) << shape_string(p->value.shape)
              << " rms=" << std::sqrt(sq / static_cast<double>(std::max<std::size_t>(1, p->value.size()))) << "\n";
    total += p->value.size();
  }
  std::cout << "parameters " << total << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Seg-token grounded segmentation: data generation, training and evaluation"};
  app.require_subcommand(1);

  fs::path gd_out;
  int slides = 10, per_slide = 10;
  std::uint64_t gd_seed = 0;
  auto* gd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gd->add_option("--out", gd_out, "Output directory")->required();
  gd->add_option("--slides", slides, "Number of slides")->check(CLI::PositiveNumber);
  gd->add_option("--patches-per-slide", per_slide, "Patches per slide")->check(CLI::PositiveNumber);
  gd->add_option("--seed", gd_seed, "Generator and split seed");

  fs::path tr_config, tr_out;
  int log_every = 50;
  auto* tr = app.add_subcommand("train", "Train from a JSON run config");
  tr->add_option("--config", tr_config, "Run config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();
  tr->add_option("--log-every", log_every, "Print losses every N steps (0 = quiet)");

  fs::path ev_ckpt, ev_report;
  std::string ev_split = "val", ev_task = "referring", ev_data;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on one split and task");
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", ev_split, "Dataset split")->capture_default_str()->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--task", ev_task, "Task to score")->capture_default_str()->check(CLI::IsMember({"reasoning", "referring", "conversation"}));
  ev->add_option("--report", ev_report, "JSON report path; a .txt table is written alongside");
  ev->add_option("--data", ev_data, "Dataset directory (defaults to the one in the checkpoint config)");

  std::string gc_fixture = "all";
  auto* gc = app.add_subcommand("grad-check", "Run a finite-difference gradient fixture");
  gc->add_option("--fixture", gc_fixture, "bce, dice, consistency, text, pipeline or all");

  fs::path in_ckpt;
  auto* in = app.add_subcommand("inspect", "Summarize a checkpoint");
  in->add_option("--ckpt", in_ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gd) return gen_data(gd_out, slides, per_slide, gd_seed);
    if (*tr) return train_cmd(tr_config, tr_out, log_every);
    if (*ev) return eval_cmd(ev_ckpt, ev_split, ev_task, ev_report, ev_data);
    if (*gc) return grad_check_cmd(gc_fixture);
    if (*in) return inspect_cmd(in_ckpt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
