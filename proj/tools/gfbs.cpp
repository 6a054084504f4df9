// gfbs: train, score, prune, finetune and report from the command line.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gfbs/errors.hpp"
#include "gfbs/oracle.hpp"
#include "gfbs/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace gfbs;

namespace {

struct Common {
  std::string out;
  std::uint64_t seed = 0;
};

fs::path prepare_out(std::string& out) {
  if (out.empty()) out = "runs/" + utc_timestamp();
  fs::create_directories(out);
  return fs::path(out);
}

RunManifest start_manifest(const std::string& command, int argc, char** argv, const std::string& out) {
  RunManifest m;
  m.command = command;
  m.argv.assign(argv, argv + argc);
  m.out_dir = out;
  m.started = utc_timestamp();
  return m;
}

void finish_manifest(RunManifest& m, const fs::path& dir) {
  m.finished = utc_timestamp();
  write_manifest(m, dir / "manifest.json");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

TrainConfig training_config(const std::string& path, const Dataset& data, bool finetuning) {
  if (!path.empty()) return TrainConfig::load(path);
  if (data.is_denoising()) {
    return finetuning ? TrainConfig::denoising_finetune() : TrainConfig::denoising_baseline();
  }
  return finetuning ? TrainConfig::classification_finetune() : TrainConfig::classification_baseline();
}

void print_eval(const EvalResult& r, LossKind kind) {
  if (kind == LossKind::cross_entropy) {
    std::printf("loss %.6f  accuracy %.4f\n", r.loss, r.metric);
  } else {
    std::printf("loss %.6g  psnr %.3f dB\n", r.loss, r.metric);
  }
}

std::string eval_json(const EvalResult& r, LossKind kind) {
  nlohmann::ordered_json j;
  j["loss"] = r.loss;
  j["metric"] = r.metric;
  j["metric_name"] = kind == LossKind::cross_entropy ? "accuracy" : "psnr_db";
  return j.dump(2) + "\n";
}

std::vector<SaliencyRecord> read_saliency(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  return read_saliency_csv(f);
}

// Fraction of the bottom `fraction` of groups (by oracle |dL|) that the
// saliency ranking also places in its bottom `fraction`.
std::size_t bottom_overlap(const std::vector<double>& a, const std::vector<double>& b, double fraction) {
  const auto k = static_cast<std::size_t>(fraction * static_cast<double>(a.size()));
  auto bottom = [&](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
  };
  const auto ba = bottom(a), bb = bottom(b);
  std::vector<std::size_t> common;
  std::set_intersection(ba.begin(), ba.end(), bb.begin(), bb.end(), std::back_inserter(common));
  return common.size();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel saliency scoring and structured pruning"};
  app.require_subcommand(1);
  std::string spec_path, data_desc, config_path, ckpt_path, saliency_path, dir, dtype_name = "f32";
  std::string criterion_name = "gfbs";
  Common common;
  PruneConfig prune;
  double flops_target = 0.0;
  bool verbose = false;
  int sweep_epochs = -1;
  std::vector<double> lambdas = kDefaultLambdas;

  auto add_out = [&](CLI::App* sub) {
    sub->add_option("--out", common.out, "Output directory (default runs/<timestamp>)");
  };

  auto* train_cmd = app.add_subcommand("train", "Train a network from scratch");
  train_cmd->add_option("--spec", spec_path, "Network description")->required();
  train_cmd->add_option("--data", data_desc, "Dataset preset or JSON descriptor")->required();
  train_cmd->add_option("--config", config_path, "Training config JSON");
  train_cmd->add_option("--seed", common.seed, "Weight initialisation seed");
  train_cmd->add_option("--dtype", dtype_name, "f32 or f64");
  train_cmd->add_flag("--verbose", verbose);
  add_out(train_cmd);

  auto* sal_cmd = app.add_subcommand("saliency", "Score every BN channel");
  sal_cmd->add_option("--ckpt", ckpt_path)->required();
  sal_cmd->add_option("--data", data_desc)->required();
  sal_cmd->add_option("--lambda", prune.lambda);
  sal_cmd->add_option("--batch-size", prune.batch_size);
  sal_cmd->add_option("--criterion", criterion_name, "gfbs, gamma_only, beta_only or l1_filter");
  sal_cmd->add_option("--seed", prune.seed, "Minibatch sampling seed");
  sal_cmd->add_option("--num-batches", prune.num_batches);
  add_out(sal_cmd);

  auto* oracle_cmd = app.add_subcommand("oracle", "Brute-force loss change per coupling group");
  oracle_cmd->add_option("--ckpt", ckpt_path)->required();
  oracle_cmd->add_option("--data", data_desc)->required();
  oracle_cmd->add_option("--saliency", saliency_path, "Saliency CSV to correlate against");
  oracle_cmd->add_option("--batch-size", prune.batch_size);
  oracle_cmd->add_option("--seed", prune.seed);
  add_out(oracle_cmd);

  auto* prune_cmd = app.add_subcommand("prune", "Plan and apply channel removal");
  prune_cmd->add_option("--ckpt", ckpt_path)->required();
  prune_cmd->add_option("--saliency", saliency_path)->required();
  prune_cmd->add_option("--tau", prune.tau, "Fraction of channels to remove");
  prune_cmd->add_option("--min-keep", prune.min_keep);
  prune_cmd->add_option("--flops-target", flops_target, "Bisect tau to cut this fraction of FLOPs");
  add_out(prune_cmd);

  auto* ft_cmd = app.add_subcommand("finetune", "Continue training a (pruned) checkpoint");
  ft_cmd->add_option("--ckpt", ckpt_path)->required();
  ft_cmd->add_option("--data", data_desc)->required();
  ft_cmd->add_option("--config", config_path);
  ft_cmd->add_flag("--verbose", verbose);
  add_out(ft_cmd);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval_cmd->add_option("--ckpt", ckpt_path)->required();
  eval_cmd->add_option("--data", data_desc)->required();
  add_out(eval_cmd);

  auto* report_cmd = app.add_subcommand("report", "Lambda sweep and Markdown summary");
  report_cmd->add_option("--dir", dir, "Run directory from `train`")->required();
  report_cmd->add_option("--ckpt", ckpt_path, "Defaults to <dir>/model.ckpt");
  report_cmd->add_option("--data", data_desc, "Defaults to the dataset recorded in <dir>/manifest.json");
  report_cmd->add_option("--tau", prune.tau);
  report_cmd->add_option("--min-keep", prune.min_keep);
  report_cmd->add_option("--batch-size", prune.batch_size);
  report_cmd->add_option("--seed", prune.seed);
  report_cmd->add_option("--config", config_path, "Finetune config for each sweep point");
  report_cmd->add_option("--epochs", sweep_epochs, "Override the finetune epochs");
  report_cmd->add_option("--lambdas", lambdas)->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    thread_budget();
    if (*train_cmd) {
      const auto spec = NetworkSpec::load(spec_path);
      const auto data = load_dataset(data_desc);
      auto cfg = training_config(config_path, data, false);
      cfg.verbose = verbose;
      const auto out = prepare_out(common.out);
      auto m = start_manifest("train", argc, argv, common.out);
      const DType dtype = dtype_name == "f64" ? DType::f64
                          : dtype_name == "f32" ? DType::f32
                                                : throw ConfigError("dtype must be f32 or f64");
      Network net = Network::build(spec, common.seed, dtype);
      cfg.checkpoint_path = out / "best.ckpt";
      const auto history = train(net, data, cfg);
      save_checkpoint(net, out / "model.ckpt");
      std::ofstream metrics(out / "metrics.csv", std::ios::binary);
      write_metrics_csv(metrics, history);
      const auto final_eval = evaluate(net, data.test, cfg.loss);
      write_text(out / "eval.json", eval_json(final_eval, cfg.loss));
      print_eval(final_eval, cfg.loss);
      m.inputs = {{"spec", spec_path}, {"data", data_desc}, {"config", config_path}};
      m.outputs = {{"checkpoint", "model.ckpt"}, {"best", "best.ckpt"}, {"metrics", "metrics.csv"}};
      m.seeds = {{"init", common.seed}, {"train", cfg.seed}};
      finish_manifest(m, out);
    } else if (*sal_cmd) {
      prune.criterion = parse_criterion(criterion_name);
      Network net = load_checkpoint(ckpt_path);
      const auto data = load_dataset(data_desc);
      const auto out = prepare_out(common.out);
      auto m = start_manifest("saliency", argc, argv, common.out);
      const auto records = compute_saliency(net, data.train, default_loss(data), prune);
      std::ofstream csv(out / "saliency.csv", std::ios::binary);
      write_saliency_csv(csv, records);
      nlohmann::ordered_json j;
      j["criterion"] = to_string(prune.criterion);
      j["lambda"] = prune.lambda;
      j["batch_size"] = prune.batch_size;
      j["num_batches"] = prune.num_batches;
      j["seed"] = prune.seed;
      j["channels"] = records.size();
      write_text(out / "saliency.json", j.dump(2) + "\n");
      std::printf("scored %zu channels\n", records.size());
      m.inputs = {{"checkpoint", ckpt_path}, {"data", data_desc}};
      m.outputs = {{"saliency", "saliency.csv"}, {"records", "saliency.json"}};
      m.seeds = {{"minibatch", prune.seed}};
      finish_manifest(m, out);
    } else if (*oracle_cmd) {
      Network net = load_checkpoint(ckpt_path);
      const auto data = load_dataset(data_desc);
      const auto out = prepare_out(common.out);
      auto m = start_manifest("oracle", argc, argv, common.out);
      const auto batch = sample_batch(data.train, prune.batch_size, prune.seed, net.dtype());
      const auto records = oracle_delta_loss(net, batch, default_loss(data));
      std::ofstream csv(out / "oracle.csv", std::ios::binary);
      write_oracle_csv(csv, records);
      m.outputs = {{"oracle", "oracle.csv"}};
      if (!saliency_path.empty()) {
        const auto sal = read_saliency(saliency_path);
        const auto groups = build_coupling_groups(net.spec());
        std::vector<double> group_score(groups.size(), 0.0), delta;
        std::vector<int> members(groups.size(), 0);
        for (const auto& r : sal) {
          if (r.group_id < 0 || r.group_id >= static_cast<int>(groups.size())) {
            throw FormatError("saliency CSV does not match the checkpoint's coupling groups");
          }
          group_score[r.group_id] += r.score;
          ++members[r.group_id];
        }
        for (std::size_t g = 0; g < groups.size(); ++g) group_score[g] /= std::max(1, members[g]);
        for (const auto& r : records) delta.push_back(r.delta_loss);
        const double rho = spearman(group_score, delta);
        const auto overlap = bottom_overlap(group_score, delta, 0.2);
        nlohmann::ordered_json j;
        j["groups"] = groups.size();
        j["spearman"] = rho;
        j["bottom20_overlap"] = overlap;
        write_text(out / "oracle.json", j.dump(2) + "\n");
        std::printf("spearman %.4f  bottom-20%% overlap %zu\n", rho, overlap);
        m.inputs["saliency"] = saliency_path;
        m.outputs["summary"] = "oracle.json";
      }
      m.inputs["checkpoint"] = ckpt_path;
      m.inputs["data"] = data_desc;
      m.seeds = {{"minibatch", prune.seed}};
      finish_manifest(m, out);
    } else if (*prune_cmd) {
      Network net = load_checkpoint(ckpt_path);
      const auto records = read_saliency(saliency_path);
      const auto meta_path = fs::path(saliency_path).parent_path() / "saliency.json";
      if (fs::exists(meta_path)) {
        std::ifstream f(meta_path);
        const auto j = nlohmann::json::parse(f);
        prune.criterion = parse_criterion(j.value("criterion", "gfbs"));
        prune.lambda = j.value("lambda", prune.lambda);
      }
      const auto out = prepare_out(common.out);
      auto m = start_manifest("prune", argc, argv, common.out);
      const auto plan = flops_target > 0.0 ? plan_for_flops_reduction(net, records, prune, flops_target)
                                           : plan_prune(net, records, prune);
      const Network pruned = apply_prune(net, plan);
      save_plan(plan, out / "plan.json");
      save_checkpoint(pruned, out / "pruned.ckpt");
      const auto before = count_flops(net), after = count_flops(pruned);
      std::ostringstream report;
      report << "| block | FLOPs before | FLOPs after | params before | params after |\n|---|---|---|---|---|\n";
      for (std::size_t i = 0; i < before.entries.size(); ++i) {
        report << "| " << before.entries[i].name << " | " << before.entries[i].flops << " | "
               << after.entries[i].flops << " | " << before.entries[i].params << " | "
               << after.entries[i].params << " |\n";
      }
      report << "| total | " << before.total_flops << " | " << after.total_flops << " | "
             << before.total_params << " | " << after.total_params << " |\n\nFLOPs reduction: "
             << fmt("%.2f%%", 100.0 * after.reduction_vs(before)) << '\n';
      write_text(out / "flops.md", report.str());
      std::printf("removed %zu channels (ratio %.4f), FLOPs ratio %.4f%s\n", plan.removed.size(),
                  plan.achieved_ratio, plan.flops_ratio, plan.shortfall ? " [shortfall]" : "");
      m.inputs = {{"checkpoint", ckpt_path}, {"saliency", saliency_path}};
      m.outputs = {{"plan", "plan.json"}, {"checkpoint", "pruned.ckpt"}, {"flops", "flops.md"}};
      finish_manifest(m, out);
    } else if (*ft_cmd) {
      Network net = load_checkpoint(ckpt_path);
      const auto data = load_dataset(data_desc);
      auto cfg = training_config(config_path, data, true);
      cfg.verbose = verbose;
      const auto out = prepare_out(common.out);
      auto m = start_manifest("finetune", argc, argv, common.out);
      cfg.checkpoint_path = out / "best.ckpt";
      const auto history = finetune(net, data, cfg);
      save_checkpoint(net, out / "finetuned.ckpt");
      std::ofstream metrics(out / "metrics.csv", std::ios::binary);
      write_metrics_csv(metrics, history);
      const auto final_eval = evaluate(net, data.test, cfg.loss);
      write_text(out / "eval.json", eval_json(final_eval, cfg.loss));
      print_eval(final_eval, cfg.loss);
      m.inputs = {{"checkpoint", ckpt_path}, {"data", data_desc}, {"config", config_path}};
      m.outputs = {{"checkpoint", "finetuned.ckpt"}, {"best", "best.ckpt"}, {"metrics", "metrics.csv"}};
      m.seeds = {{"train", cfg.seed}};
      finish_manifest(m, out);
    } else if (*eval_cmd) {
      Network net = load_checkpoint(ckpt_path);
      const auto data = load_dataset(data_desc);
      const auto kind = default_loss(data);
      const auto r = evaluate(net, data.test, kind);
      print_eval(r, kind);
      if (!common.out.empty()) {
        const auto out = prepare_out(common.out);
        auto m = start_manifest("eval", argc, argv, common.out);
        write_text(out / "eval.json", eval_json(r, kind));
        m.inputs = {{"checkpoint", ckpt_path}, {"data", data_desc}};
        m.outputs = {{"eval", "eval.json"}};
        finish_manifest(m, out);
      }
    } else if (*report_cmd) {
      const fs::path run(dir);
      if (ckpt_path.empty()) ckpt_path = (run / "model.ckpt").string();
      if (data_desc.empty()) {
        const auto manifest = read_manifest(run / "manifest.json");
        auto it = manifest.inputs.find("data");
        if (it == manifest.inputs.end()) throw ConfigError("no --data given and none recorded in the run manifest");
        data_desc = it->second;
      }
      Network net = load_checkpoint(ckpt_path);
      const auto data = load_dataset(data_desc);
      auto ft = training_config(config_path, data, true);
      if (sweep_epochs > 0) {
        ft.epochs = sweep_epochs;
        std::erase_if(ft.lr_milestones, [&](int e) { return e >= ft.epochs; });
      }
      auto m = start_manifest("report", argc, argv, dir);
      const auto sweep = lambda_sweep(net, data, prune, lambdas, ft);
      const auto kind = default_loss(data);

      std::vector<PrunePlan> plans;
      std::vector<std::string> labels;
      for (const auto& e : sweep.entries) {
        plans.push_back(e.plan);
        labels.push_back("kept, lambda=" + fmt("%g", e.lambda));
      }
      std::ostringstream md;
      md << "# Pruning report: " << net.spec().name << "\n\n";
      md << "Checkpoint `" << ckpt_path << "`, data `" << data_desc << "`, tau " << fmt("%g", prune.tau)
         << ", min_keep " << prune.min_keep << ", finetune " << ft.epochs << " epochs.\n\n";
      md << "## Lambda sweep\n\n" << sweep_table(sweep, kind) << '\n';
      md << "## Kept channels per layer\n\n" << kept_channel_table(net, plans, labels) << '\n';
      const auto plan_path = run / "plan.json";
      if (fs::exists(plan_path)) {
        md << "## Plan in this directory\n\n"
           << kept_channel_table(net, {load_plan(plan_path)}, {"kept (plan.json)"}) << '\n';
      }
      write_text(run / "report.md", md.str());

      std::ostringstream csv;
      csv << "lambda,removed,flops_ratio,pruned_metric,finetuned_metric\n";
      for (const auto& e : sweep.entries) {
        csv << fmt("%g", e.lambda) << ',' << e.plan.removed.size() << ',' << fmt("%.9g", e.plan.flops_ratio) << ','
            << fmt("%.9g", e.pruned.metric) << ',' << fmt("%.9g", e.finetuned.metric) << '\n';
      }
      write_text(run / "lambda_sweep.csv", csv.str());
      std::cout << md.str();
      m.inputs = {{"checkpoint", ckpt_path}, {"data", data_desc}};
      m.outputs = {{"report", "report.md"}, {"sweep", "lambda_sweep.csv"}};
      m.seeds = {{"minibatch", prune.seed}, {"finetune", ft.seed}};
      m.finished = utc_timestamp();
      write_manifest(m, run / "report_manifest.json");
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitOk;
}
