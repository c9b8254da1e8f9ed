// pat: pretrain teachers, distill students, evaluate checkpoints, render reports.

#include <CLI11.hpp>

#include <iostream>

#include "pat/commands.hpp"
#include "pat/errors.hpp"

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

std::pair<std::string, std::string> split_assignment(const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw pat::ConfigError(kv, "--set expects key=value");
  return {kv.substr(0, eq), kv.substr(eq + 1)};
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  Overrides flags;  // applied after --set so flags win
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "key = value config file");
  cmd->add_option("--set", c.sets, "override one key, e.g. --set loss.beta=0.5")->allow_extra_args(false);
  auto flag_to = [&c, cmd](const std::string& name, const std::string& key, const std::string& help) {
    cmd->add_option_function<std::string>(name, [&c, key](const std::string& v) { c.flags.emplace_back(key, v); }, help);
  };
  flag_to("-o,--out", "output.dir", "output directory");
  flag_to("--seeds", "train.seeds", "comma-separated seeds");
  flag_to("--epochs", "train.epochs", "training epochs");
  flag_to("--batch-size", "train.batch_size", "minibatch size");
  flag_to("--teacher", "teacher.name", "teacher backbone");
  flag_to("--student", "student.name", "student backbone");
  flag_to("--data", "data.source", "synthetic | cifar10 | cifar100");
  flag_to("--data-root", "data.root", "CIFAR directory (default $PAT_DATA_ROOT)");
  flag_to("--fraction", "data.fraction", "fraction of the training set");
}

pat::ExperimentConfig resolve(const Common& c) {
  pat::ExperimentConfig cfg = c.config.empty() ? pat::ExperimentConfig{} : pat::load_config(c.config);
  Overrides sets;
  for (const auto& s : c.sets) sets.push_back(split_assignment(s));
  pat::apply_overrides(cfg, sets);
  pat::apply_overrides(cfg, c.flags);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perspective-aware teaching: knowledge distillation across heterogeneous backbones"};
  app.require_subcommand(1);

  Common pre_opts, dist_opts, eval_opts;
  bool pre_resume = false, dist_resume = false;

  auto* pre = app.add_subcommand("pretrain-teacher", "train the teacher with cross-entropy only");
  add_common(pre, pre_opts);
  pre->add_flag("--resume", pre_resume, "continue from output_dir/teacher.ckpt");

  auto* dist = app.add_subcommand("distill", "distill a student from a pretrained teacher");
  add_common(dist, dist_opts);
  dist->add_flag("--resume", dist_resume, "continue each seed from its session.ckpt");
  bool no_raa = false, no_afp = false, no_feedback = false;
  auto flag_to = [&](const std::string& name, const std::string& key, const std::string& help) {
    dist->add_option_function<std::string>(name, [&, key](const std::string& v) { dist_opts.flags.emplace_back(key, v); }, help);
  };
  flag_to("--method", "method", "pat | kd | fitnet | scratch");
  flag_to("--teacher-checkpoint", "teacher.checkpoint", "teacher checkpoint from pretrain-teacher");
  flag_to("--alpha", "loss.alpha", "logit KL weight");
  flag_to("--beta", "loss.beta", "feature loss weight");
  flag_to("--gamma", "loss.gamma", "teacher regularization weight");
  flag_to("--nq", "raa.nq", "RAA query count (36, 64, 80, 144, ...)");
  flag_to("--afp-stages", "afp.stages", "comma-separated AFP stages, e.g. 2,3");
  dist->add_flag("--no-raa", no_raa, "replace RAA by per-stage projectors");
  dist->add_flag("--no-afp", no_afp, "disable the adaptive feedback prompts");
  dist->add_flag("--no-feedback", no_feedback, "keep AFP but feed zeros instead of student feedback");

  auto* ev = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  add_common(ev, eval_opts);
  std::string checkpoint;
  ev->add_option("checkpoint", checkpoint, "teacher.ckpt or session.ckpt")->required();

  auto* rep = app.add_subcommand("report", "tables, heatmaps and loss curves from finished runs");
  std::vector<std::string> run_dirs;
  std::string report_out = "report";
  rep->add_option("runs", run_dirs, "run directories (searched recursively)")->required();
  rep->add_option("-o,--out", report_out, "report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? pat::kExitOk : pat::kExitConfig;
  }

  try {
    if (*pre) {
      pat::cmd_pretrain_teacher(resolve(pre_opts), pre_resume, std::cerr);
    } else if (*dist) {
      auto cfg = resolve(dist_opts);
      if (no_raa) cfg.set("pat.raa", "false");
      if (no_afp) cfg.set("pat.afp", "false");
      if (no_feedback) {
        if (!cfg.session.use_afp) throw pat::ConfigError("afp.feedback", "--no-feedback needs AFP enabled");
        cfg.set("afp.feedback", "false");
      }
      pat::cmd_distill(cfg, dist_resume, std::cerr);
    } else if (*ev) {
      pat::cmd_eval(resolve(eval_opts), checkpoint, std::cout);
    } else if (*rep) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      pat::cmd_report(dirs, report_out, std::cout);
    }
  } catch (const pat::ConfigError& e) {
    std::cerr << "config error [" << e.field() << "]: " << e.what() << "\n";
    return pat::kExitConfig;
  } catch (const pat::NumericError& e) {
    std::cerr << "numeric failure in " << e.component() << ": " << e.what() << "\n";
    return pat::kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pat::kExitFailure;
  }
  return pat::kExitOk;
}
