#include "pat/commands.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "json.hpp"

#include "pat/checkpoint.hpp"
#include "pat/distiller.hpp"
#include "pat/errors.hpp"
#include "pat/metrics.hpp"
#include "pat/report.hpp"

namespace pat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    out << text;
  }
  fs::rename(tmp, path);
}

int64_t total_steps(const ExperimentConfig& config, int64_t n_train) {
  if (!config.train.cosine) return 0;
  const auto per_epoch = (n_train + config.train.batch_size - 1) / config.train.batch_size;
  return std::max<int64_t>(1, per_epoch * config.train.epochs);
}

json spec_meta(const BackboneSpec& spec) {
  return {{"model", spec.name}, {"num_classes", spec.num_classes}, {"image_size", spec.image_size}};
}

// Re-keys "<from>.*" tensors to "<to>.*".
Checkpoint rename_prefix(const Checkpoint& ckpt, const std::string& from, const std::string& to) {
  Checkpoint out;
  out.meta = ckpt.meta;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind(from + ".", 0) == 0) out.tensors.emplace_back(to + name.substr(from.size()), t);
    else out.tensors.emplace_back(name, t);
  }
  return out;
}

void check_spec(const Checkpoint& ckpt, const BackboneSpec& spec, const std::string& field) {
  const auto name = ckpt.meta.value("model", std::string());
  const auto classes = ckpt.meta.value("num_classes", int64_t{-1});
  const auto size = ckpt.meta.value("image_size", int64_t{-1});
  if (name != spec.name || classes != spec.num_classes || size != spec.image_size) {
    throw ConfigError(field, "checkpoint holds " + name + " (" + std::to_string(classes) + " classes, " +
                                 std::to_string(size) + "px) but the config asks for " + spec.name + " (" +
                                 std::to_string(spec.num_classes) + " classes, " + std::to_string(spec.image_size) +
                                 "px)");
  }
}

// Per-epoch log line to the console.
std::function<void(const MetricRecord&)> tee(MetricsSink& sink, std::ostream& log, const std::string& tag) {
  return [&sink, &log, tag](const MetricRecord& rec) {
    sink.append(rec);
    if (rec.split == "val") {
      log << tag << " epoch " << rec.epoch << " step " << rec.step << " val_acc " << std::fixed << std::setprecision(4)
          << rec.accuracy << std::defaultfloat << "\n";
      log.flush();
    }
  };
}

}  // namespace

void apply_overrides(ExperimentConfig& config, const std::vector<std::pair<std::string, std::string>>& overrides) {
  for (const auto& [k, v] : overrides) config.set(k, v);
}

DataSplits make_data(const ExperimentConfig& config) {
  DataSplits out;
  const auto& d = config.data;
  if (d.source == "synthetic") {
    auto all = synth_dataset({d.data_seed, config.student.num_classes, d.train_size + d.val_size,
                              config.student.image_size, d.noise});
    std::vector<int64_t> train_idx(d.train_size), val_idx(d.val_size);
    for (int64_t i = 0; i < d.train_size; ++i) train_idx[i] = i;
    for (int64_t i = 0; i < d.val_size; ++i) val_idx[i] = d.train_size + i;
    out.train = all.select(train_idx);
    out.train.split = "train";
    if (d.val_size > 0) {
      out.val = all.select(val_idx);
      out.val.split = "val";
    }
  } else {
    const auto variant = d.source == "cifar10" ? CifarVariant::kCifar10 : CifarVariant::kCifar100;
    const int64_t classes = variant == CifarVariant::kCifar10 ? 10 : 100;
    if (config.student.num_classes != classes || config.teacher.num_classes != classes) {
      throw ConfigError("model.num_classes", d.source + " has " + std::to_string(classes) + " classes");
    }
    const auto root = resolve_data_root(d);
    if (root.empty()) throw ConfigError("data.root", "set data.root or PAT_DATA_ROOT to the CIFAR directory");
    out.train = load_cifar(root, variant, "train");
    out.val = load_cifar(root, variant, "test");
  }
  if (d.fraction < 1.0) out.train = subset_fraction(out.train, d.fraction, d.data_seed);
  return out;
}

void cmd_pretrain_teacher(const ExperimentConfig& config, bool resume, std::ostream& log) {
  config.validate();
  const fs::path out = config.output_dir;
  fs::create_directories(out);
  write_text(out / "config.txt", config.serialize());
  const auto digest = config.digest();
  const auto seed = config.train.seeds.front();
  auto data = make_data(config);

  auto model = build_backbone(config.teacher, seed);
  SessionConfig sc = config.session;
  sc.method = Method::kScratch;
  sc.optimizer.total_steps = total_steps(config, data.train.size());
  DistillSession session(nullptr, model, sc, seed);

  const auto ckpt_path = out / "teacher.ckpt";
  int64_t start_epoch = 0;
  if (resume && fs::exists(ckpt_path)) {
    auto ckpt = load_checkpoint(ckpt_path);
    check_spec(ckpt, config.teacher, "teacher.name");
    session.load(rename_prefix(ckpt, "model", "student"));
    start_epoch = ckpt.meta.value("epoch", int64_t{0});
    log << "resuming teacher from epoch " << start_epoch << "\n";
  } else {
    fs::remove(out / "metrics.jsonl");
  }

  json info = {{"label", "teacher"}, {"method", "teacher"}, {"teacher", config.teacher.name},
               {"student", config.teacher.name}, {"seed", seed}, {"config_digest", digest},
               {"use_raa", false}, {"nq", 0}, {"attention_bytes", 0}, {"extra_params", 0},
               {"provenance", data.train.provenance.source}, {"complete", false}};
  write_text(out / "run.json", info.dump(2));

  MetricsSink sink(out / "metrics.jsonl", digest);
  FitOptions opt;
  opt.epochs = std::max<int64_t>(0, config.train.epochs - start_epoch);
  opt.start_epoch = start_epoch;
  opt.batch_size = config.train.batch_size;
  opt.augment = config.data.augment;
  opt.seed = seed;
  opt.log_every = config.train.log_every;
  opt.sink = tee(sink, log, "teacher");
  opt.on_epoch_end = [&](int64_t epoch) {
    Checkpoint ckpt;
    ckpt.meta = spec_meta(config.teacher);
    ckpt.meta["kind"] = "teacher";
    ckpt.meta["seed"] = seed;
    ckpt.meta["epoch"] = epoch;
    ckpt.meta["step"] = session.step();
    ckpt.meta["config_digest"] = digest;
    capture_module(ckpt, "model", *model);
    save_checkpoint(ckpt_path, ckpt);
  };
  double acc = fit(session, data.train, data.val.size() > 0 ? &data.val : nullptr, opt);
  if (opt.epochs == 0) acc = evaluate(*model, data.val.size() > 0 ? data.val : data.train);

  info["complete"] = true;
  info["final_accuracy"] = acc;
  write_text(out / "run.json", info.dump(2));
  log << "teacher " << config.teacher.name << " final accuracy " << acc << " -> " << ckpt_path.string() << "\n";
}

void cmd_distill(const ExperimentConfig& config, bool resume, std::ostream& log) {
  config.validate();
  const auto method = config.session.method;
  Checkpoint teacher_ckpt;
  if (method != Method::kScratch) {
    if (config.teacher_checkpoint.empty()) {
      throw ConfigError("teacher.checkpoint", "method " + to_string(method) + " needs a pretrained teacher");
    }
    if (!fs::exists(config.teacher_checkpoint)) {
      throw ConfigError("teacher.checkpoint", "no checkpoint at " + config.teacher_checkpoint);
    }
    teacher_ckpt = load_checkpoint(config.teacher_checkpoint);
    check_spec(teacher_ckpt, config.teacher, "teacher.checkpoint");
  }

  const fs::path out = config.output_dir;
  fs::create_directories(out);
  write_text(out / "config.txt", config.serialize());
  const auto digest = config.digest();
  const auto label = run_label(config);
  auto data = make_data(config);
  const auto& s = config.session;
  const bool uses_raa = method == Method::kPat && s.use_raa;

  std::vector<double> accuracies;
  for (auto seed : config.train.seeds) {
    const auto dir = out / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    StagedBackbone teacher;
    if (method != Method::kScratch) {
      teacher = build_backbone(config.teacher, 0);
      restore_module(teacher_ckpt, "model", *teacher);
    }
    auto student = build_backbone(config.student, seed);
    SessionConfig sc = s;
    sc.optimizer.total_steps = total_steps(config, data.train.size());
    DistillSession session(teacher, student, sc, seed);

    const auto ckpt_path = dir / "session.ckpt";
    int64_t start_epoch = 0;
    if (resume && fs::exists(ckpt_path)) {
      auto ckpt = load_checkpoint(ckpt_path);
      check_spec(ckpt, config.student, "student.name");
      session.load(ckpt);
      start_epoch = ckpt.meta.value("epoch", int64_t{0});
      log << label << " seed " << seed << ": resuming from epoch " << start_epoch << "\n";
    } else {
      fs::remove(dir / "metrics.jsonl");
    }

    json info = {{"label", label},
                 {"method", to_string(method)},
                 {"teacher", method == Method::kScratch ? "" : config.teacher.name},
                 {"student", config.student.name},
                 {"seed", seed},
                 {"config_digest", digest},
                 {"use_raa", uses_raa},
                 {"use_afp", method == Method::kPat && s.use_afp},
                 {"nq", uses_raa ? s.raa.n_q : 0},
                 {"attention_bytes", uses_raa ? s.raa.n_q * s.raa.n_q * int64_t{4} : 0},
                 {"extra_params", session.count_extra_parameters()},
                 {"provenance", data.train.provenance.source},
                 {"complete", false}};
    write_text(dir / "run.json", info.dump(2));

    MetricsSink sink(dir / "metrics.jsonl", digest);
    FitOptions opt;
    opt.epochs = std::max<int64_t>(0, config.train.epochs - start_epoch);
    opt.start_epoch = start_epoch;
    opt.batch_size = config.train.batch_size;
    opt.augment = config.data.augment;
    opt.seed = seed;
    opt.log_every = config.train.log_every;
    opt.sink = tee(sink, log, label + " seed " + std::to_string(seed));
    opt.on_epoch_end = [&](int64_t epoch) {
      auto ckpt = session.to_checkpoint();
      ckpt.meta.update(spec_meta(config.student));
      ckpt.meta["kind"] = "session";
      ckpt.meta["seed"] = seed;
      ckpt.meta["epoch"] = epoch;
      ckpt.meta["config_digest"] = digest;
      save_checkpoint(ckpt_path, ckpt);
    };
    double acc = fit(session, data.train, data.val.size() > 0 ? &data.val : nullptr, opt);
    if (opt.epochs == 0) acc = evaluate(*student, data.val.size() > 0 ? data.val : data.train);

    if (uses_raa) {
      // Mean attention over the first evaluation batch.
      const auto& probe = data.val.size() > 0 ? data.val : data.train;
      torch::NoGradGuard no_grad;
      student->eval();
      auto images = probe.images.slice(0, 0, std::min<int64_t>(64, probe.size()));
      auto stages = student->forward_stages(images).stages;
      auto attention = session.raa()->forward(stages).attention.mean(0);
      write_attention_csv(dir / "attention.csv", attention);
    }

    info["complete"] = true;
    info["final_accuracy"] = acc;
    write_text(dir / "run.json", info.dump(2));
    accuracies.push_back(acc);
    log << label << " seed " << seed << " final accuracy " << acc << "\n";
  }

  double mean = 0.0;
  for (double a : accuracies) mean += a;
  mean /= static_cast<double>(accuracies.size());
  double var = 0.0;
  for (double a : accuracies) var += (a - mean) * (a - mean);
  const double sd = accuracies.size() > 1 ? std::sqrt(var / static_cast<double>(accuracies.size() - 1)) : 0.0;
  json agg = {{"label", label},         {"config_digest", digest}, {"seeds", config.train.seeds},
              {"accuracies", accuracies}, {"mean", mean},            {"std", sd}};
  write_text(out / "aggregate.json", agg.dump(2));
  log << label << " mean " << mean << " +- " << sd << " over " << accuracies.size() << " seed(s)\n";
}

double cmd_eval(const ExperimentConfig& config, const fs::path& checkpoint, std::ostream& out) {
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint", "no checkpoint at " + checkpoint.string());
  auto ckpt = load_checkpoint(checkpoint);
  BackboneSpec spec{ckpt.meta.value("model", std::string()), ckpt.meta.value("num_classes", int64_t{10}),
                    ckpt.meta.value("image_size", int64_t{32})};
  auto model = build_backbone(spec, 0);
  restore_module(ckpt, ckpt.meta.value("kind", std::string("teacher")) == "session" ? "student" : "model", *model);
  auto cfg = config;
  cfg.student = spec;
  cfg.teacher.num_classes = spec.num_classes;
  cfg.teacher.image_size = spec.image_size;
  auto data = make_data(cfg);
  const auto& eval_set = data.val.size() > 0 ? data.val : data.train;
  const double acc = evaluate(*model, eval_set);
  json j = {{"checkpoint", checkpoint.string()}, {"model", spec.name},        {"accuracy", acc},
            {"n", eval_set.size()},              {"data", eval_set.provenance.source},
            {"config_digest", ckpt.meta.value("config_digest", std::string())}};
  out << j.dump() << "\n";
  return acc;
}

void cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, std::ostream& out) {
  auto files = write_report(run_dirs, out_dir);
  for (const auto& f : files.written) out << f.string() << "\n";
}

}  // namespace pat
