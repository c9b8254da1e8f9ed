#include "pat/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "pat/data.hpp"
#include "pat/errors.hpp"

namespace pat {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected an integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key, "expected a boolean, got '" + v + "'");
}

std::string join(const std::vector<int64_t>& xs) {
  std::ostringstream os;
  for (size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(17);
  os << x;
  return os.str();
}

}  // namespace

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<int>(to_int(key, item)));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno), "empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

void ExperimentConfig::set(const std::string& key, const std::string& v) {
  auto& s = session;
  if (key == "teacher.name") teacher.name = v;
  else if (key == "teacher.checkpoint") teacher_checkpoint = v;
  else if (key == "student.name") student.name = v;
  else if (key == "model.num_classes") teacher.num_classes = student.num_classes = to_int(key, v);
  else if (key == "model.image_size") teacher.image_size = student.image_size = to_int(key, v);
  else if (key == "method") s.method = parse_method(v);
  else if (key == "pat.raa") s.use_raa = to_bool(key, v);
  else if (key == "pat.afp") s.use_afp = to_bool(key, v);
  else if (key == "loss.alpha") s.weights.alpha = to_double(key, v);
  else if (key == "loss.beta") s.weights.beta = to_double(key, v);
  else if (key == "loss.gamma") s.weights.gamma = to_double(key, v);
  else if (key == "loss.tau_kd") s.weights.tau_kd = to_double(key, v);
  else if (key == "loss.tau_reg") s.weights.tau_reg = to_double(key, v);
  else if (key == "loss.hcl_levels") {
    s.hcl.levels.clear();
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      s.hcl.levels.push_back(item == "full" ? 0 : to_int(key, item));
    }
  } else if (key == "raa.nq") s.raa.n_q = to_int(key, v);
  else if (key == "raa.d") s.raa.d = to_int(key, v);
  else if (key == "raa.strict_grid") s.raa.strict_grid = to_bool(key, v);
  else if (key == "afp.stages") s.afp.active_stages = parse_int_list(key, v);
  else if (key == "afp.feedback") s.afp.use_feedback = to_bool(key, v);
  else if (key == "afp.feedback_mode") {
    if (v == "batch_mean") s.afp.mode = FeedbackMode::kBatchMean;
    else if (v == "per_sample") s.afp.mode = FeedbackMode::kPerSample;
    else throw ConfigError(key, "expected batch_mean or per_sample");
  } else if (key == "optim.kind") s.optimizer.kind = v;
  else if (key == "optim.lr") s.optimizer.lr = to_double(key, v);
  else if (key == "optim.momentum") s.optimizer.momentum = to_double(key, v);
  else if (key == "optim.weight_decay") s.optimizer.weight_decay = to_double(key, v);
  else if (key == "data.source") data.source = v;
  else if (key == "data.root") data.root = v;
  else if (key == "data.fraction") data.fraction = to_double(key, v);
  else if (key == "data.augment") data.augment = to_bool(key, v);
  else if (key == "data.train_size") data.train_size = to_int(key, v);
  else if (key == "data.val_size") data.val_size = to_int(key, v);
  else if (key == "data.noise") data.noise = to_double(key, v);
  else if (key == "data.seed") data.data_seed = static_cast<uint64_t>(to_int(key, v));
  else if (key == "train.epochs") train.epochs = to_int(key, v);
  else if (key == "train.batch_size") train.batch_size = to_int(key, v);
  else if (key == "train.seeds") {
    train.seeds.clear();
    for (int x : parse_int_list(key, v)) train.seeds.push_back(static_cast<uint64_t>(x));
  } else if (key == "train.log_every") train.log_every = to_int(key, v);
  else if (key == "train.cosine") train.cosine = to_bool(key, v);
  else if (key == "output.dir") output_dir = v;
  else throw ConfigError(key, "unknown configuration key");
}

std::string ExperimentConfig::serialize() const {
  const auto& s = session;
  std::vector<int64_t> stages(s.afp.active_stages.begin(), s.afp.active_stages.end());
  std::vector<int64_t> seeds(train.seeds.begin(), train.seeds.end());
  std::ostringstream os;
  os << "teacher.name = " << teacher.name << "\n"
     << "teacher.checkpoint = " << teacher_checkpoint << "\n"
     << "student.name = " << student.name << "\n"
     << "model.num_classes = " << student.num_classes << "\n"
     << "model.image_size = " << student.image_size << "\n"
     << "method = " << to_string(s.method) << "\n"
     << "pat.raa = " << (s.use_raa ? "true" : "false") << "\n"
     << "pat.afp = " << (s.use_afp ? "true" : "false") << "\n"
     << "loss.alpha = " << fmt(s.weights.alpha) << "\n"
     << "loss.beta = " << fmt(s.weights.beta) << "\n"
     << "loss.gamma = " << fmt(s.weights.gamma) << "\n"
     << "loss.tau_kd = " << fmt(s.weights.tau_kd) << "\n"
     << "loss.tau_reg = " << fmt(s.weights.tau_reg) << "\n";
  os << "loss.hcl_levels = ";
  for (size_t i = 0; i < s.hcl.levels.size(); ++i) {
    os << (i ? "," : "");
    if (s.hcl.levels[i] == 0) os << "full"; else os << s.hcl.levels[i];
  }
  os << "\n"
     << "raa.nq = " << s.raa.n_q << "\n"
     << "raa.d = " << s.raa.d << "\n"
     << "raa.strict_grid = " << (s.raa.strict_grid ? "true" : "false") << "\n"
     << "afp.stages = " << join(stages) << "\n"
     << "afp.feedback = " << (s.afp.use_feedback ? "true" : "false") << "\n"
     << "afp.feedback_mode = " << (s.afp.mode == FeedbackMode::kBatchMean ? "batch_mean" : "per_sample") << "\n"
     << "optim.kind = " << s.optimizer.kind << "\n"
     << "optim.lr = " << fmt(s.optimizer.lr) << "\n"
     << "optim.momentum = " << fmt(s.optimizer.momentum) << "\n"
     << "optim.weight_decay = " << fmt(s.optimizer.weight_decay) << "\n"
     << "data.source = " << data.source << "\n"
     << "data.root = " << data.root << "\n"
     << "data.fraction = " << fmt(data.fraction) << "\n"
     << "data.augment = " << (data.augment ? "true" : "false") << "\n"
     << "data.train_size = " << data.train_size << "\n"
     << "data.val_size = " << data.val_size << "\n"
     << "data.noise = " << fmt(data.noise) << "\n"
     << "data.seed = " << data.data_seed << "\n"
     << "train.epochs = " << train.epochs << "\n"
     << "train.batch_size = " << train.batch_size << "\n"
     << "train.seeds = " << join(seeds) << "\n"
     << "train.log_every = " << train.log_every << "\n"
     << "train.cosine = " << (train.cosine ? "true" : "false") << "\n"
     << "output.dir = " << output_dir << "\n";
  return os.str();
}

std::string ExperimentConfig::digest() const { return sha256_hex(serialize()).substr(0, 16); }

void ExperimentConfig::validate() const {
  try {
    expected_stage_shapes(teacher);
  } catch (const ConfigError& e) {
    throw ConfigError("teacher." + e.field(), e.what());
  }
  try {
    expected_stage_shapes(student);
  } catch (const ConfigError& e) {
    throw ConfigError("student." + e.field(), e.what());
  }
  session.validate();
  if (data.source != "synthetic" && data.source != "cifar10" && data.source != "cifar100") {
    throw ConfigError("data.source", "expected synthetic, cifar10 or cifar100");
  }
  if (!(data.fraction > 0.0 && data.fraction <= 1.0)) throw ConfigError("data.fraction", "must be in (0, 1]");
  if (data.source != "synthetic" && student.image_size != 32) throw ConfigError("model.image_size", "CIFAR images are 32x32");
  if (data.train_size < student.num_classes) throw ConfigError("data.train_size", "must be >= num_classes");
  if (data.val_size < 0) throw ConfigError("data.val_size", "must be >= 0");
  if (train.epochs < 0) throw ConfigError("train.epochs", "must be >= 0");
  if (train.batch_size <= 0) throw ConfigError("train.batch_size", "must be positive");
  if (train.seeds.empty()) throw ConfigError("train.seeds", "needs at least one seed");
  if (output_dir.empty()) throw ConfigError("output.dir", "must not be empty");
}

ExperimentConfig config_from_text(const std::string& text) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : parse_key_values(text)) cfg.set(k, v);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_text(ss.str());
}

std::string resolve_data_root(const DataConfig& data) {
  if (!data.root.empty()) return data.root;
  if (const char* env = std::getenv("PAT_DATA_ROOT")) return env;
  return "";
}

std::string run_label(const ExperimentConfig& config) {
  const auto& s = config.session;
  std::ostringstream os;
  os << to_string(s.method);
  if (s.method == Method::kPat) {
    if (!s.use_raa) os << "-noraa";
    if (!s.use_afp) os << "-noafp";
    if (s.use_afp && !s.afp.use_feedback) os << "-nofeedback";
    if (s.use_afp && s.afp.active_stages != std::vector<int>{1, 2, 3, 4}) {
      os << "-afp";
      for (int st : s.afp.active_stages) os << st;
    }
    if (s.use_raa && s.raa.n_q != 64) os << "-nq" << s.raa.n_q;
  }
  if (s.method != Method::kScratch && s.weights.alpha == 0.0) os << "-nokl";
  if (config.data.fraction < 1.0) os << "-frac" << config.data.fraction;
  return os.str();
}

}  // namespace pat
