// SPDX-License-Identifier: Apache-2.0
#include "protoseg/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace protoseg {

namespace fs = std::filesystem;

EncoderConfig ExperimentConfig::encoder() const {
  return preset == "full" ? EncoderConfig::full() : EncoderConfig::desk();
}

int ExperimentConfig::image_size() const {
  if (synth.image_size > 0) return synth.image_size;
  return preset == "full" ? 128 : 32;
}

ModelSpec ExperimentConfig::model_spec() const {
  ModelSpec s;
  s.encoder = encoder();
  s.attention = attention;
  s.head = head;
  return s;
}

void ExperimentConfig::validate() const {
  if (preset != "desk" && preset != "full")
    throw ConfigError("preset", "preset must be 'desk' or 'full', got '" + preset + "'");
  PROTOSEG_REQUIRE(synth.count >= 1 && synth.image_size >= 0, "synth count must be >= 1 and image_size >= 0");
  attention.validate();
  head.validate();
  pretrain.validate();
  finetune.validate();
  PROTOSEG_REQUIRE(pretrain.stage == Stage::kPretrain, "pretrain.stage must be 'pretrain'");
  PROTOSEG_REQUIRE(finetune.stage == Stage::kFinetune, "finetune.stage must be 'finetune'");
  PROTOSEG_REQUIRE(eval.episodes >= 1, "eval.episodes must be >= 1");
  for (const auto* spec : {&pretrain.episode_spec, &finetune.episode_spec, &eval.spec})
    spec->validate(kDefectClasses + 1);
}

ordered_json to_json(const ExperimentConfig& c) {
  return {{"dataset", c.dataset},
          {"preset", c.preset},
          {"synth", {{"count", c.synth.count}, {"image_size", c.synth.image_size}, {"seed", c.synth.seed}}},
          {"model", {{"attention", to_json(c.attention)}, {"head", to_json(c.head)}}},
          {"pretrain", to_json(c.pretrain)},
          {"finetune", to_json(c.finetune)},
          {"eval", to_json(c.eval)}};
}

namespace {

void expect_object(const json& j, const std::string& key) {
  if (!j.is_object()) throw ConfigError(key, "expected a JSON object at '" + key + "'");
}

template <class T>
void read(const json& j, const std::string& key, const std::string& path, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path, "wrong type for configuration key '" + path + "'");
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& prefix) {
  for (const auto& item : j.items())
    if (!known.count(item.key())) {
      const std::string key = prefix.empty() ? item.key() : prefix + "." + item.key();
      throw ConfigError(key, "unknown configuration key '" + key + "'");
    }
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j) {
  expect_object(j, "<root>");
  reject_unknown(j, {"dataset", "preset", "synth", "model", "pretrain", "finetune", "eval"}, "");
  ExperimentConfig c;
  read(j, "dataset", "dataset", c.dataset);
  read(j, "preset", "preset", c.preset);
  if (j.contains("synth")) {
    const json& s = j["synth"];
    expect_object(s, "synth");
    reject_unknown(s, {"count", "image_size", "seed"}, "synth");
    read(s, "count", "synth.count", c.synth.count);
    read(s, "image_size", "synth.image_size", c.synth.image_size);
    read(s, "seed", "synth.seed", c.synth.seed);
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    expect_object(m, "model");
    reject_unknown(m, {"attention", "head"}, "model");
    if (m.contains("attention")) c.attention = attention_config_from_json(m["attention"], c.attention, "model.attention");
    if (m.contains("head")) c.head = head_config_from_json(m["head"], c.head, "model.head");
  }
  if (j.contains("pretrain")) c.pretrain = train_config_from_json(j["pretrain"], c.pretrain, "pretrain");
  if (j.contains("finetune")) c.finetune = train_config_from_json(j["finetune"], c.finetune, "finetune");
  if (j.contains("eval")) c.eval = eval_config_from_json(j["eval"], c.eval, "eval");
  return c;
}

ExperimentConfig load_experiment_config(const std::string& file, const std::vector<std::string>& overrides) {
  ordered_json j = to_json(ExperimentConfig{});
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("--config", "cannot read config file '" + file + "'");
    json user = json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError("--config", "config file '" + file + "' is not valid JSON");
    ExperimentConfig parsed = experiment_config_from_json(user);
    j = to_json(parsed);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError(o, "override '" + o + "' is not key=value");
    apply_override(j, o.substr(0, eq), o.substr(eq + 1));
  }
  ExperimentConfig c = experiment_config_from_json(j);
  c.validate();
  return c;
}

fs::path make_run_directory(const fs::path& root, const std::string& digest) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream id;
  id << std::put_time(&tm, "%Y%m%dT%H%M%SZ") << "-" << digest.substr(0, 8);
  fs::path dir = root / id.str();
  for (int n = 2; fs::exists(dir); ++n) dir = root / (id.str() + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

fs::path output_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("PROTOSEG_OUT"); env && *env) return env;
  return "runs";
}

ordered_json to_json(const EvalRecord& r) {
  return {{"config_digest", r.config_digest},
          {"seed", r.seed},
          {"n_train", r.n_train},
          {"n_test", r.n_test},
          {"k", r.k},
          {"attention_variant", r.attention_variant},
          {"bidirectional", r.bidirectional},
          {"aggregation", r.aggregation},
          {"episodes", r.episodes},
          {"metrics", r.metrics},
          {"std", r.stddev}};
}

EvalRecord eval_record_from_json(const ordered_json& j, const std::string& run) {
  EvalRecord r;
  r.run = run;
  try {
    r.config_digest = j.at("config_digest").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.n_train = j.at("n_train").get<int>();
    r.n_test = j.at("n_test").get<int>();
    r.k = j.at("k").get<int>();
    r.attention_variant = j.value("attention_variant", "none");
    r.bidirectional = j.value("bidirectional", true);
    r.aggregation = j.value("aggregation", "episode-mean");
    r.episodes = j.value("episodes", 0);
    for (const auto& [key, value] : j.at("metrics").items()) r.metrics[key] = value;
    if (j.contains("std"))
      for (const auto& [key, value] : j.at("std").items()) r.stddev[key] = value;
  } catch (const ordered_json::exception& e) {
    throw ReportError("malformed evaluation output in " + run + ": " + e.what());
  }
  return r;
}

ReportFormat parse_report_format(const std::string& name) {
  if (name == "markdown" || name == "md") return ReportFormat::kMarkdown;
  if (name == "csv") return ReportFormat::kCsv;
  if (name == "json") return ReportFormat::kJson;
  throw ContractError("report format must be markdown, csv or json, got '" + name + "'");
}

namespace {

std::vector<std::string> metric_keys(const EvalRecord& r) {
  std::vector<std::string> keys;
  for (const auto& item : r.metrics.items()) keys.push_back(item.key());
  return keys;
}

std::string schema_diff(const EvalRecord& a, const EvalRecord& b) {
  std::set<std::string> ka, kb;
  for (const auto& k : metric_keys(a)) ka.insert(k);
  for (const auto& k : metric_keys(b)) kb.insert(k);
  std::ostringstream out;
  out << "metric schemas differ between " << a.run << " and " << b.run << ":";
  for (const auto& k : ka)
    if (!kb.count(k)) out << "\n  - " << k << " (only in " << a.run << ")";
  for (const auto& k : kb)
    if (!ka.count(k)) out << "\n  + " << k << " (only in " << b.run << ")";
  if (ka == kb) out << "\n  column order differs";
  return out.str();
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

std::string emit_report(const std::vector<fs::path>& runs, ReportFormat format) {
  if (runs.empty()) throw ReportError("no run directories given");
  std::vector<EvalRecord> records;
  for (const auto& dir : runs) {
    const fs::path file = dir / "eval.json";
    std::ifstream in(file);
    if (!in) throw ReportError("run directory " + dir.string() + " has no evaluation output (eval.json)");
    ordered_json j = ordered_json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ReportError("evaluation output in " + dir.string() + " is not valid JSON");
    records.push_back(eval_record_from_json(j, dir.string()));
  }
  const auto keys = metric_keys(records.front());
  for (std::size_t i = 1; i < records.size(); ++i)
    if (metric_keys(records[i]) != keys) throw ReportError(schema_diff(records.front(), records[i]));

  // Column label per metric key; unknown keys fall back to the key itself.
  std::vector<std::string> labels;
  for (const auto& k : keys) {
    std::string label = k;
    for (std::size_t c = 0; c < MetricReport::kColumns; ++c)
      if (MetricReport::keys()[c] == k) label = MetricReport::labels()[c];
    labels.push_back(label);
  }
  std::vector<std::size_t> best(keys.size(), 0);
  for (std::size_t c = 0; c < keys.size(); ++c)
    for (std::size_t r = 1; r < records.size(); ++r)
      if (records[r].metrics[keys[c]].get<double>() > records[best[c]].metrics[keys[c]].get<double>()) best[c] = r;

  std::set<std::string> aggregations;
  for (const auto& r : records) aggregations.insert(r.aggregation);
  std::string aggregation;
  for (const auto& a : aggregations) aggregation += (aggregation.empty() ? "" : ", ") + a;

  std::ostringstream out;
  if (format == ReportFormat::kJson) {
    ordered_json j;
    j["aggregation"] = aggregation;
    j["columns"] = keys;
    for (const auto& r : records) {
      ordered_json row = to_json(r);
      row["run"] = r.run;
      j["runs"].push_back(row);
    }
    for (std::size_t c = 0; c < keys.size(); ++c) j["best"][keys[c]] = records[best[c]].run;
    out << j.dump(2) << "\n";
  } else if (format == ReportFormat::kCsv) {
    out << "run,config_digest,seed,n_train,n_test,k,attention,bidirectional,aggregation";
    for (const auto& k : keys) out << "," << k;
    out << "\n";
    for (const auto& r : records) {
      out << r.run << "," << r.config_digest << "," << r.seed << "," << r.n_train << "," << r.n_test << "," << r.k
          << "," << r.attention_variant << "," << (r.bidirectional ? "true" : "false") << "," << r.aggregation;
      for (const auto& k : keys) out << "," << fixed(r.metrics[k].get<double>(), 6);
      out << "\n";
    }
  } else {
    out << "| n_train | n_test | k |";
    for (const auto& l : labels) out << " " << l << " |";
    out << " attention | bidirectional | seed | config |\n|---|---|---|";
    for (std::size_t c = 0; c < labels.size(); ++c) out << "---|";
    out << "---|---|---|---|\n";
    for (std::size_t r = 0; r < records.size(); ++r) {
      const auto& rec = records[r];
      out << "| " << rec.n_train << " | " << rec.n_test << " | " << rec.k << " |";
      for (std::size_t c = 0; c < keys.size(); ++c) {
        const std::string v = fixed(100.0 * rec.metrics[keys[c]].get<double>(), 2);
        out << " " << (best[c] == r && records.size() > 1 ? "**" + v + "**" : v) << " |";
      }
      out << " " << rec.attention_variant << " | " << (rec.bidirectional ? "yes" : "no") << " | " << rec.seed
          << " | " << rec.config_digest << " |\n";
    }
    out << "\nValues in percent; best per column in bold. Aggregation: " << aggregation << ".\n";
  }
  return out.str();
}

}  // namespace protoseg
