#pragma once

// Experiment configuration files: one `dotted.key = value` per line, `#`
// starts a comment, lists are comma separated. Every key has a default;
// unknown keys are rejected.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "d3gzsl/data.hpp"
#include "d3gzsl/error.hpp"
#include "d3gzsl/pipeline.hpp"

namespace d3gzsl {

struct ExperimentConfig {
  SyntheticSpec data;
  std::optional<DatasetPaths> dataset_files;  // load from disk instead of synthesizing
  TrainConfig train;
  std::vector<RunMode> modes{RunMode::d3gzsl};
  std::vector<std::uint64_t> seeds{1};
  std::string out_dir = "out";
  std::size_t jobs = 1;

  // Fully resolved `key = value` listing, in key order.
  std::string echo() const;
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static std::vector<std::string> keys();
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_value(const std::string& key, const std::string& v) {
  T out{};
  const char* first = v.data();
  const char* last = v.data() + v.size();
  auto [p, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || p != last) throw ConfigError(key, "cannot parse '" + v + "' for key '" + key + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key, "expected true or false for key '" + key + "', got '" + v + "'");
}

inline std::string show(double v) { return format_double(v); }
inline std::string show(std::size_t v) { return std::to_string(v); }
inline std::string show(int v) { return std::to_string(v); }
inline std::string show(bool v) { return v ? "true" : "false"; }

struct KeyHandler {
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T, class Access>
KeyHandler number_key(Access access) {
  return {[access](ExperimentConfig& c, const std::string& k, const std::string& v) { access(c) = parse_value<T>(k, v); },
          [access](const ExperimentConfig& c) { return show(access(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
KeyHandler bool_key(Access access) {
  return {[access](ExperimentConfig& c, const std::string& k, const std::string& v) { access(c) = parse_bool(k, v); },
          [access](const ExperimentConfig& c) { return show(access(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
KeyHandler path_key(Access access) {
  // An empty value leaves the path unset, so echoed configs parse back.
  return {[access](ExperimentConfig& c, const std::string&, const std::string& v) {
            if (v.empty()) return;
            if (!c.dataset_files) c.dataset_files = DatasetPaths{};
            access(*c.dataset_files) = v;
          },
          [access](const ExperimentConfig& c) {
            return c.dataset_files ? access(const_cast<DatasetPaths&>(*c.dataset_files)) : std::string();
          }};
}

inline const std::map<std::string, KeyHandler>& key_table() {
  using C = ExperimentConfig;
  using sz = std::size_t;
  static const std::map<std::string, KeyHandler> table = [] {
    std::map<std::string, KeyHandler> t;
    t["data.seen_classes"] = number_key<sz>([](C& c) -> sz& { return c.data.seen_classes; });
    t["data.unseen_classes"] = number_key<sz>([](C& c) -> sz& { return c.data.unseen_classes; });
    t["data.feature_dim"] = number_key<sz>([](C& c) -> sz& { return c.data.feature_dim; });
    t["data.attribute_dim"] = number_key<sz>([](C& c) -> sz& { return c.data.attribute_dim; });
    t["data.train_per_class"] = number_key<sz>([](C& c) -> sz& { return c.data.train_per_class; });
    t["data.seen_test_per_class"] = number_key<sz>([](C& c) -> sz& { return c.data.seen_test_per_class; });
    t["data.unseen_test_per_class"] = number_key<sz>([](C& c) -> sz& { return c.data.unseen_test_per_class; });
    t["data.separation"] = number_key<double>([](C& c) -> double& { return c.data.separation; });
    t["data.noise_sigma"] = number_key<double>([](C& c) -> double& { return c.data.noise_sigma; });
    t["data.map_seed"] = number_key<std::uint64_t>([](C& c) -> std::uint64_t& { return c.data.map_seed; });
    t["data.seed"] = number_key<std::uint64_t>([](C& c) -> std::uint64_t& { return c.data.seed; });
    t["data.features_path"] = path_key([](DatasetPaths& p) -> std::string& { return p.features; });
    t["data.attributes_path"] = path_key([](DatasetPaths& p) -> std::string& { return p.attributes; });
    t["data.split_path"] = path_key([](DatasetPaths& p) -> std::string& { return p.split; });

    t["run.mode"] = {[](C& c, const std::string& k, const std::string& v) {
                       c.modes.clear();
                       try {
                         for (const auto& m : split_list(v)) c.modes.push_back(parse_run_mode(m));
                       } catch (const ParameterError& e) {
                         throw ConfigError(k, e.what());
                       }
                       if (c.modes.empty()) throw ConfigError(k, "run.mode needs at least one mode");
                     },
                     [](const C& c) {
                       std::string s;
                       for (auto m : c.modes) s += (s.empty() ? "" : ",") + to_string(m);
                       return s;
                     }};
    t["run.seeds"] = {[](C& c, const std::string& k, const std::string& v) {
                        c.seeds.clear();
                        for (const auto& s : split_list(v)) c.seeds.push_back(parse_value<std::uint64_t>(k, s));
                        if (c.seeds.empty()) throw ConfigError(k, "run.seeds needs at least one seed");
                      },
                      [](const C& c) {
                        std::string s;
                        for (auto v : c.seeds) s += (s.empty() ? "" : ",") + std::to_string(v);
                        return s;
                      }};
    t["run.epochs"] = number_key<sz>([](C& c) -> sz& { return c.train.epochs; });
    t["run.batch_size"] = number_key<sz>([](C& c) -> sz& { return c.train.batch_size; });
    t["run.syn_per_class"] = number_key<int>([](C& c) -> int& { return c.train.syn_per_class; });
    t["run.lambda"] = number_key<double>([](C& c) -> double& { return c.train.lambda; });
    t["run.use_id2sd"] = bool_key([](C& c) -> bool& { return c.train.use_id2sd; });
    t["run.use_o2dbd"] = bool_key([](C& c) -> bool& { return c.train.use_o2dbd; });
    t["run.jobs"] = number_key<sz>([](C& c) -> sz& { return c.jobs; });

    t["model.hidden_dim"] = number_key<sz>([](C& c) -> sz& { return c.train.hidden_dim; });
    t["model.embed_dim"] = number_key<sz>([](C& c) -> sz& { return c.train.embed_dim; });
    t["model.projector_hidden"] = number_key<sz>([](C& c) -> sz& { return c.train.projector_hidden; });
    t["model.tau_o"] = number_key<double>([](C& c) -> double& { return c.train.tau_o; });
    t["model.tau_s"] = number_key<double>([](C& c) -> double& { return c.train.tau_s; });

    t["teacher.epochs"] = number_key<sz>([](C& c) -> sz& { return c.train.teacher_epochs; });
    t["teacher.lr"] = number_key<double>([](C& c) -> double& { return c.train.teacher_optim.lr; });
    t["optim.student_lr"] = number_key<double>([](C& c) -> double& { return c.train.student_optim.lr; });
    t["optim.projector_lr"] = number_key<double>([](C& c) -> double& { return c.train.projector_optim.lr; });
    t["optim.beta1"] = {[](C& c, const std::string& k, const std::string& v) {
                          const double b = parse_value<double>(k, v);
                          c.train.teacher_optim.beta1 = c.train.student_optim.beta1 = c.train.projector_optim.beta1 = b;
                        },
                        [](const C& c) { return show(c.train.student_optim.beta1); }};
    t["optim.beta2"] = {[](C& c, const std::string& k, const std::string& v) {
                          const double b = parse_value<double>(k, v);
                          c.train.teacher_optim.beta2 = c.train.student_optim.beta2 = c.train.projector_optim.beta2 = b;
                        },
                        [](const C& c) { return show(c.train.student_optim.beta2); }};

    t["fg.variant"] = {[](C& c, const std::string& k, const std::string& v) {
                         if (v == "wgan_gp") c.train.fg_variant = GeneratorVariant::wgan_gp;
                         else if (v == "gaussian_oracle") c.train.fg_variant = GeneratorVariant::gaussian_oracle;
                         else throw ConfigError(k, "fg.variant must be wgan_gp or gaussian_oracle, got '" + v + "'");
                       },
                       [](const C& c) { return to_string(c.train.fg_variant); }};
    t["fg.generator_hidden"] = number_key<sz>([](C& c) -> sz& { return c.train.wgan.generator_hidden; });
    t["fg.critic_hidden"] = number_key<sz>([](C& c) -> sz& { return c.train.wgan.critic_hidden; });
    t["fg.n_critic"] = number_key<sz>([](C& c) -> sz& { return c.train.wgan.n_critic; });
    t["fg.gp_weight"] = number_key<double>([](C& c) -> double& { return c.train.wgan.gp_weight; });
    t["fg.cls_weight"] = number_key<double>([](C& c) -> double& { return c.train.wgan.cls_weight; });
    t["fg.generator_lr"] = number_key<double>([](C& c) -> double& { return c.train.wgan.generator_optim.lr; });
    t["fg.critic_lr"] = number_key<double>([](C& c) -> double& { return c.train.wgan.critic_optim.lr; });
    t["fg.warmup_epochs"] = number_key<sz>([](C& c) -> sz& { return c.train.fg_warmup_epochs; });

    t["ood.method"] = {[](C& c, const std::string& k, const std::string& v) {
                         try {
                           c.train.ood.method = parse_ood_method(v);
                         } catch (const ParameterError& e) {
                           throw ConfigError(k, e.what());
                         }
                       },
                       [](const C& c) { return to_string(c.train.ood.method); }};
    t["ood.temperature"] = number_key<double>([](C& c) -> double& { return c.train.ood.temperature; });

    t["ts.validation_fraction"] = number_key<double>([](C& c) -> double& { return c.train.ts_validation_fraction; });
    t["ts.quantiles"] = number_key<sz>([](C& c) -> sz& { return c.train.ts_quantiles; });

    t["output.dir"] = {[](C& c, const std::string&, const std::string& v) { c.out_dir = v; },
                       [](const C& c) { return c.out_dir; }};
    return t;
  }();
  return table;
}

}  // namespace detail

inline std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, _] : detail::key_table()) out.push_back(k);
  return out;
}

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
  const auto& table = detail::key_table();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError(key, "unknown config key '" + key + "'");
  it->second.set(*this, key, value);
}

inline std::string ExperimentConfig::get(const std::string& key) const {
  const auto& table = detail::key_table();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError(key, "unknown config key '" + key + "'");
  return it->second.get(*this);
}

inline std::string ExperimentConfig::echo() const {
  std::string out;
  for (const auto& [k, h] : detail::key_table()) out += k + " = " + h.get(*this) + "\n";
  return out;
}

// Checks value ranges; throws ConfigError naming the offending key.
inline void validate(const ExperimentConfig& c) {
  auto check = [](auto&& fn, const char* key) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(key, e.what());
    }
  };
  if (!c.dataset_files) check([&] { c.data.validate(); }, "data");
  if (c.dataset_files && (c.dataset_files->features.empty() || c.dataset_files->attributes.empty() || c.dataset_files->split.empty()))
    throw ConfigError("data.features_path", "data.features_path, data.attributes_path and data.split_path must be set together");
  if (!(c.train.lambda >= 0.0)) throw ConfigError("run.lambda", "run.lambda must be >= 0");
  if (c.train.epochs < 1) throw ConfigError("run.epochs", "run.epochs must be >= 1");
  if (c.train.batch_size < 1) throw ConfigError("run.batch_size", "run.batch_size must be >= 1");
  if (c.train.syn_per_class < 0) throw ConfigError("run.syn_per_class", "run.syn_per_class must be >= 0");
  if (!(c.train.tau_o > 0.0)) throw ConfigError("model.tau_o", "model.tau_o must be > 0");
  if (!(c.train.tau_s > 0.0)) throw ConfigError("model.tau_s", "model.tau_s must be > 0");
  if (!(c.train.ood.temperature > 0.0)) throw ConfigError("ood.temperature", "ood.temperature must be > 0");
  if (c.train.wgan.n_critic < 1) throw ConfigError("fg.n_critic", "fg.n_critic must be >= 1");
  if (c.train.wgan.gp_weight < 0.0) throw ConfigError("fg.gp_weight", "fg.gp_weight must be >= 0");
  if (c.jobs < 1) throw ConfigError("run.jobs", "run.jobs must be >= 1");
  if (c.train.hidden_dim < 1 || c.train.embed_dim < 1 || c.train.projector_hidden < 1)
    throw ConfigError("model", "model sizes must be >= 1");
  check([&] { c.train.validate(); }, "ts");
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  ExperimentConfig c;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(origin, lineno, "expected 'key = value'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (auto it = seen.find(key); it != seen.end())
      throw ConfigError(key, "key '" + key + "' set twice (lines " + std::to_string(it->second) + " and " + std::to_string(lineno) + ")");
    seen[key] = lineno;
    c.set(key, value);
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

inline GzslDataset resolve_dataset(const ExperimentConfig& c) {
  return c.dataset_files ? load_dataset(*c.dataset_files) : make_synthetic(c.data);
}

}  // namespace d3gzsl
