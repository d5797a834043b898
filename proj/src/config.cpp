#include "dmue/config.hpp"

#include <fstream>
#include <functional>
#include <istream>
#include <sstream>

#include "dmue/format.hpp"

namespace dmue {

namespace {

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

std::string bool_text(bool b) { return b ? "true" : "false"; }

int to_int(const std::string& v) { return static_cast<int>(parse_int(v)); }

std::size_t to_size(const std::string& v) {
  const long long n = parse_int(v);
  if (n < 0) throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(n);
}

std::uint64_t to_u64(const std::string& v) {
  const long long n = parse_int(v);
  if (n < 0) throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::uint64_t>(n);
}

template <class T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& fmt) {
  std::string s;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) s += ',';
    s += fmt(items[i]);
  }
  return s;
}

std::vector<std::pair<int, int>> parse_pairs(const std::string& text) {
  std::vector<std::pair<int, int>> out;
  if (trim(text).empty() || trim(text) == "none") return out;
  for (const auto& item : split(text, ',')) {
    const auto parts = split(std::string(trim(item)), '-');
    if (parts.size() != 2) throw std::invalid_argument("confusable pair must look like a-b, got '" + item + "'");
    out.emplace_back(to_int(std::string(trim(parts[0]))), to_int(std::string(trim(parts[1]))));
  }
  return out;
}

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    auto dbl = [&](const char* name, auto member) {
      k.push_back({name, [member](RunConfig& c, const std::string& v) { member(c) = parse_double(v); },
                   [member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); }});
    };
    auto integer = [&](const char* name, auto member) {
      k.push_back({name, [member](RunConfig& c, const std::string& v) { member(c) = to_int(v); },
                   [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }});
    };
    auto size = [&](const char* name, auto member) {
      k.push_back({name, [member](RunConfig& c, const std::string& v) { member(c) = to_size(v); },
                   [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); }});
    };
    auto flag = [&](const char* name, auto member) {
      k.push_back({name, [member](RunConfig& c, const std::string& v) { member(c) = parse_bool(v); },
                   [member](const RunConfig& c) { return bool_text(member(const_cast<RunConfig&>(c))); }});
    };

    // data
    integer("classes", [](RunConfig& c) -> int& { return c.data.classes; });
    integer("dim", [](RunConfig& c) -> int& { return c.data.dim; });
    size("samples_per_class", [](RunConfig& c) -> std::size_t& { return c.data.samples_per_class; });
    size("test_per_class", [](RunConfig& c) -> std::size_t& { return c.data.test_per_class; });
    dbl("spread", [](RunConfig& c) -> double& { return c.data.spread; });
    dbl("separation", [](RunConfig& c) -> double& { return c.data.separation; });
    dbl("confusable_distance", [](RunConfig& c) -> double& { return c.data.confusable_distance; });
    k.push_back({"confusable_pairs",
                 [](RunConfig& c, const std::string& v) { c.data.confusable_pairs = parse_pairs(v); },
                 [](const RunConfig& c) {
                   if (c.data.confusable_pairs.empty()) return std::string("none");
                   return join<std::pair<int, int>>(c.data.confusable_pairs, [](const std::pair<int, int>& p) {
                     return std::to_string(p.first) + "-" + std::to_string(p.second);
                   });
                 }});
    dbl("noise_ratio", [](RunConfig& c) -> double& { return c.data.noise_ratio; });

    // training
    dbl("sharpen_t", [](RunConfig& c) -> double& { return c.train.sharpen_t; });
    dbl("omega", [](RunConfig& c) -> double& { return c.train.omega; });
    dbl("gamma", [](RunConfig& c) -> double& { return c.train.gamma; });
    integer("beta", [](RunConfig& c) -> int& { return c.train.beta; });
    integer("max_epoch", [](RunConfig& c) -> int& { return c.train.max_epoch; });
    integer("iters_per_epoch", [](RunConfig& c) -> int& { return c.train.iters_per_epoch; });
    size("batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
    dbl("lr", [](RunConfig& c) -> double& { return c.train.lr.initial; });
    k.push_back({"lr_decay_epochs",
                 [](RunConfig& c, const std::string& v) {
                   c.train.lr.decay_epochs.clear();
                   if (trim(v).empty() || trim(v) == "none") return;
                   for (const auto& item : split(v, ',')) c.train.lr.decay_epochs.push_back(to_int(std::string(trim(item))));
                 },
                 [](const RunConfig& c) {
                   if (c.train.lr.decay_epochs.empty()) return std::string("none");
                   return join<int>(c.train.lr.decay_epochs, [](const int& e) { return std::to_string(e); });
                 }});
    dbl("lr_decay_factor", [](RunConfig& c) -> double& { return c.train.lr.factor; });
    dbl("weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
    flag("decoupled_weight_decay", [](RunConfig& c) -> bool& { return c.train.decoupled_weight_decay; });
    flag("decay_uncertainty", [](RunConfig& c) -> bool& { return c.train.decay_uncertainty; });
    dbl("adam_beta1", [](RunConfig& c) -> double& { return c.train.adam_beta1; });
    dbl("adam_beta2", [](RunConfig& c) -> double& { return c.train.adam_beta2; });
    dbl("adam_eps", [](RunConfig& c) -> double& { return c.train.adam_eps; });
    integer("trunk_width", [](RunConfig& c) -> int& { return c.train.trunk_width; });
    integer("head_width", [](RunConfig& c) -> int& { return c.train.head_width; });
    k.push_back({"seed",
                 [](RunConfig& c, const std::string& v) {
                   c.train.seed = to_u64(v);
                   c.seed_given = true;
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    flag("checked", [](RunConfig& c) -> bool& { return c.train.checked; });
    flag("use_latent", [](RunConfig& c) -> bool& { return c.train.use_latent; });
    flag("use_sp", [](RunConfig& c) -> bool& { return c.train.use_sp; });
    flag("use_confidence", [](RunConfig& c) -> bool& { return c.train.use_confidence; });
    flag("confidence_grad_to_features", [](RunConfig& c) -> bool& { return c.train.confidence_grad_to_features; });
    flag("renormalize_soft", [](RunConfig& c) -> bool& { return c.train.renormalize_soft; });
    flag("aux_drop_empty_heads", [](RunConfig& c) -> bool& { return c.train.aux_drop_empty_heads; });

    // experiments
    k.push_back({"ratios", [](RunConfig& c, const std::string& v) { c.experiment.ratios = parse_double_list(v); },
                 [](const RunConfig& c) {
                   return join<double>(c.experiment.ratios, [](const double& r) { return format_double(r); });
                 }});
    k.push_back({"seeds",
                 [](RunConfig& c, const std::string& v) {
                   c.experiment.seeds = parse_seed_list(v);
                   c.seeds_given = true;
                 },
                 [](const RunConfig& c) {
                   return join<std::uint64_t>(c.experiment.seeds,
                                              [](const std::uint64_t& s) { return std::to_string(s); });
                 }});
    k.push_back({"output_dir", [](RunConfig& c, const std::string& v) { c.experiment.output_dir = v; },
                 [](const RunConfig& c) { return c.experiment.output_dir; }});
    integer("jobs", [](RunConfig& c) -> int& { return c.experiment.jobs; });
    dbl("ablation_ratio", [](RunConfig& c) -> double& { return c.experiment.ablation_ratio; });
    return k;
  }();
  return table;
}

const Key& find_key(const std::string& name) {
  for (const auto& k : keys()) {
    if (k.name == name) return k;
  }
  throw ConfigError("unknown config key '" + name + "'");
}

}  // namespace

SyntheticSpec DataConfig::to_spec(std::uint64_t seed) const {
  SyntheticSpec spec;
  spec.num_classes = classes;
  spec.feature_dim = dim;
  spec.samples_per_class = samples_per_class;
  spec.test_per_class = test_per_class;
  spec.seed = seed;
  spec.spread.assign(static_cast<std::size_t>(std::max(classes, 0)), spread);
  CenterLayout layout;
  layout.separation = separation;
  layout.confusable_distance = confusable_distance;
  layout.confusable_pairs = confusable_pairs;
  place_centers(spec, layout);
  spec.validate();
  return spec;
}

Dataset make_dataset(const DataConfig& data, std::uint64_t seed, double noise_ratio) {
  return inject_noise(generate(data.to_spec(seed)), noise_ratio, seed);
}

KeyValues parse_key_values(std::istream& in, const std::string& origin) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string_view body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key(trim(body.substr(0, eq)));
    std::string value(trim(body.substr(eq + 1)));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    kv.emplace_back(std::move(key), std::move(value));
  }
  return kv;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  return parse_key_values(in, path);
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& k : keys()) n.push_back(k.name);
    return n;
  }();
  return names;
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  const Key& k = find_key(key);
  try {
    k.set(config, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

void apply_settings(RunConfig& config, const KeyValues& kv) {
  for (const auto& [key, value] : kv) apply_setting(config, key, value);
}

std::string get_setting(const RunConfig& config, const std::string& key) { return find_key(key).get(config); }

std::string render_config(const RunConfig& config) {
  std::string out;
  for (const auto& k : keys()) out += "# " + k.name + " = " + k.get(config) + "\n";
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& item : split(text, ',')) out.push_back(parse_double(trim(item)));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split(text, ',')) out.push_back(to_u64(std::string(trim(item))));
  if (out.empty()) throw std::invalid_argument("empty seed list");
  return out;
}

}  // namespace dmue
