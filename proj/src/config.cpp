// SPDX-License-Identifier: Apache-2.0

#include "seqlora/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

namespace seqlora {

std::string to_string(EntrySampler s) {
  switch (s) {
    case EntrySampler::gaussian: return "gaussian";
    case EntrySampler::rademacher: return "rademacher";
    case EntrySampler::uniform: return "uniform";
  }
  return "?";
}

EntrySampler parse_sampler(const std::string& s) {
  if (s == "gaussian") return EntrySampler::gaussian;
  if (s == "rademacher") return EntrySampler::rademacher;
  if (s == "uniform") return EntrySampler::uniform;
  throw std::invalid_argument(fmt::format("unknown sampler '{}' (expected gaussian, rademacher or uniform)", s));
}

namespace {

std::string where(const std::string& source, const YAML::Node& n) {
  const YAML::Mark m = n.Mark();
  if (m.is_null()) return source;
  return fmt::format("{}:{}", source, m.line + 1);
}

// A mapping whose keys must all be consumed.
class Block {
 public:
  Block(const YAML::Node& node, std::string name, std::string source)
      : node_(node), name_(std::move(name)), source_(std::move(source)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) {
      throw ConfigError(fmt::format("{}: '{}' must be a mapping", where(source_, node_), name_));
    }
  }

  bool present() const { return node_ && node_.IsMap(); }

  YAML::Node child(const std::string& key) {
    seen_.insert(key);
    if (!present()) return YAML::Node();
    return node_[key];
  }

  template <class T, class Convert>
  void get(const std::string& key, T& out, Convert convert) {
    const YAML::Node v = child(key);
    if (!v || v.IsNull()) return;
    try {
      out = convert(v);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(fmt::format("{}: bad value for '{}.{}': {}", where(source_, v), name_, key, e.what()));
    }
  }

  void get(const std::string& key, double& out) {
    get(key, out, [](const YAML::Node& v) { return v.as<double>(); });
  }
  void get(const std::string& key, bool& out) {
    get(key, out, [](const YAML::Node& v) { return v.as<bool>(); });
  }
  void get(const std::string& key, std::string& out) {
    get(key, out, [](const YAML::Node& v) { return v.as<std::string>(); });
  }
  void get(const std::string& key, std::size_t& out) {
    get(key, out, [](const YAML::Node& v) {
      const long long x = v.as<long long>();
      if (x < 0) throw std::invalid_argument(fmt::format("must be >= 0, got {}", x));
      return static_cast<std::size_t>(x);
    });
  }

  void finish() const {
    if (!present()) return;
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      const std::string key = it->first.as<std::string>();
      if (!seen_.count(key)) {
        throw ConfigError(fmt::format("{}: unknown key '{}' in {}", where(source_, it->first), key, name_));
      }
    }
  }

  const std::string& source() const { return source_; }

 private:
  YAML::Node node_;
  std::string name_;
  std::string source_;
  std::set<std::string> seen_;
};

std::vector<double> double_list(const YAML::Node& v) {
  if (!v.IsSequence()) throw std::invalid_argument("expected a list");
  std::vector<double> out;
  for (const auto& e : v) out.push_back(e.as<double>());
  return out;
}

SpectrumSpec parse_spectrum(const YAML::Node& node, const std::string& source, std::size_t index) {
  Block b(node, fmt::format("task.spectra[{}]", index), source);
  SpectrumSpec s;
  b.get("profile", s.profile, [](const YAML::Node& v) { return parse_spectrum_profile(v.as<std::string>()); });
  b.get("level", s.level);
  b.get("ratio", s.ratio);
  b.get("spike_count", s.spike_count);
  b.get("spike_magnitude", s.spike_magnitude);
  b.get("values", s.explicit_values, double_list);
  b.get("rotation_seed", s.rotation_seed,
        [](const YAML::Node& v) { return std::optional<std::uint64_t>(v.as<std::uint64_t>()); });
  b.finish();
  return s;
}

void parse_task(const YAML::Node& node, const std::string& source, TaskBlock& t) {
  Block b(node, "task", source);
  b.get("kind", t.kind, [](const YAML::Node& v) { return parse_task_kind(v.as<std::string>()); });
  b.get("m", t.m);
  b.get("n", t.n);
  b.get("concepts", t.concepts);
  b.get("layers", t.layers);
  b.get("activation", t.activation, [](const YAML::Node& v) { return parse_activation(v.as<std::string>()); });
  b.get("noise", t.noise);
  b.get("p", t.p);
  b.get("mixing", t.mixing);
  const YAML::Node sp = b.child("spectra");
  if (sp && !sp.IsNull()) {
    if (!sp.IsSequence()) throw ConfigError(fmt::format("{}: task.spectra must be a list", where(source, sp)));
    t.spectra.clear();
    for (std::size_t i = 0; i < sp.size(); ++i) t.spectra.push_back(parse_spectrum(sp[i], source, i));
  }
  b.finish();
}

StepMode parse_step(const YAML::Node& v, double& value) {
  const std::string s = v.as<std::string>();
  if (s == "theoretical") return StepMode::theoretical;
  value = v.as<double>();
  return StepMode::fixed;
}

void parse_optimizer_block(const YAML::Node& node, const std::string& source, RunConfig& cfg) {
  Block b(node, "optimizer", source);
  BilevelConfig& c = cfg.bilevel;
  b.get("method", cfg.optimizer, [](const YAML::Node& v) { return parse_optimizer(v.as<std::string>()); });
  b.get("rank", c.rank);
  b.get("K", c.K);
  b.get("S_B", c.S_B);
  b.get("S_A_prime", c.S_A_prime);
  b.get("alpha", c.alpha_mode, [&](const YAML::Node& v) { return parse_step(v, c.alpha_value); });
  b.get("beta", c.beta_mode, [&](const YAML::Node& v) { return parse_step(v, c.beta_value); });
  b.get("epsilon", c.epsilon);
  b.get("hessian_point", c.hessian_point, [](const YAML::Node& v) { return parse_hessian_point(v.as<std::string>()); });
  b.get("a_restart", c.a_restart, [](const YAML::Node& v) { return parse_a_restart(v.as<std::string>()); });
  b.get("init_scale", c.init_scale);
  b.get("max_halvings", c.max_halvings);
  Block k(b.child("constants"), "optimizer.constants", source);
  k.get("pairs", c.constants.pairs);
  k.get("rho_pairs", c.constants.rho_pairs);
  k.get("radius_mode", c.constants.radius_mode, [](const YAML::Node& v) { return parse_radius_mode(v.as<std::string>()); });
  k.get("radius", c.constants.radius);
  k.get("radius_floor", c.constants.radius_floor);
  k.get("safety", c.constants.safety);
  k.finish();
  b.finish();
}

void parse_study(const YAML::Node& node, const std::string& source, StudyBlock& s) {
  Block b(node, "study", source);
  b.get("forgetting", s.forgetting);
  b.get("basis", s.basis);
  b.get("hw", s.hw);
  b.get("e2e", s.e2e);
  b.get("basis_trials", s.basis_trials);
  b.get("hw_samples", s.hw_samples);
  b.get("hw_tokens", s.hw_tokens);
  b.get("sampler", s.sampler, [](const YAML::Node& v) { return parse_sampler(v.as<std::string>()); });
  b.get("xi", s.xi, double_list);
  b.get("c1_grid", s.c1_grid, double_list);
  b.get("e2e_xi", s.e2e_xi);
  b.get("lipschitz_trials", s.lipschitz_trials);
  b.get("lipschitz_radius", s.lipschitz_radius);
  b.get("parallel", s.parallel);
  b.finish();
}

void parse_sweep(const YAML::Node& node, const std::string& source, SweepBlock& s) {
  Block b(node, "sweep", source);
  b.get("seeds", s.seeds, [](const YAML::Node& v) {
    if (!v.IsSequence()) throw std::invalid_argument("expected a list");
    std::vector<std::uint64_t> out;
    for (const auto& e : v) out.push_back(e.as<std::uint64_t>());
    return out;
  });
  b.get("optimizers", s.optimizers, [](const YAML::Node& v) {
    if (!v.IsSequence()) throw std::invalid_argument("expected a list");
    std::vector<OptimizerKind> out;
    for (const auto& e : v) out.push_back(parse_optimizer(e.as<std::string>()));
    return out;
  });
  b.finish();
}

RunConfig from_node(const YAML::Node& root, const std::string& source) {
  RunConfig cfg;
  Block top(root, "config", source);
  top.get("seed", cfg.seed, [](const YAML::Node& v) { return v.as<std::uint64_t>(); });
  top.get("output", cfg.output);
  parse_task(top.child("task"), source, cfg.task);
  parse_optimizer_block(top.child("optimizer"), source, cfg);
  parse_study(top.child("study"), source, cfg.study);
  parse_sweep(top.child("sweep"), source, cfg.sweep);
  top.finish();
  cfg.validate();
  return cfg;
}

}  // namespace

void RunConfig::validate() const {
  const TaskBlock& t = task;
  if (t.m == 0 || t.n == 0) throw ConfigError("task.m and task.n must be >= 1");
  if (t.concepts == 0) throw ConfigError("task.concepts must be >= 1");
  if (t.kind == TaskKind::deep) {
    if (t.layers < 2) throw ConfigError(fmt::format("deep tasks need task.layers >= 2, got {}", t.layers));
    if (t.spectra.size() != 1 && t.spectra.size() != t.layers) {
      throw ConfigError(fmt::format("deep task with {} layers needs 1 or {} spectra, got {}", t.layers, t.layers,
                                    t.spectra.size()));
    }
  } else {
    if (t.layers != 1) throw ConfigError(fmt::format("linear tasks have exactly one layer, got {}", t.layers));
    if (t.spectra.size() != 1 && t.spectra.size() != t.concepts) {
      throw ConfigError(fmt::format("stream of {} concepts needs 1 or {} spectra, got {}", t.concepts, t.concepts,
                                    t.spectra.size()));
    }
  }
  if (t.spectra.empty()) throw ConfigError("task.spectra must not be empty");
  for (std::size_t i = 0; i < t.spectra.size(); ++i) {
    try {
      (void)t.spectra[i].eigenvalues(t.m);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(fmt::format("task.spectra[{}]: {}", i, e.what()));
    }
  }
  if (!(t.noise >= 0.0)) throw ConfigError("task.noise must be >= 0");
  if (!(t.mixing >= 0.0 && t.mixing <= 1.0)) throw ConfigError("task.mixing must be in [0, 1]");
  if (t.kind != TaskKind::linear_population && t.p == 0) throw ConfigError("task.p must be >= 1 for batch tasks");

  try {
    bilevel.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(fmt::format("optimizer: {}", e.what()));
  }
  if (t.concepts * bilevel.rank > t.m) {
    throw ConfigError(fmt::format(
        "capacity: {} concepts of rank {} need {} basis columns but m = {} (at most {} concepts fit)", t.concepts,
        bilevel.rank, t.concepts * bilevel.rank, t.m, t.m / bilevel.rank));
  }

  if (study.xi.empty()) throw ConfigError("study.xi must not be empty");
  for (double x : study.xi) {
    if (!(x > 0.0 && x < 1.0)) throw ConfigError(fmt::format("study.xi entries must be in (0, 1), got {}", x));
  }
  if (!(study.e2e_xi > 0.0 && study.e2e_xi < 1.0)) throw ConfigError("study.e2e_xi must be in (0, 1)");
  if (study.c1_grid.empty()) throw ConfigError("study.c1_grid must not be empty");
  for (double c : study.c1_grid) {
    if (!(c > 0.0)) throw ConfigError(fmt::format("study.c1_grid entries must be > 0, got {}", c));
  }
  if (study.hw_tokens == 0) throw ConfigError("study.hw_tokens must be >= 1");
  if (!(study.lipschitz_radius > 0.0)) throw ConfigError("study.lipschitz_radius must be > 0");
  if (sweep.seeds.empty() || sweep.optimizers.empty()) throw ConfigError("sweep lists must not be empty");
}

RunConfig parse_config_string(const std::string& text, const std::string& source) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("{}:{}: syntax error: {}", source, e.mark.line + 1, e.msg));
  }
  try {
    return from_node(root, source);
  } catch (const ConfigError&) {
    throw;
  } catch (const YAML::Exception& e) {
    throw ConfigError(fmt::format("{}:{}: {}", source, e.mark.line + 1, e.msg));
  }
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(fmt::format("cannot open config file '{}'", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_string(ss.str(), path.string());
}

namespace {

void emit_step(YAML::Emitter& out, StepMode mode, double value) {
  if (mode == StepMode::theoretical) {
    out << "theoretical";
  } else {
    out << value;
  }
}

}  // namespace

std::string serialize_config(const RunConfig& cfg) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "seed" << YAML::Value << cfg.seed;
  out << YAML::Key << "output" << YAML::Value << YAML::DoubleQuoted << cfg.output;

  const TaskBlock& t = cfg.task;
  out << YAML::Key << "task" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << to_string(t.kind);
  out << YAML::Key << "m" << YAML::Value << t.m;
  out << YAML::Key << "n" << YAML::Value << t.n;
  out << YAML::Key << "concepts" << YAML::Value << t.concepts;
  out << YAML::Key << "layers" << YAML::Value << t.layers;
  out << YAML::Key << "activation" << YAML::Value << to_string(t.activation);
  out << YAML::Key << "noise" << YAML::Value << t.noise;
  out << YAML::Key << "p" << YAML::Value << t.p;
  out << YAML::Key << "mixing" << YAML::Value << t.mixing;
  out << YAML::Key << "spectra" << YAML::Value << YAML::BeginSeq;
  for (const SpectrumSpec& s : t.spectra) {
    out << YAML::BeginMap;
    out << YAML::Key << "profile" << YAML::Value << to_string(s.profile);
    out << YAML::Key << "level" << YAML::Value << s.level;
    out << YAML::Key << "ratio" << YAML::Value << s.ratio;
    out << YAML::Key << "spike_count" << YAML::Value << s.spike_count;
    out << YAML::Key << "spike_magnitude" << YAML::Value << s.spike_magnitude;
    if (!s.explicit_values.empty()) {
      out << YAML::Key << "values" << YAML::Value << YAML::Flow << s.explicit_values;
    }
    if (s.rotation_seed) out << YAML::Key << "rotation_seed" << YAML::Value << *s.rotation_seed;
    out << YAML::EndMap;
  }
  out << YAML::EndSeq << YAML::EndMap;

  const BilevelConfig& c = cfg.bilevel;
  out << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "method" << YAML::Value << to_string(cfg.optimizer);
  out << YAML::Key << "rank" << YAML::Value << c.rank;
  out << YAML::Key << "K" << YAML::Value << c.K;
  out << YAML::Key << "S_B" << YAML::Value << c.S_B;
  out << YAML::Key << "S_A_prime" << YAML::Value << c.S_A_prime;
  out << YAML::Key << "alpha" << YAML::Value;
  emit_step(out, c.alpha_mode, c.alpha_value);
  out << YAML::Key << "beta" << YAML::Value;
  emit_step(out, c.beta_mode, c.beta_value);
  out << YAML::Key << "epsilon" << YAML::Value << c.epsilon;
  out << YAML::Key << "hessian_point" << YAML::Value << to_string(c.hessian_point);
  out << YAML::Key << "a_restart" << YAML::Value << to_string(c.a_restart);
  out << YAML::Key << "init_scale" << YAML::Value << c.init_scale;
  out << YAML::Key << "max_halvings" << YAML::Value << c.max_halvings;
  out << YAML::Key << "constants" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "pairs" << YAML::Value << c.constants.pairs;
  out << YAML::Key << "rho_pairs" << YAML::Value << c.constants.rho_pairs;
  out << YAML::Key << "radius_mode" << YAML::Value << to_string(c.constants.radius_mode);
  out << YAML::Key << "radius" << YAML::Value << c.constants.radius;
  out << YAML::Key << "radius_floor" << YAML::Value << c.constants.radius_floor;
  out << YAML::Key << "safety" << YAML::Value << c.constants.safety;
  out << YAML::EndMap << YAML::EndMap;

  const StudyBlock& s = cfg.study;
  out << YAML::Key << "study" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "forgetting" << YAML::Value << s.forgetting;
  out << YAML::Key << "basis" << YAML::Value << s.basis;
  out << YAML::Key << "hw" << YAML::Value << s.hw;
  out << YAML::Key << "e2e" << YAML::Value << s.e2e;
  out << YAML::Key << "basis_trials" << YAML::Value << s.basis_trials;
  out << YAML::Key << "hw_samples" << YAML::Value << s.hw_samples;
  out << YAML::Key << "hw_tokens" << YAML::Value << s.hw_tokens;
  out << YAML::Key << "sampler" << YAML::Value << to_string(s.sampler);
  out << YAML::Key << "xi" << YAML::Value << YAML::Flow << s.xi;
  out << YAML::Key << "c1_grid" << YAML::Value << YAML::Flow << s.c1_grid;
  out << YAML::Key << "e2e_xi" << YAML::Value << s.e2e_xi;
  out << YAML::Key << "lipschitz_trials" << YAML::Value << s.lipschitz_trials;
  out << YAML::Key << "lipschitz_radius" << YAML::Value << s.lipschitz_radius;
  out << YAML::Key << "parallel" << YAML::Value << s.parallel;
  out << YAML::EndMap;

  out << YAML::Key << "sweep" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << cfg.sweep.seeds;
  out << YAML::Key << "optimizers" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (OptimizerKind k : cfg.sweep.optimizers) out << to_string(k);
  out << YAML::EndSeq << YAML::EndMap;

  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace seqlora
