#include "palm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace palm {

RunConfig::RunConfig() : punctuation_tags(default_punctuation_tags()) { model.lambda = 0.01; }

std::string to_string(Precision p) { return p == Precision::float32 ? "float32" : "float64"; }

std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::learned: return "learned";
    case AttentionMode::right_branching: return "right_branching";
    case AttentionMode::disabled: return "disabled";
  }
  return "?";
}

std::string to_string(attention::GateMode m) { return m == attention::GateMode::fixed ? "fixed" : "conditioned"; }

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename N>
N parse_number(const std::string& key, const std::string& v) {
  N out{};
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("invalid value for " + key + ": '" + v + "'");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("invalid value for " + key + ": '" + v + "' (expected true/false)");
}

struct Binding {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename M>
Binding int_key(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return std::to_string(member(const_cast<RunConfig&>(c))); },
          [key, member](RunConfig& c, const std::string& v) { member(c) = parse_number<int>(key, v); }};
}

template <typename M>
Binding double_key(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return format_double(member(const_cast<RunConfig&>(c))); },
          [key, member](RunConfig& c, const std::string& v) { member(c) = parse_number<double>(key, v); }};
}

template <typename M>
Binding bool_key(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return std::string(member(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [key, member](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

template <typename M>
Binding string_key(std::string key, M member) {
  return {key, [member](const RunConfig& c) { return member(const_cast<RunConfig&>(c)); },
          [member](RunConfig& c, const std::string& v) { member(c) = v; }};
}

#define PALM_FIELD(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = [] {
    std::vector<Binding> b;
    b.push_back(int_key("vocab_size", PALM_FIELD(c.model.vocab_size)));
    b.push_back(int_key("embedding_dim", PALM_FIELD(c.model.embedding_dim)));
    b.push_back(int_key("hidden_dim", PALM_FIELD(c.model.hidden_dim)));
    b.push_back(int_key("num_layers", PALM_FIELD(c.model.num_layers)));
    b.push_back(int_key("rrnn_dim", PALM_FIELD(c.model.rrnn_dim)));
    b.push_back(int_key("max_span", PALM_FIELD(c.model.max_span)));
    b.push_back(int_key("scorer_dim", PALM_FIELD(c.model.scorer_dim)));
    b.push_back(int_key("attention_layer", PALM_FIELD(c.model.attention_layer)));
    b.push_back(double_key("lambda", PALM_FIELD(c.model.lambda)));
    b.push_back(double_key("dropout_embedding", PALM_FIELD(c.model.dropout_embedding)));
    b.push_back(double_key("dropout_hidden", PALM_FIELD(c.model.dropout_hidden)));
    b.push_back(double_key("dropout_output", PALM_FIELD(c.model.dropout_output)));
    b.push_back(bool_key("tie_weights", PALM_FIELD(c.model.tie_weights)));
    b.push_back({"gate_mode", [](const RunConfig& c) { return to_string(c.model.gate_mode); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "fixed") c.model.gate_mode = attention::GateMode::fixed;
                   else if (v == "conditioned") c.model.gate_mode = attention::GateMode::conditioned;
                   else throw ConfigError("invalid value for gate_mode: '" + v + "' (expected fixed/conditioned)");
                 }});
    b.push_back({"attention_mode", [](const RunConfig& c) { return to_string(c.model.attention_mode); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "learned") c.model.attention_mode = AttentionMode::learned;
                   else if (v == "right_branching") c.model.attention_mode = AttentionMode::right_branching;
                   else if (v == "disabled") c.model.attention_mode = AttentionMode::disabled;
                   else throw ConfigError("invalid value for attention_mode: '" + v + "'");
                 }});
    b.push_back(double_key("learning_rate", PALM_FIELD(c.optimizer.learning_rate)));
    b.push_back(double_key("beta1", PALM_FIELD(c.optimizer.beta1)));
    b.push_back(double_key("beta2", PALM_FIELD(c.optimizer.beta2)));
    b.push_back(double_key("epsilon", PALM_FIELD(c.optimizer.epsilon)));
    b.push_back(double_key("weight_decay", PALM_FIELD(c.optimizer.weight_decay)));
    b.push_back(double_key("clip_norm", PALM_FIELD(c.optimizer.clip_norm)));
    b.push_back(int_key("asgd_switch_epoch", PALM_FIELD(c.optimizer.asgd_switch_epoch)));
    b.push_back(int_key("asgd_nonmono", PALM_FIELD(c.optimizer.asgd_nonmono)));
    b.push_back(double_key("asgd_learning_rate", PALM_FIELD(c.optimizer.asgd_learning_rate)));
    b.push_back(string_key("train_path", PALM_FIELD(c.train_path)));
    b.push_back(string_key("valid_path", PALM_FIELD(c.valid_path)));
    b.push_back(string_key("test_path", PALM_FIELD(c.test_path)));
    b.push_back(string_key("train_trees", PALM_FIELD(c.train_trees)));
    b.push_back(string_key("valid_trees", PALM_FIELD(c.valid_trees)));
    b.push_back(string_key("checkpoint_path", PALM_FIELD(c.checkpoint_path)));
    b.push_back(string_key("metrics_path", PALM_FIELD(c.metrics_path)));
    b.push_back(int_key("batch_size", PALM_FIELD(c.batch_size)));
    b.push_back(int_key("eval_batch_size", PALM_FIELD(c.eval_batch_size)));
    b.push_back(int_key("bptt", PALM_FIELD(c.bptt)));
    b.push_back(int_key("epochs", PALM_FIELD(c.epochs)));
    b.push_back(int_key("min_count", PALM_FIELD(c.min_count)));
    b.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); }});
    b.push_back({"precision", [](const RunConfig& c) { return to_string(c.precision); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "float32") c.precision = Precision::float32;
                   else if (v == "float64") c.precision = Precision::float64;
                   else throw ConfigError("invalid value for precision: '" + v + "' (expected float32/float64)");
                 }});
    b.push_back(bool_key("shuffle_sentences", PALM_FIELD(c.shuffle_sentences)));
    b.push_back(bool_key("log_wall_time", PALM_FIELD(c.log_wall_time)));
    b.push_back(int_key("parse_max_len", PALM_FIELD(c.parse_max_len)));
    b.push_back({"punctuation_tags",
                 [](const RunConfig& c) {
                   std::string out;
                   for (const auto& t : c.punctuation_tags) out += (out.empty() ? "" : " ") + t;
                   return out;
                 },
                 [](RunConfig& c, const std::string& v) { c.punctuation_tags = split_tokens(v); }});
    b.push_back(int_key("wsj40_max_length", PALM_FIELD(c.wsj40_max_length)));
    return b;
  }();
  return table;
}

#undef PALM_FIELD

}  // namespace

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& b : bindings()) {
    if (b.key == key) {
      b.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig config;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;  // '#' is also a punctuation tag, so no trailing comments
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(number) + ": duplicate key '" + key + "'");
    try {
      set_config_value(config, key, trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(number) + ": " + e.what());
    }
  }
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& config) {
  std::string out;
  for (const auto& b : bindings()) out += b.key + " = " + b.get(config) + "\n";
  return out;
}

}  // namespace palm
