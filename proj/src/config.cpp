#include "medprompt/config.hpp"

#include <cstdlib>
#include <sstream>

namespace medprompt {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

int64_t parse_int(const std::string& key, const std::string& value) {
  size_t used = 0;
  int64_t v = 0;
  try {
    v = std::stoll(value, &used);
  } catch (const std::exception&) {
    fail("config: key '", key, "': expected an integer, got '", value, "'");
  }
  check(used == value.size(), "config: key '", key, "': trailing characters in '", value, "'");
  return v;
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  const int64_t v = parse_int(key, value);
  check(v >= 0, "config: key '", key, "': expected a non-negative integer, got '", value, "'");
  return static_cast<uint64_t>(v);
}

double parse_double(const std::string& key, const std::string& value) {
  size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    fail("config: key '", key, "': expected a number, got '", value, "'");
  }
  check(used == value.size(), "config: key '", key, "': trailing characters in '", value, "'");
  return v;
}

std::array<Index, 4> parse_int4(const std::string& key, const std::string& value) {
  std::array<Index, 4> out{};
  std::string rest = value;
  for (int i = 0; i < 4; ++i) {
    const bool last = i == 3;
    const auto comma = rest.find(',');
    check(last == (comma == std::string::npos), "config: key '", key,
          "': expected 4 comma-separated integers, got '", value, "'");
    const std::string tok = trim(last ? rest : rest.substr(0, comma));
    out[static_cast<size_t>(i)] = parse_int(key, tok);
    if (!last) rest = rest.substr(comma + 1);
  }
  return out;
}

std::string int4_text(const std::array<Index, 4>& v) {
  return str_cat(v[0], ",", v[1], ",", v[2], ",", v[3]);
}

}  // namespace

void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value) {
  TrainConfig& t = cfg.train;
  if (key == "precision") {
    check(value == "f32" || value == "f64", "config: precision must be f32 or f64, got '",
          value, "'");
    cfg.precision = value;
  } else if (key == "master_seed") {
    t.master_seed = parse_u64(key, value);
  } else if (key == "epochs") {
    t.epochs = parse_int(key, value);
  } else if (key == "lr") {
    t.lr = parse_double(key, value);
  } else if (key == "batch_size") {
    t.batch_size = parse_int(key, value);
  } else if (key == "lambda") {
    t.lambda = parse_double(key, value);
  } else if (key == "eval_interval") {
    t.eval_interval = parse_int(key, value);
  } else if (key == "n_train") {
    t.n_train = parse_int(key, value);
  } else if (key == "n_test") {
    t.n_test = parse_int(key, value);
  } else if (key == "mixup_prob") {
    t.mixup_prob = parse_double(key, value);
  } else if (key == "mixup_alpha") {
    t.mixup_alpha = parse_double(key, value);
  } else if (key == "ablation") {
    t.ablation = ablation_from_name(value);
  } else if (key == "model.in_channels") {
    t.model.in_channels = parse_int(key, value);
  } else if (key == "model.out_channels") {
    t.model.out_channels = parse_int(key, value);
  } else if (key == "model.base_channels") {
    t.model.base_channels = parse_int(key, value);
  } else if (key == "model.num_blocks") {
    t.model.num_blocks = parse_int4(key, value);
  } else if (key == "model.num_heads") {
    t.model.num_heads = parse_int4(key, value);
  } else if (key == "model.gdfn_expansion") {
    t.model.gdfn_expansion = parse_double(key, value);
  } else if (key == "model.num_prompts") {
    t.model.num_prompts = parse_int(key, value);
  } else if (key == "model.prompt_base_size") {
    t.model.prompt_base_size = parse_int(key, value);
  } else if (key == "model.spb_sites") {
    t.model.spb_sites = parse_int(key, value);
  } else if (key == "phantom.size") {
    t.phantom.size = parse_int(key, value);
  } else if (key == "phantom.min_ellipses") {
    t.phantom.min_ellipses = parse_int(key, value);
  } else if (key == "phantom.max_ellipses") {
    t.phantom.max_ellipses = parse_int(key, value);
  } else if (key == "phantom.num_classes") {
    t.phantom.num_classes = parse_int(key, value);
  } else {
    fail("config: unknown key '", key, "'");
  }
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    check(eq != std::string::npos, "config: line ", lineno, " is not key=value: '", raw, "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    check(!key.empty(), "config: line ", lineno, " has an empty key");
    apply_config_line(cfg, key, value);
  }
}

void apply_config_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  check(eq != std::string::npos, "config: override '", assignment, "' is not key=value");
  apply_config_line(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string effective_config_text(const RunConfig& cfg) {
  const TrainConfig& t = cfg.train;
  std::string out;
  out += "# run\n";
  out += str_cat("precision=", cfg.precision, "\n");
  out += str_cat("master_seed=", t.master_seed, "\n");
  out += str_cat("epochs=", t.epochs, "\n");
  out += str_cat("lr=", format_exact(t.lr), "\n");
  out += str_cat("batch_size=", t.batch_size, "\n");
  out += str_cat("lambda=", format_exact(t.lambda), "\n");
  out += str_cat("eval_interval=", t.eval_interval, "\n");
  out += str_cat("n_train=", t.n_train, "\n");
  out += str_cat("n_test=", t.n_test, "\n");
  out += str_cat("mixup_prob=", format_exact(t.mixup_prob), "\n");
  out += str_cat("mixup_alpha=", format_exact(t.mixup_alpha), "\n");
  out += str_cat("ablation=", ablation_name(t.ablation), "\n");
  out += "# model\n";
  out += str_cat("model.in_channels=", t.model.in_channels, "\n");
  out += str_cat("model.out_channels=", t.model.out_channels, "\n");
  out += str_cat("model.base_channels=", t.model.base_channels, "\n");
  out += str_cat("model.num_blocks=", int4_text(t.model.num_blocks), "\n");
  out += str_cat("model.num_heads=", int4_text(t.model.num_heads), "\n");
  out += str_cat("model.gdfn_expansion=", format_exact(t.model.gdfn_expansion), "\n");
  out += str_cat("model.num_prompts=", t.model.num_prompts, "\n");
  out += str_cat("model.prompt_base_size=", t.model.prompt_base_size, "\n");
  out += str_cat("model.spb_sites=", t.model.spb_sites, "\n");
  out += "# data\n";
  out += str_cat("phantom.size=", t.phantom.size, "\n");
  out += str_cat("phantom.min_ellipses=", t.phantom.min_ellipses, "\n");
  out += str_cat("phantom.max_ellipses=", t.phantom.max_ellipses, "\n");
  out += str_cat("phantom.num_classes=", t.phantom.num_classes, "\n");
  return out;
}

}  // namespace medprompt
