#include "lipcert/cli/config.hpp"

#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "lipcert/errors.hpp"

namespace lipcert::cli {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (errno != 0 || end == v.c_str() || *end != '\0' || v[0] == '-')
    throw ConfigError("config: '" + key + "' wants a non-negative integer, "
                      "got '" + v + "'");
  return x;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (errno != 0 || end == v.c_str() || *end != '\0' || !std::isfinite(x))
    throw ConfigError("config: '" + key + "' wants a number, got '" + v +
                      "'");
  return x;
}

layers::Shape parse_shape(const std::string& v) {
  layers::Shape shape;
  std::istringstream is(v);
  std::string part;
  while (std::getline(is, part, 'x')) {
    part = trim(part);
    shape.push_back(parse_size("input", part));
    if (shape.back() == 0)
      throw ConfigError("config: input dimensions must be positive");
  }
  if (shape.size() != 1 && shape.size() != 3)
    throw ConfigError("config: input must be 'n' or 'c x h x w', got '" + v +
                      "'");
  return shape;
}

const std::set<std::string> kMechanisms = {
    "gloro-regularized", "cayley", "matexp", "cholesky-residual",
    "lot",               "aol",    "sll",    "sandwich"};

}  // namespace

double parse_epsilon(const std::string& token) {
  const std::string t = trim(token);
  if (t.empty()) throw ConfigError("config: empty epsilon");
  const auto slash = t.find('/');
  if (slash != std::string::npos) {
    const std::uint64_t num = parse_u64("epsilon", trim(t.substr(0, slash)));
    const std::uint64_t den = parse_u64("epsilon", trim(t.substr(slash + 1)));
    if (den == 0) throw ConfigError("config: epsilon denominator is zero");
    return static_cast<double>(num) / static_cast<double>(den);
  }
  const double x = parse_double("epsilon", t);
  if (x < 0.0) throw ConfigError("config: epsilon must be >= 0");
  return x;
}

std::vector<double> parse_epsilon_list(const std::string& csv) {
  std::vector<double> out;
  std::istringstream is(csv);
  std::string part;
  while (std::getline(is, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(parse_epsilon(part));
  }
  return out;
}

RunConfig parse_config(const std::string& text) {
  struct Entry {
    std::string key, value;
  };
  std::map<std::string, std::vector<Entry>> sections;

  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "train" && section != "data" &&
          section != "certify")
        throw ConfigError("config: unknown section [" + section + "]");
      sections[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": key outside any section");
    sections[section].push_back(
        {trim(line.substr(0, eq)), trim(line.substr(eq + 1))});
  }

  RunConfig cfg;

  if (auto it = sections.find("model"); it != sections.end()) {
    // apply a preset first so explicit keys override it regardless of order
    for (const Entry& e : it->second) {
      if (e.key != "preset") continue;
      if (e.value == "desk") {
        cfg.model = ModelConfig{};
      } else if (e.value == "paper") {
        cfg.model.blocks = 12;
        cfg.model.channels = 512;
        cfg.model.dense_depth = 8;
        cfg.model.dense_width = 2048;
      } else {
        throw ConfigError("config: unknown preset '" + e.value + "'");
      }
    }
    for (const Entry& e : it->second) {
      if (e.key == "preset") {
      } else if (e.key == "arch") {
        cfg.model.arch = e.value;
      } else if (e.key == "mechanism") {
        cfg.model.mechanism = e.value;
      } else if (e.key == "blocks") {
        cfg.model.blocks = parse_size(e.key, e.value);
      } else if (e.key == "channels") {
        cfg.model.channels = parse_size(e.key, e.value);
      } else if (e.key == "dense_depth") {
        cfg.model.dense_depth = parse_size(e.key, e.value);
      } else if (e.key == "dense_width") {
        cfg.model.dense_width = parse_size(e.key, e.value);
      } else if (e.key == "classes") {
        cfg.model.classes = parse_size(e.key, e.value);
      } else if (e.key == "input") {
        cfg.model.input_shape = parse_shape(e.value);
      } else {
        throw ConfigError("config: unknown key '" + e.key + "' in [model]");
      }
    }
  }

  if (auto it = sections.find("train"); it != sections.end()) {
    for (const Entry& e : it->second) {
      if (e.key == "epsilon") {
        cfg.train.epsilon_train = parse_epsilon(e.value);
      } else if (e.key == "epochs") {
        cfg.train.epochs = parse_size(e.key, e.value);
      } else if (e.key == "batch") {
        cfg.train.mix.batch_size = parse_size(e.key, e.value);
      } else if (e.key == "real_parts") {
        cfg.train.mix.real_parts = parse_size(e.key, e.value);
      } else if (e.key == "generated_parts") {
        cfg.train.mix.generated_parts = parse_size(e.key, e.value);
      } else if (e.key == "lr") {
        cfg.train.learning_rate = parse_double(e.key, e.value);
      } else if (e.key == "momentum") {
        cfg.train.momentum = parse_double(e.key, e.value);
      } else if (e.key == "ramp") {
        cfg.train.ramp_fraction = parse_double(e.key, e.value);
      } else if (e.key == "method") {
        cfg.train.method = certify::method_from_name(e.value);
      } else if (e.key == "seed") {
        cfg.train.seed = parse_u64(e.key, e.value);
      } else if (e.key == "eval_epsilons") {
        cfg.train.eval_epsilons = parse_epsilon_list(e.value);
      } else {
        throw ConfigError("config: unknown key '" + e.key + "' in [train]");
      }
    }
  }

  if (auto it = sections.find("data"); it != sections.end()) {
    for (const Entry& e : it->second) {
      if (e.key == "task") {
        cfg.data.task = e.value;
      } else if (e.key == "train_count") {
        cfg.data.train_count = parse_size(e.key, e.value);
      } else if (e.key == "eval_count") {
        cfg.data.eval_count = parse_size(e.key, e.value);
      } else if (e.key == "seed") {
        cfg.data.seed = parse_u64(e.key, e.value);
      } else if (e.key == "gen_count") {
        cfg.data.gen_count = parse_size(e.key, e.value);
      } else if (e.key == "filter_fraction") {
        cfg.data.filter_fraction = parse_double(e.key, e.value);
      } else if (e.key == "scorer_epochs") {
        cfg.data.scorer_epochs = parse_size(e.key, e.value);
      } else {
        throw ConfigError("config: unknown key '" + e.key + "' in [data]");
      }
    }
  }

  if (auto it = sections.find("certify"); it != sections.end()) {
    for (const Entry& e : it->second) {
      if (e.key == "method") {
        cfg.certify_method = certify::method_from_name(e.value);
      } else if (e.key == "epsilons") {
        cfg.certify_epsilons = parse_epsilon_list(e.value);
      } else {
        throw ConfigError("config: unknown key '" + e.key +
                          "' in [certify]");
      }
    }
  }

  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void RunConfig::validate() const {
  if (model.arch != "dense" && model.arch != "liresnet")
    throw ConfigError("config: arch must be dense or liresnet");
  if (!kMechanisms.count(model.mechanism))
    throw ConfigError("config: unknown mechanism '" + model.mechanism + "'");
  if (model.classes < 2) throw ConfigError("config: classes must be >= 2");
  if (model.dense_depth == 0)
    throw ConfigError("config: dense_depth must be >= 1");
  if (model.dense_width < 2 || model.dense_width % 2 != 0)
    throw ConfigError("config: dense_width must be even and >= 2");
  if (model.arch == "dense") {
    if (model.input_shape.size() != 1)
      throw ConfigError("config: dense arch wants a flat input");
  } else {
    if (model.input_shape.size() != 3)
      throw ConfigError("config: liresnet wants a c x h x w input");
    if (model.blocks == 0)
      throw ConfigError("config: blocks must be >= 1");
    if (model.channels < 2 || model.channels % 2 != 0)
      throw ConfigError("config: channels must be even and >= 2");
  }

  if (data.task == "two-moons") {
    if (model.classes != 2)
      throw ConfigError("config: two-moons is a 2-class task");
    if (model.input_shape != layers::Shape{2})
      throw ConfigError("config: two-moons wants input = 2");
  } else if (data.task == "synth-images") {
    if (model.classes < 2 || model.classes > 4)
      throw ConfigError("config: synth-images supports 2-4 classes");
    if (model.input_shape != layers::Shape{1, 8, 8})
      throw ConfigError("config: synth-images wants input = 1x8x8");
  } else {
    throw ConfigError("config: unknown task '" + data.task + "'");
  }
  if (data.train_count == 0 || data.eval_count == 0)
    throw ConfigError("config: dataset counts must be >= 1");
  if (data.filter_fraction < 0.0 || data.filter_fraction >= 1.0)
    throw ConfigError("config: filter_fraction must lie in [0, 1)");

  // the generated pool and the batch recipe must agree
  if (train.mix.generated_parts > 0 && data.gen_count == 0)
    throw ConfigError(
        "config: generated_parts > 0 needs gen_count > 0 in [data]");
  if (data.gen_count > 0 && train.mix.generated_parts == 0)
    throw ConfigError(
        "config: gen_count > 0 but the batch mix never uses it");
  if (data.gen_count > 0 && data.scorer_epochs == 0)
    throw ConfigError("config: scorer_epochs must be >= 1");

  train.validate();
  for (double e : certify_epsilons)
    if (e < 0.0) throw ConfigError("config: certify epsilons must be >= 0");
}

layers::Network build_network(const ModelConfig& m) {
  if (m.arch == "dense")
    return train::make_dense_backbone(m.mechanism, m.input_shape[0],
                                      m.dense_width, m.dense_depth,
                                      m.classes);

  const std::size_t c = m.input_shape[0], h = m.input_shape[1],
                    w = m.input_shape[2];
  layers::Network net;
  net.input_shape = m.input_shape;
  net.layers.push_back(
      std::make_unique<layers::ConvGloro>(c, m.channels, h, w, 3));
  net.layers.push_back(std::make_unique<layers::MinMaxLayer>(
      layers::Shape{m.channels, h, w}));
  for (std::size_t b = 0; b < m.blocks; ++b) {
    net.layers.push_back(
        std::make_unique<layers::LiresnetBlock>(m.channels, h, w, 3));
    net.layers.push_back(std::make_unique<layers::MinMaxLayer>(
        layers::Shape{m.channels, h, w}));
  }
  net.layers.push_back(std::make_unique<layers::Flatten>(m.channels, h, w));
  train::append_dense_stack(net, m.mechanism, m.channels * h * w,
                            m.dense_width, m.dense_depth);
  net.layers.push_back(
      std::make_unique<layers::Head>(m.dense_width, m.classes));
  net.validate();
  return net;
}

}  // namespace lipcert::cli
