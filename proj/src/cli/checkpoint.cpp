#include "lipcert/cli/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "lipcert/errors.hpp"

namespace lipcert::cli {

namespace {

constexpr const char* kTag = "lipcert-ckpt-v1";

std::string shape_str(const layers::Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

layers::Shape shape_from_str(const std::string& v) {
  layers::Shape s;
  std::istringstream is(v);
  std::string part;
  while (std::getline(is, part, 'x')) {
    char* end = nullptr;
    const unsigned long long x = std::strtoull(part.c_str(), &end, 10);
    if (end == part.c_str() || *end != '\0' || x == 0)
      throw IoError("checkpoint: bad input shape '" + v + "'");
    s.push_back(x);
  }
  if (s.empty()) throw IoError("checkpoint: bad input shape '" + v + "'");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& dir, layers::Network& net,
                     const std::string& config_echo, std::uint64_t seed) {
  std::filesystem::create_directories(dir);

  std::size_t count = 0;
  for (const Tensor* p : net.all_params()) count += p->size();

  std::ofstream man(dir + "/manifest.txt", std::ios::binary);
  if (!man) throw IoError("checkpoint: cannot write manifest in " + dir);
  man << kTag << '\n';
  man << "seed = " << seed << '\n';
  man << "input = " << shape_str(net.input_shape) << '\n';
  man << "param_count = " << count << '\n';
  for (const auto& layer : net.layers)
    man << "layer = " << layer->spec_line() << '\n';
  man << "config_begin\n" << config_echo;
  if (!config_echo.empty() && config_echo.back() != '\n') man << '\n';
  man << "config_end\n";
  if (!man) throw IoError("checkpoint: manifest write failed in " + dir);

  std::ofstream bin(dir + "/weights.bin", std::ios::binary);
  if (!bin) throw IoError("checkpoint: cannot write weights in " + dir);
  for (const Tensor* p : net.all_params())
    bin.write(reinterpret_cast<const char*>(p->data()),
              static_cast<std::streamsize>(p->size() * sizeof(double)));
  if (!bin) throw IoError("checkpoint: weight write failed in " + dir);
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream man(dir + "/manifest.txt", std::ios::binary);
  if (!man) throw IoError("checkpoint: cannot read manifest in " + dir);

  std::string line;
  if (!std::getline(man, line) || line != kTag)
    throw IoError("checkpoint: missing " + std::string(kTag) + " tag");

  Checkpoint ck;
  std::size_t declared = 0;
  bool have_count = false, have_input = false;
  std::vector<std::string> layer_lines;
  bool in_echo = false;
  while (std::getline(man, line)) {
    if (in_echo) {
      if (line == "config_end") {
        in_echo = false;
        continue;
      }
      ck.config_echo += line;
      ck.config_echo += '\n';
      continue;
    }
    if (line.empty()) continue;
    if (line == "config_begin") {
      in_echo = true;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("checkpoint: malformed manifest line '" + line + "'");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    while (!value.empty() && value.front() == ' ') value.erase(0, 1);
    if (key == "seed") {
      ck.seed = std::strtoull(value.c_str(), nullptr, 10);
    } else if (key == "input") {
      ck.net.input_shape = shape_from_str(value);
      have_input = true;
    } else if (key == "param_count") {
      declared = std::strtoull(value.c_str(), nullptr, 10);
      have_count = true;
    } else if (key == "layer") {
      layer_lines.push_back(value);
    } else {
      throw IoError("checkpoint: unknown manifest key '" + key + "'");
    }
  }
  if (in_echo) throw IoError("checkpoint: unterminated config echo");
  if (!have_input || !have_count || layer_lines.empty())
    throw IoError("checkpoint: manifest is incomplete");

  for (const std::string& spec : layer_lines)
    ck.net.layers.push_back(layers::make_layer_from_spec(spec));
  ck.net.validate();

  std::size_t count = 0;
  std::vector<Tensor*> params = ck.net.all_params();
  for (const Tensor* p : params) count += p->size();
  if (count != declared)
    throw IoError("checkpoint: param_count says " + std::to_string(declared) +
                  " but the layers hold " + std::to_string(count));

  std::ifstream bin(dir + "/weights.bin",
                    std::ios::binary | std::ios::ate);
  if (!bin) throw IoError("checkpoint: cannot read weights in " + dir);
  const auto bytes = static_cast<std::size_t>(bin.tellg());
  if (bytes != count * sizeof(double))
    throw IoError("checkpoint: weights.bin holds " + std::to_string(bytes) +
                  " bytes, expected " +
                  std::to_string(count * sizeof(double)));
  bin.seekg(0);
  for (Tensor* p : params) {
    bin.read(reinterpret_cast<char*>(p->data()),
             static_cast<std::streamsize>(p->size() * sizeof(double)));
  }
  if (!bin) throw IoError("checkpoint: weight read failed in " + dir);

  ck.net.refresh_converged();
  return ck;
}

}  // namespace lipcert::cli
