#include "lipcert/data/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "lipcert/errors.hpp"
#include "lipcert/numerics/linalg.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian and written raw");

namespace lipcert::data {

const char* origin_name(Origin o) {
  return o == Origin::kReal ? "real" : "generated";
}

Origin origin_from_name(const std::string& name) {
  if (name == "real") return Origin::kReal;
  if (name == "generated") return Origin::kGenerated;
  throw IoError("unknown origin '" + name + "'");
}

void MixSpec::validate() const {
  if (real_parts == 0 && generated_parts == 0)
    throw ConfigError("mix: real and generated parts are both 0");
  const std::size_t parts = real_parts + generated_parts;
  if (batch_size == 0 || batch_size % parts != 0)
    throw ConfigError("mix: batch size must be a positive multiple of " +
                      std::to_string(parts));
}

std::size_t MixSpec::real_count() const {
  validate();
  return batch_size / (real_parts + generated_parts) * real_parts;
}

std::size_t MixSpec::generated_count() const {
  return batch_size - real_count();
}

Dataset filter_bottom_scores(const Dataset& samples, double fraction) {
  if (samples.empty()) throw EmptySet("filter_bottom_scores: empty input");
  if (!(fraction >= 0.0 && fraction < 1.0))
    throw ConfigError("filter_bottom_scores: fraction must be in [0,1)");
  for (const Sample& s : samples)
    if (!s.score.has_value())
      throw ConfigError("filter_bottom_scores: unscored sample");

  const std::size_t drop =
      static_cast<std::size_t>(fraction * static_cast<double>(samples.size()));
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  // ascending score; equal scores keep index order, so the earlier index is
  // dropped first
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) {
                     return *samples[a].score < *samples[b].score;
                   });
  std::vector<bool> dropped(samples.size(), false);
  for (std::size_t i = 0; i < drop; ++i) dropped[order[i]] = true;

  Dataset kept;
  kept.reserve(samples.size() - drop);
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (!dropped[i]) kept.push_back(samples[i]);
  return kept;
}

Dataset mix_batch(const Dataset& real_pool, const Dataset& gen_pool,
                  const MixSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  const std::size_t nr = spec.real_count(), ng = spec.generated_count();
  if (nr > 0 && real_pool.empty()) throw EmptyPool("mix_batch: real pool is empty");
  if (ng > 0 && gen_pool.empty())
    throw EmptyPool("mix_batch: generated pool is empty");

  Dataset batch;
  batch.reserve(spec.batch_size);
  if (nr > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, real_pool.size() - 1);
    for (std::size_t i = 0; i < nr; ++i) batch.push_back(real_pool[pick(rng)]);
  }
  if (ng > 0) {
    std::uniform_int_distribution<std::size_t> pick(0, gen_pool.size() - 1);
    for (std::size_t i = 0; i < ng; ++i) batch.push_back(gen_pool[pick(rng)]);
  }
  return batch;
}

SynthGenerator::SynthGenerator(const Dataset& real, std::size_t class_count,
                               std::uint64_t seed)
    : rng_(seed) {
  if (class_count < 2)
    throw ConfigError("synth_generator: need at least 2 classes");
  if (real.empty()) throw EmptySet("synth_generator: empty fit set");
  shape_ = real.front().input.shape();
  const std::size_t d = real.front().input.size();
  for (const Sample& s : real) {
    if (s.input.shape() != shape_)
      throw ShapeMismatch("synth_generator: inconsistent sample shapes");
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= class_count)
      throw ConfigError("synth_generator: label out of range");
  }

  mean_.assign(class_count, Tensor({d}));
  chol_.assign(class_count, Matrix({d, d}));
  std::vector<std::size_t> count(class_count, 0);
  for (const Sample& s : real) {
    count[static_cast<std::size_t>(s.label)] += 1;
    Tensor& m = mean_[static_cast<std::size_t>(s.label)];
    for (std::size_t i = 0; i < d; ++i) m[i] += s.input[i];
  }
  for (std::size_t c = 0; c < class_count; ++c) {
    if (count[c] == 0)
      throw EmptySet("synth_generator: no samples for class " +
                     std::to_string(c));
    for (std::size_t i = 0; i < d; ++i)
      mean_[c][i] /= static_cast<double>(count[c]);
  }

  for (std::size_t c = 0; c < class_count; ++c) {
    if (count[c] < 2) continue;  // point mass: factor stays zero
    Matrix cov({d, d});
    for (const Sample& s : real) {
      if (static_cast<std::size_t>(s.label) != c) continue;
      for (std::size_t i = 0; i < d; ++i) {
        const double di = s.input[i] - mean_[c][i];
        if (di == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j)
          cov(i, j) += di * (s.input[j] - mean_[c][j]);
      }
    }
    const double denom = static_cast<double>(count[c] - 1);
    for (std::size_t i = 0; i < d * d; ++i) cov[i] /= denom;
    try {
      chol_[c] = numerics::cholesky(cov);
    } catch (const NotPositiveDefinite&) {
      // fully degenerate class (e.g. identical inputs): keep the point mass
    }
  }
}

Sample SynthGenerator::next() {
  const std::size_t d = mean_.front().size();
  std::uniform_int_distribution<std::size_t> pick(0, mean_.size() - 1);
  const std::size_t c = pick(rng_);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> z(d);
  for (auto& x : z) x = gauss(rng_);

  Tensor out(shape_);
  const Matrix& l = chol_[c];
  for (std::size_t i = 0; i < d; ++i) {
    double v = mean_[c][i];
    for (std::size_t j = 0; j <= i; ++j) v += l(i, j) * z[j];
    out[i] = std::clamp(v, 0.0, 1.0);
  }
  Sample s;
  s.input = std::move(out);
  s.label = static_cast<int>(c);
  s.origin = Origin::kGenerated;
  return s;
}

Dataset SynthGenerator::draw(std::size_t count) {
  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(next());
  return out;
}

Dataset score_samples(const Scorer& scorer, Dataset samples) {
  for (Sample& s : samples) {
    if (s.origin != Origin::kGenerated) continue;
    const Tensor p = scorer(s.input);
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= p.size())
      throw ShapeMismatch("score_samples: pseudo-label outside scorer output");
    s.score = std::clamp(p[static_cast<std::size_t>(s.label)], 0.0, 1.0);
  }
  return samples;
}

namespace {

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
  std::uint32_t v = 0;
  if (!f.read(reinterpret_cast<char*>(&v), 4))
    throw IoError("truncated LCDS header in " + path);
  return v;
}

}  // namespace

void save_lcds(const std::string& path, const std::vector<Tensor>& tensors) {
  if (tensors.empty()) throw EmptyDataset("save_lcds: nothing to write");
  const auto& shape = tensors.front().shape();
  for (const Tensor& t : tensors)
    if (t.shape() != shape) throw ShapeMismatch("save_lcds: mixed shapes");

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write("LCDS", 4);
  write_u32(f, static_cast<std::uint32_t>(tensors.size()));
  write_u32(f, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t dim : shape) write_u32(f, static_cast<std::uint32_t>(dim));
  for (const Tensor& t : tensors)
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!f) throw IoError("short write to " + path);
}

std::vector<Tensor> load_lcds(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  char magic[4] = {};
  if (!f.read(magic, 4) || std::string(magic, 4) != "LCDS")
    throw IoError(path + " is not an LCDS file");
  const std::uint32_t count = read_u32(f, path);
  const std::uint32_t ndim = read_u32(f, path);
  if (count == 0 || ndim == 0 || ndim > 8)
    throw IoError("implausible LCDS header in " + path);
  std::vector<std::size_t> shape(ndim);
  std::size_t per = 1;
  for (auto& dim : shape) {
    dim = read_u32(f, path);
    if (dim == 0 || per > (1u << 28) / dim)
      throw IoError("implausible LCDS dims in " + path);
    per *= dim;
  }
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t(shape);
    if (!f.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(per * sizeof(double))))
      throw IoError("truncated LCDS payload in " + path);
    t.check_finite();
    out.push_back(std::move(t));
  }
  return out;
}

void save_dataset(const std::string& dir, const Dataset& set) {
  if (set.empty()) throw EmptyDataset("save_dataset: nothing to write");
  std::filesystem::create_directories(dir);
  std::vector<Tensor> inputs;
  inputs.reserve(set.size());
  for (const Sample& s : set) inputs.push_back(s.input);
  save_lcds(dir + "/samples.bin", inputs);

  std::ofstream f(dir + "/index.csv", std::ios::trunc);
  if (!f) throw IoError("cannot open " + dir + "/index.csv for writing");
  f << "offset,label,origin,score\n";
  char buf[64];
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Sample& s = set[i];
    if (s.score.has_value() && s.origin == Origin::kReal)
      throw ConfigError("save_dataset: score on a real sample");
    f << i << ',' << s.label << ',' << origin_name(s.origin) << ',';
    if (s.score.has_value()) {
      std::snprintf(buf, sizeof buf, "%.17g", *s.score);
      f << buf;
    }
    f << '\n';
  }
  if (!f) throw IoError("short write to " + dir + "/index.csv");
}

Dataset load_dataset(const std::string& dir) {
  const std::vector<Tensor> inputs = load_lcds(dir + "/samples.bin");
  std::ifstream f(dir + "/index.csv");
  if (!f) throw IoError("cannot open " + dir + "/index.csv");
  std::string line;
  if (!std::getline(f, line) || line != "offset,label,origin,score")
    throw IoError(dir + "/index.csv: bad header");

  Dataset out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string offset_s, label_s, origin_s, score_s;
    if (!std::getline(row, offset_s, ',') || !std::getline(row, label_s, ',') ||
        !std::getline(row, origin_s, ','))
      throw IoError(dir + "/index.csv: short row '" + line + "'");
    std::getline(row, score_s, ',');

    Sample s;
    std::size_t offset = 0;
    try {
      offset = std::stoul(offset_s);
      s.label = std::stoi(label_s);
    } catch (const std::exception&) {
      throw IoError(dir + "/index.csv: bad number in '" + line + "'");
    }
    if (offset >= inputs.size())
      throw IoError(dir + "/index.csv: offset beyond the blob");
    s.input = inputs[offset];
    s.origin = origin_from_name(origin_s);
    if (!score_s.empty()) {
      if (s.origin == Origin::kReal)
        throw IoError(dir + "/index.csv: score on a real sample");
      try {
        s.score = std::stod(score_s);
      } catch (const std::exception&) {
        throw IoError(dir + "/index.csv: bad score in '" + line + "'");
      }
    }
    out.push_back(std::move(s));
  }
  if (out.empty()) throw EmptyDataset(dir + "/index.csv has no rows");
  return out;
}

}  // namespace lipcert::data
