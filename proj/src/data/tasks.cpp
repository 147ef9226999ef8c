#include "lipcert/data/tasks.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "lipcert/errors.hpp"

namespace lipcert::data {

Dataset make_two_moons(std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ConfigError("make_two_moons: count 0");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> jitter(-0.02, 0.02);

  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(i % 2);
    const double th = angle(rng);
    const double r = 0.16 + jitter(rng);
    Sample s;
    s.input = Tensor({2});
    if (cls == 0) {
      s.input[0] = 0.24 + r * std::cos(th);
      s.input[1] = 0.24 + r * std::sin(th);
    } else {
      s.input[0] = 0.76 - r * std::cos(th);
      s.input[1] = 0.76 - r * std::sin(th);
    }
    s.label = cls;
    out.push_back(std::move(s));
  }
  return out;
}

Dataset make_synth_images(std::size_t count, std::size_t classes,
                          std::uint64_t seed) {
  if (count == 0) throw ConfigError("make_synth_images: count 0");
  if (classes < 2 || classes > 4)
    throw ConfigError("make_synth_images: classes must be 2..4");
  static constexpr double kCenters[4][2] = {
      {2.0, 2.0}, {5.0, 5.0}, {2.0, 5.0}, {5.0, 2.0}};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.05);

  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t cls = i % classes;
    Sample s;
    s.input = Tensor({1, 8, 8});
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c) {
        const double dr = static_cast<double>(r) - kCenters[cls][0];
        const double dc = static_cast<double>(c) - kCenters[cls][1];
        const double bump = 0.9 * std::exp(-(dr * dr + dc * dc) / 4.5);
        s.input[r * 8 + c] = std::clamp(bump + noise(rng), 0.0, 1.0);
      }
    s.label = static_cast<int>(cls);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace lipcert::data
