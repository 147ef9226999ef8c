#pragma once

#include <stdexcept>
#include <string>

namespace lipcert {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& msg) : Error(msg) {}
};

class NotPositiveDefinite : public Error {
 public:
  explicit NotPositiveDefinite(const std::string& msg) : Error(msg) {}
};

class SingularTriangular : public Error {
 public:
  explicit SingularTriangular(const std::string& msg) : Error(msg) {}
};

class SingularMatrix : public Error {
 public:
  explicit SingularMatrix(const std::string& msg) : Error(msg) {}
};

class RankDeficient : public Error {
 public:
  explicit RankDeficient(const std::string& msg) : Error(msg) {}
};

class NonConvergence : public Error {
 public:
  explicit NonConvergence(const std::string& msg) : Error(msg) {}
};

class OddWidth : public Error {
 public:
  explicit OddWidth(const std::string& msg) : Error(msg) {}
};

class EmptySet : public Error {
 public:
  explicit EmptySet(const std::string& msg) : Error(msg) {}
};

class EmptyPool : public Error {
 public:
  explicit EmptyPool(const std::string& msg) : Error(msg) {}
};

class EmptyDataset : public Error {
 public:
  explicit EmptyDataset(const std::string& msg) : Error(msg) {}
};

class DivergedLoss : public Error {
 public:
  DivergedLoss(const std::string& msg, std::size_t epoch)
      : Error(msg), epoch(epoch) {}
  std::size_t epoch;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace lipcert
