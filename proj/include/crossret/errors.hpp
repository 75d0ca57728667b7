#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace crossret {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedRecord : public Error {
 public:
  MalformedRecord(std::size_t line, std::string field, const std::string& what)
      : Error("line " + std::to_string(line) + ", field '" + field + "': " + what),
        line_(line),
        field_(std::move(field)) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

class DuplicateId : public Error {
 public:
  explicit DuplicateId(std::string id) : Error("duplicate record id '" + id + "'"), id_(std::move(id)) {}
  const std::string& id() const noexcept { return id_; }

 private:
  std::string id_;
};

class MixedImageRepresentation : public Error {
 public:
  explicit MixedImageRepresentation(std::size_t line)
      : Error("line " + std::to_string(line) + ": both image_features and image_pixels present") {}
};

class EmptyCorpus : public Error {
 public:
  EmptyCorpus() : Error("corpus is empty") {}
};

class DimensionMismatch : public Error {
 public:
  DimensionMismatch(std::size_t expected, std::size_t got)
      : Error("dimension mismatch: expected " + std::to_string(expected) + ", got " + std::to_string(got)) {}
};

class EmptySegmentSet : public Error {
 public:
  EmptySegmentSet() : Error("cannot aggregate an empty segment set") {}
};

class NonDivisibleImage : public Error {
 public:
  NonDivisibleImage(std::size_t h, std::size_t w, std::size_t patch)
      : Error("image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch size " +
              std::to_string(patch)) {}
};

class MissingEOS : public Error {
 public:
  MissingEOS() : Error("token sequence does not end with EOS") {}
};

class BatchTooSmall : public Error {
 public:
  explicit BatchTooSmall(std::size_t n) : Error("batch of " + std::to_string(n) + " is too small (need >= 2)") {}
};

class ZeroVector : public Error {
 public:
  ZeroVector() : Error("aggregated vector has zero norm") {}
};

class InsufficientSources : public Error {
 public:
  InsufficientSources(std::size_t sources, std::size_t targets)
      : Error("need at least " + std::to_string(targets) + " sources, got " + std::to_string(sources)) {}
};

class EmptyGallery : public Error {
 public:
  EmptyGallery() : Error("gallery is empty") {}
};

class DegenerateVariance : public Error {
 public:
  DegenerateVariance() : Error("all rows identical; covariance has no variance") {}
};

class TooFewPoints : public Error {
 public:
  TooFewPoints(std::size_t points, std::size_t k)
      : Error("k=" + std::to_string(k) + " exceeds point count " + std::to_string(points)) {}
};

class IncompatibleCheckpoint : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error("config field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class UnknownCommand : public Error {
 public:
  explicit UnknownCommand(const std::string& cmd) : Error("unknown command '" + cmd + "'") {}
};

}  // namespace crossret

namespace crossret {

class DivergedLoss : public Error {
 public:
  DivergedLoss(std::size_t epoch, std::size_t step)
      : Error("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step)) {}
};

}  // namespace crossret
