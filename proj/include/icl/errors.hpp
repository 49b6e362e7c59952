#pragma once

#include <stdexcept>
#include <string>

namespace icl {

// Invalid configuration or a request the current setup cannot satisfy.
// The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf in activations or a diverging loss. CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A metric that has no value for the given input (e.g. induction strength
// on an episode without a matching exemplar, correlation with zero variance).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace icl
