#pragma once

#include <stdexcept>
#include <string>

namespace cdpd {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto its exit codes.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input: bad CSV cells, invalid configuration, unknown tags.
class validation_error : public error {
 public:
  using error::error;
};

// Parameters outside the model support (σ <= 0, x'θ <= 0, ...).
class domain_error : public error {
 public:
  using error::error;
};

// Density powers or integrals that do not fit in a double.
class overflow_error : public error {
 public:
  using error::error;
};

// Every observation censored, or otherwise no information to fit.
class degenerate_data_error : public error {
 public:
  using error::error;
};

class singular_matrix_error : public error {
 public:
  using error::error;
};

class convergence_error : public error {
 public:
  using error::error;
};

// A Monte Carlo study whose replication failure rate exceeded the limit.
class study_error : public error {
 public:
  using error::error;
};

}  // namespace cdpd
