#pragma once

#include <stdexcept>
#include <string>

namespace peerqml {

// Error kinds map onto the CLI exit-code contract.
enum class ErrorKind {
  dimension,
  singular_block,
  domain,
  parse,
  schema,
  io,
  category,
  singleton_group,
  collinearity,
  identification,
  non_convergence,
  weak_identification,
  out_of_range,
  singular_information,
  degenerate_test
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace peerqml
