#pragma once

#include <stdexcept>
#include <string>

namespace deepterra {

enum class ErrorKind {
  Domain,     // invalid argument or violated precondition
  Structure,  // dataset layout problems
  Archive,    // unreadable or corrupt tar/gzip data
  Fetch,      // network or tile source failures
  Cap,        // download exceeded configured size cap
  Split,
  Naming,
  Io,
  Checksum,
  Version,
  Training,
  Export,
  Config,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what)
{
  if (!cond) fail(kind, what);
}

}  // namespace deepterra
