#include "deepterra/error.hpp"

namespace deepterra {

const char* to_string(ErrorKind kind)
{
  switch (kind) {
    case ErrorKind::Domain: return "domain error";
    case ErrorKind::Structure: return "structure error";
    case ErrorKind::Archive: return "archive error";
    case ErrorKind::Fetch: return "fetch error";
    case ErrorKind::Cap: return "size cap exceeded";
    case ErrorKind::Split: return "split error";
    case ErrorKind::Naming: return "naming error";
    case ErrorKind::Io: return "I/O error";
    case ErrorKind::Checksum: return "checksum error";
    case ErrorKind::Version: return "version error";
    case ErrorKind::Training: return "training error";
    case ErrorKind::Export: return "export error";
    case ErrorKind::Config: return "config error";
  }
  return "error";
}

}  // namespace deepterra
