#ifndef CDSNAS_COMMON_HPP_
#define CDSNAS_COMMON_HPP_

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdsnas {

// Exit-code mapping used by the CLI: UsageError -> 2, DataError (and any
// other Error) -> 3, DivergenceError -> 4.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class DivergenceError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

namespace detail {

inline void str_append(std::ostringstream&) {}

template <typename A, typename... Rest>
void str_append(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  str_append(os, rest...);
}

}  // namespace detail

template <typename... Args>
std::string str(const Args&... args) {
  std::ostringstream os;
  detail::str_append(os, args...);
  return os.str();
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  out += ")";
  return out;
}

template <typename... Args>
[[noreturn]] void fail_shape(const Args&... args) {
  throw ShapeError(str(args...));
}

template <typename... Args>
[[noreturn]] void fail_data(const Args&... args) {
  throw DataError(str(args...));
}

template <typename... Args>
[[noreturn]] void fail_usage(const Args&... args) {
  throw UsageError(str(args...));
}

}  // namespace cdsnas

#endif  // CDSNAS_COMMON_HPP_
