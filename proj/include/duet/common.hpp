#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace duet {

// Error raised by every contract violation in the library. Messages are
// prefixed with the module that detected the problem.
struct error : std::runtime_error {
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_parts(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    format_parts(os, rest...);
}
} // namespace detail

template <typename... Parts>
[[noreturn]] void fail(const Parts&... parts) {
    std::ostringstream os;
    detail::format_parts(os, parts...);
    throw error(os.str());
}

} // namespace duet

#define DUET_CHECK(cond, ...)            \
    do {                                 \
        if (!(cond)) ::duet::fail(__VA_ARGS__); \
    } while (0)
