#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace kedit {

// Every failure carries a stable machine-checkable kind ("MissingEdge",
// "SingularSystem", ...) next to the human message.
class error : public std::runtime_error {
public:
    error(std::string kind, const std::string & msg)
        : std::runtime_error(kind + ": " + msg), kind_(std::move(kind)) {}

    const std::string & kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

[[noreturn]] inline void fail(std::string kind, const std::string & msg) {
    throw error(std::move(kind), msg);
}

} // namespace kedit
