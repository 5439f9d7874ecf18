#include "zsq/error.hpp"

#include <iostream>

namespace zsq {

void warn(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

}  // namespace zsq
