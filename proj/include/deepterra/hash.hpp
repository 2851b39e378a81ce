#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace deepterra {

std::string sha256_hex(std::span<const std::uint8_t> data);
std::string sha256_hex(std::string_view text);

}  // namespace deepterra
