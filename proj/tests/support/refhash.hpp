#pragma once

// Reference digest and encoding routines written directly from the published
// algorithm descriptions, sharing no code with the library under test. Used
// to cross-check the OpenSSL-backed implementations.

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace refhash {

std::array<std::uint8_t, 20> sha1(std::span<const std::uint8_t> data);
std::array<std::uint8_t, 32> sha256(std::span<const std::uint8_t> data);
std::array<std::uint8_t, 32> sha3_256(std::span<const std::uint8_t> data);

std::string base32_lower_nopad(std::span<const std::uint8_t> data);
std::string hex_lower(std::span<const std::uint8_t> data);

}  // namespace refhash
