#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace dpl {

/// SHA-256 of the input bytes as a 64-char lowercase hex string.
std::string sha256_hex(std::string_view data);

/// First 8 bytes of SHA-256(data), big-endian, as an unsigned integer.
/// Used wherever a stable numeric value must be derived from text.
std::uint64_t sha256_u64(std::string_view data);

/// FNV-1a 64-bit hash. Fast non-cryptographic bucket hash.
std::uint64_t fnv1a64(std::string_view data);

}  // namespace dpl
