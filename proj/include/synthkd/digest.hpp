#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace synthkd {

// Incremental SHA-256. Used for every integrity digest in the project:
// checkpoint parameter records, dataset payloads, canonical configs.
class Sha256 {
 public:
  Sha256() { reset(); }

  void reset();
  void update(const void* data, std::size_t len);
  void update(std::span<const std::uint8_t> bytes) { update(bytes.data(), bytes.size()); }
  void update(const std::string& s) { update(s.data(), s.size()); }

  // Finalizes and returns the 32-byte digest; the object must be reset before reuse.
  std::vector<std::uint8_t> finish();
  std::string finish_hex();

 private:
  void process_block(const std::uint8_t* block);

  std::uint32_t h_[8];
  std::uint8_t buffer_[64];
  std::size_t buffer_len_ = 0;
  std::uint64_t total_len_ = 0;
};

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace synthkd
