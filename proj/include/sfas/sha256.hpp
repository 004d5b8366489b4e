#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace sfas {

// Minimal SHA-256, enough for content hashes of datasets, checkpoints and
// parameter blobs. Streaming interface: update() any number of times, then
// hex_digest() once.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  std::string hex_digest();

  static std::string of_bytes(const void* data, size_t len);
  static std::string of_string(const std::string& s);
  static std::string of_file(const std::string& path);  // throws if unreadable

 private:
  void process_block(const uint8_t* block);
  uint32_t state_[8];
  uint64_t bit_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
  bool finalized_ = false;
};

}  // namespace sfas
