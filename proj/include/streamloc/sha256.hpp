#ifndef STREAMLOC_SHA256_HPP
#define STREAMLOC_SHA256_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace streamloc {

// Incremental SHA-256. Used for checkpoint config hashes and run manifests.
class Sha256 {
 public:
  Sha256();
  void update(const void* data, size_t len);
  void update(const std::string& s) { update(s.data(), s.size()); }
  std::array<uint8_t, 32> digest();  // finalizes; object not reusable after

  static std::array<uint8_t, 32> hash(const void* data, size_t len);
  static std::array<uint8_t, 32> hash(const std::string& s) {
    return hash(s.data(), s.size());
  }
  static std::string hex(const std::array<uint8_t, 32>& d);
  static std::string hash_hex(const std::string& s) { return hex(hash(s)); }
  // Streams a file through the hash; throws Error(kData) if unreadable.
  static std::string file_hex(const std::string& path);

 private:
  void process_block(const uint8_t* block);
  std::array<uint32_t, 8> state_;
  uint64_t total_len_ = 0;
  std::array<uint8_t, 64> buffer_;
  size_t buffer_len_ = 0;
};

}  // namespace streamloc

#endif  // STREAMLOC_SHA256_HPP
