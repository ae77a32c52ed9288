#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace shield {

// Minimal SHA-256, used for artifact manifests and weight checksums.
class Sha256 {
  public:
    Sha256();
    void update(const void* data, size_t len);
    // Finalizes and returns lowercase hex digest. The object is spent.
    std::string hex_digest();

  private:
    void process_block(const uint8_t* block);

    uint32_t h_[8];
    uint8_t buf_[64];
    size_t buf_len_ = 0;
    uint64_t total_len_ = 0;
};

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file_hex(const std::string& path);

}  // namespace shield
