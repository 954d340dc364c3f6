#pragma once

#include <unistd.h>

#include <atomic>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>

#include "grc/memory.hpp"

namespace fixtures {

using grc::CompressedMemory;
using grc::Position;
namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    static std::atomic<int> n{0};
    path = fs::temp_directory_path() / ("grc_mem_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

CompressedMemory random_memory(std::string id, std::mt19937_64& rng, std::uint32_t max_m = 8) {
  CompressedMemory mem;
  mem.doc_id = std::move(id);
  mem.fingerprint = rng() | 1;
  mem.m = 1 + std::uint32_t(rng() % max_m);
  mem.num_layers = 1 + std::uint32_t(rng() % 3);
  mem.num_kv_heads = 1 + std::uint32_t(rng() % 2);
  mem.head_dim = 2 + std::uint32_t(rng() % 6);
  Position p = Position(rng() % 100);
  for (std::uint32_t i = 0; i < mem.m; ++i) mem.position_ids.push_back(p += 1 + Position(rng() % 3));
  mem.payload.resize(mem.expected_payload_bytes());
  for (auto& b : mem.payload) b = std::uint8_t(rng());
  return mem;
}

// Payload tagged with a version number in its first eight bytes.
CompressedMemory versioned(const std::string& id, std::uint64_t version, std::uint32_t kv_dim = 256) {
  CompressedMemory mem;
  mem.doc_id = id;
  mem.fingerprint = 42;
  mem.m = 8;
  mem.num_layers = 4;
  mem.num_kv_heads = 1;
  mem.head_dim = kv_dim;
  for (std::uint32_t i = 0; i < mem.m; ++i) mem.position_ids.push_back(i);
  mem.payload.assign(mem.expected_payload_bytes(), std::uint8_t(version));
  std::memcpy(mem.payload.data(), &version, 8);
  return mem;
}

std::uint64_t version_of(const CompressedMemory& mem) {
  std::uint64_t v;
  std::memcpy(&v, mem.payload.data(), 8);
  return v;
}

}  // namespace fixtures
