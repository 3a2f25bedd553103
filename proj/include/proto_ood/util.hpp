#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <thread>
#include <vector>

#include "proto_ood/errors.hpp"

namespace proto_ood {

inline constexpr std::string_view kThreadsEnvVar = "PROTO_OOD_THREADS";

/// Effective parallelism cap: hardware concurrency, further capped by
/// PROTO_OOD_THREADS when set to a positive integer. Never less than 1.
inline unsigned thread_cap() {
  unsigned cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv(kThreadsEnvVar.data())) {
    unsigned requested = 0;
    const auto [ptr, ec] =
        std::from_chars(env, env + std::string_view(env).size(), requested);
    if (ec == std::errc() && *ptr == '\0' && requested >= 1) {
      cap = std::min(cap, requested);
    } else {
      cap = 1;
    }
  }
  return cap;
}

/// Runs fn(begin, end) over [0, n) in contiguous chunks, at most thread_cap()
/// threads. Chunk boundaries never affect results for row-independent work,
/// so output is identical at any thread count.
inline void parallel_for(std::size_t n,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
  const std::size_t workers =
      std::min<std::size_t>(thread_cap(), n == 0 ? 1 : n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  const std::size_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& t : threads) t.join();
}

// ---------------------------------------------------------------------------
// Text helpers shared by the file formats.
// ---------------------------------------------------------------------------

/// FNV-1a over bytes; used as a header/content checksum in the file formats.
inline std::uint64_t fnv1a(std::string_view bytes,
                           std::uint64_t seed = 0xcbf29ce484222325ull) {
  std::uint64_t h = seed;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string to_hex(std::uint64_t v) {
  char buf[17];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v, 16);
  return std::string(buf, ptr);
}

/// Shortest decimal form that parses back to the identical double.
inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

/// Hex-float form; exact and compact, used by checkpoints.
inline std::string format_double_hex(double v) {
  char buf[64];
  const auto [ptr, ec] =
      std::to_chars(buf, buf + sizeof buf, v, std::chars_format::hex);
  return std::string(buf, ptr);
}

/// Strict full-token parse; `what` names the field in diagnostics.
inline double parse_double(std::string_view token, std::string_view what,
                           std::chars_format fmt = std::chars_format::general) {
  double v = 0.0;
  const auto [ptr, ec] =
      std::from_chars(token.data(), token.data() + token.size(), v, fmt);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    throw ParseError("invalid " + std::string(what) + ": '" +
                     std::string(token) + "'");
  }
  return v;
}

inline std::int64_t parse_int(std::string_view token, std::string_view what) {
  std::int64_t v = 0;
  const auto [ptr, ec] =
      std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    throw ParseError("invalid " + std::string(what) + ": '" +
                     std::string(token) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace proto_ood
