#pragma once

// Linearizability checker for a single key-value register with put, get and
// delete. Search over linearization orders with memoized (done-set, state)
// pairs, in the style of Wing and Gong with Lowe's caching.

#include <cstdint>
#include <optional>
#include <set>
#include <utility>
#include <vector>

namespace lin {

enum class Op { put, get, del };

struct Event {
  Op op;
  std::optional<std::uint64_t> value;  // put: written; get: observed (nullopt = not found)
  bool ok = true;                      // del: false when the key was absent
  std::uint64_t invoke = 0, response = 0;
};

inline bool apply(const Event& e, std::optional<std::uint64_t>& state) {
  switch (e.op) {
    case Op::put:
      state = e.value;
      return true;
    case Op::get:
      return e.value == state;
    case Op::del: {
      const bool present = state.has_value();
      state.reset();
      return present == e.ok;
    }
  }
  return false;
}

inline bool check(const std::vector<Event>& h, std::optional<std::uint64_t> initial = std::nullopt) {
  const std::size_t n = h.size();
  if (n > 63) return false;
  std::set<std::pair<std::uint64_t, std::optional<std::uint64_t>>> seen;
  auto rec = [&](auto&& self, std::uint64_t done, std::optional<std::uint64_t> state) -> bool {
    if (done == (n == 64 ? ~0ull : (1ull << n) - 1)) return true;
    if (!seen.insert({done, state}).second) return false;
    // the earliest response among pending ops bounds which op can go next
    std::uint64_t horizon = ~0ull;
    for (std::size_t i = 0; i < n; ++i)
      if (!(done >> i & 1)) horizon = std::min(horizon, h[i].response);
    for (std::size_t i = 0; i < n; ++i) {
      if (done >> i & 1 || h[i].invoke > horizon) continue;
      auto s = state;
      if (apply(h[i], s) && self(self, done | 1ull << i, s)) return true;
    }
    return false;
  };
  return rec(rec, 0, initial);
}

}  // namespace lin
