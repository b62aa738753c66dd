#include "mvseg/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace mvseg::log {
namespace {

std::atomic<Level> g_level{Level::info};
std::atomic<unsigned long> g_warnings{0};
std::mutex g_mutex;

constexpr std::string_view tag(Level l) {
  switch (l) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
    case Level::off: break;
  }
  return "";
}

}  // namespace

void set_level(Level l) { g_level.store(l); }
Level level() { return g_level.load(); }

void write(Level l, std::string_view message) {
  if (l == Level::warn) g_warnings.fetch_add(1);
  if (l < g_level.load() || l == Level::off) return;
  std::lock_guard lock(g_mutex);
  std::clog << "[mvseg " << tag(l) << "] " << message << '\n';
}

unsigned long warning_count() { return g_warnings.load(); }

}  // namespace mvseg::log
