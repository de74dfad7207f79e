/* Copyright (c) 2026 The bilevel Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License. */

#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace bilevel {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

// Level comes from the BILEVEL_LOG environment variable: error|info|debug.
inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("BILEVEL_LOG");
    if (env == nullptr) return LogLevel::kError;
    if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
    if (std::strcmp(env, "info") == 0) return LogLevel::kInfo;
    return LogLevel::kError;
  }();
  return level;
}

template <typename... Args>
void log_at(LogLevel lvl, const char* tag, const char* fmt, Args... args) {
  if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
  std::fprintf(stderr, "[%s] ", tag);
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

#define BILEVEL_LOG_ERROR(...) \
  ::bilevel::log_at(::bilevel::LogLevel::kError, "error", __VA_ARGS__)
#define BILEVEL_LOG_INFO(...) \
  ::bilevel::log_at(::bilevel::LogLevel::kInfo, "info", __VA_ARGS__)
#define BILEVEL_LOG_DEBUG(...) \
  ::bilevel::log_at(::bilevel::LogLevel::kDebug, "debug", __VA_ARGS__)

}  // namespace bilevel
