// Copyright 2026 The Miniflow Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "miniflow/log.hpp"

#include <cstdlib>
#include <mutex>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

namespace miniflow
{

void init_logging()
{
  static std::once_flag once;
  std::call_once(once, [] {
      auto logger = spdlog::stderr_color_mt("miniflow");
      logger->set_pattern("%Y-%m-%d %H:%M:%S.%e %^%l%$ %v");
      spdlog::set_default_logger(logger);
      const char * env = std::getenv("MINIFLOW_LOG");
      spdlog::set_level(env != nullptr ? spdlog::level::from_str(env) : spdlog::level::info);
    });
}

void set_log_level(const std::string & level)
{
  init_logging();
  spdlog::set_level(spdlog::level::from_str(level));
}

}  // namespace miniflow
