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

#ifndef MINIFLOW__LOG_HPP_
#define MINIFLOW__LOG_HPP_

#include <string>

namespace miniflow
{

/// Applies MINIFLOW_LOG (trace, debug, info, warn, error, off; default info)
/// to the process-wide logger. Only the first call has an effect.
void init_logging();

/// Overrides the level chosen by init_logging().
void set_log_level(const std::string & level);

}  // namespace miniflow

#endif  // MINIFLOW__LOG_HPP_
