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

#ifndef MINIFLOW__CLOCK_HPP_
#define MINIFLOW__CLOCK_HPP_

#include <cstdint>

namespace miniflow
{

/// Host-wide monotonic nanoseconds (CLOCK_MONOTONIC). Values taken in
/// different processes on one host are directly comparable.
std::uint64_t now_ns();

}  // namespace miniflow

#endif  // MINIFLOW__CLOCK_HPP_
