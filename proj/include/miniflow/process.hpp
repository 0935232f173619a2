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

#ifndef MINIFLOW__PROCESS_HPP_
#define MINIFLOW__PROCESS_HPP_

#include <sys/types.h>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "miniflow/io.hpp"

namespace miniflow::process
{

struct SpawnOptions
{
  std::vector<std::string> args;
  /// Added to (or overriding) the inherited environment.
  std::map<std::string, std::string> env;
  std::filesystem::path cwd;
  /// stdout and stderr are appended here when set.
  std::filesystem::path log_path;
  /// Detach into a new session (background services).
  bool new_session = false;
  /// SIGKILL the child if the spawning thread dies.
  bool die_with_parent = false;
};

struct Child
{
  pid_t pid = -1;
  io::UniqueFd pidfd;  // readable once the child exits
};

/// Throws Error(SpawnFailed) when the program cannot be executed.
Child spawn(const SpawnOptions & options);

/// Splits a command line on whitespace with shell-like single quotes,
/// double quotes and backslash escapes. Throws Error(InvalidArgument).
std::vector<std::string> split_command(const std::string & command);

struct ExitStatus
{
  int code = 0;
  int signal = 0;

  bool success() const {return signal == 0 && code == 0;}
  std::string describe() const;
};

std::optional<ExitStatus> try_wait(pid_t pid);
ExitStatus wait(pid_t pid);
bool alive(pid_t pid);
void send_signal(pid_t pid, int sig);

/// Path of the running executable.
std::filesystem::path self_executable();

}  // namespace miniflow::process

#endif  // MINIFLOW__PROCESS_HPP_
