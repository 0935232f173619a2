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

#include "miniflow/process.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "miniflow/error.hpp"

extern char ** environ;

namespace miniflow::process
{

namespace
{

int pidfd_open(pid_t pid)
{
  return static_cast<int>(::syscall(SYS_pidfd_open, pid, 0));
}

std::vector<std::string> build_environment(const std::map<std::string, std::string> & extra)
{
  std::vector<std::string> out;
  for (char ** e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq != std::string::npos && extra.count(entry.substr(0, eq)) != 0) {
      continue;
    }
    out.push_back(entry);
  }
  for (const auto & [key, value] : extra) {
    out.push_back(key + "=" + value);
  }
  return out;
}

std::vector<char *> c_strings(std::vector<std::string> & items)
{
  std::vector<char *> out;
  for (auto & s : items) {
    out.push_back(s.data());
  }
  out.push_back(nullptr);
  return out;
}

// Child side of spawn(): only async-signal-safe calls from here on.
[[noreturn]] void exec_child(
  const SpawnOptions & options, char * const * argv, char * const * envp,
  int log_fd, int error_fd, pid_t parent)
{
  if (options.new_session) {
    ::setsid();
  }
  if (options.die_with_parent) {
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    if (::getppid() != parent) {
      ::_exit(127);
    }
  }
  sigset_t none;
  sigemptyset(&none);
  ::sigprocmask(SIG_SETMASK, &none, nullptr);
  int stage = 0;
  if (log_fd >= 0) {
    if (::dup2(log_fd, STDOUT_FILENO) < 0 || ::dup2(log_fd, STDERR_FILENO) < 0) {
      stage = 1;
    }
  }
  if (stage == 0 && options.new_session) {
    const int null_fd = ::open("/dev/null", O_RDONLY);
    if (null_fd >= 0) {
      ::dup2(null_fd, STDIN_FILENO);
    }
  }
  if (stage == 0 && !options.cwd.empty() && ::chdir(options.cwd.c_str()) != 0) {
    stage = 2;
  }
  if (stage == 0) {
    ::execvpe(argv[0], argv, envp);
    stage = 3;
  }
  const int report[2] = {stage, errno};
  [[maybe_unused]] auto n = ::write(error_fd, report, sizeof(report));
  ::_exit(127);
}

}  // namespace

Child spawn(const SpawnOptions & options)
{
  if (options.args.empty() || options.args[0].empty()) {
    fail(Errc::SpawnFailed, "empty command");
  }
  auto args = options.args;
  auto argv = c_strings(args);
  auto env_strings = build_environment(options.env);
  auto envp = c_strings(env_strings);

  io::UniqueFd log_fd;
  if (!options.log_path.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.log_path.parent_path(), ec);
    log_fd.reset(::open(
        options.log_path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644));
    if (!log_fd) {
      fail(Errc::SpawnFailed, options.log_path.string() + ": " + std::strerror(errno));
    }
  }
  int pipe_fds[2];
  if (::pipe2(pipe_fds, O_CLOEXEC) != 0) {
    fail(Errc::SpawnFailed, std::string("pipe: ") + std::strerror(errno));
  }
  io::UniqueFd read_end(pipe_fds[0]);
  io::UniqueFd write_end(pipe_fds[1]);

  const pid_t parent = ::getpid();
  const pid_t pid = ::fork();
  if (pid < 0) {
    fail(Errc::SpawnFailed, std::string("fork: ") + std::strerror(errno));
  }
  if (pid == 0) {
    exec_child(options, argv.data(), envp.data(), log_fd.get(), write_end.get(), parent);
  }
  write_end.reset();
  int report[2] = {0, 0};
  ssize_t n;
  do {
    n = ::read(read_end.get(), report, sizeof(report));
  } while (n < 0 && errno == EINTR);
  if (n == static_cast<ssize_t>(sizeof(report))) {
    ::waitpid(pid, nullptr, 0);
    static constexpr const char * kStages[] = {"", "redirect output", "chdir", "exec"};
    fail(
      Errc::SpawnFailed,
      options.args[0] + ": " + kStages[report[0] & 3] + " failed: " + std::strerror(report[1]));
  }
  Child child;
  child.pid = pid;
  child.pidfd.reset(pidfd_open(pid));
  return child;
}

std::vector<std::string> split_command(const std::string & command)
{
  std::vector<std::string> out;
  std::string current;
  bool in_word = false;
  char quote = 0;
  for (std::size_t i = 0; i < command.size(); ++i) {
    const char c = command[i];
    if (quote == '\'') {
      if (c == '\'') {
        quote = 0;
      } else {
        current += c;
      }
    } else if (quote == '"') {
      if (c == '"') {
        quote = 0;
      } else if (c == '\\' && i + 1 < command.size() &&
        (command[i + 1] == '"' || command[i + 1] == '\\'))
      {
        current += command[++i];
      } else {
        current += c;
      }
    } else if (c == '\'' || c == '"') {
      quote = c;
      in_word = true;
    } else if (c == '\\' && i + 1 < command.size()) {
      current += command[++i];
      in_word = true;
    } else if (c == ' ' || c == '\t' || c == '\n') {
      if (in_word) {
        out.push_back(std::move(current));
        current.clear();
        in_word = false;
      }
    } else {
      current += c;
      in_word = true;
    }
  }
  if (quote != 0) {
    fail(Errc::InvalidArgument, "unterminated quote in command: " + command);
  }
  if (in_word) {
    out.push_back(std::move(current));
  }
  return out;
}

std::string ExitStatus::describe() const
{
  if (signal != 0) {
    return "killed by signal " + std::to_string(signal);
  }
  return "exit code " + std::to_string(code);
}

namespace
{

ExitStatus from_wait_status(int status)
{
  ExitStatus out;
  if (WIFEXITED(status)) {
    out.code = WEXITSTATUS(status);
  } else if (WIFSIGNALED(status)) {
    out.signal = WTERMSIG(status);
    out.code = 128 + out.signal;
  }
  return out;
}

}  // namespace

std::optional<ExitStatus> try_wait(pid_t pid)
{
  int status = 0;
  const pid_t r = ::waitpid(pid, &status, WNOHANG);
  if (r == pid) {
    return from_wait_status(status);
  }
  if (r < 0 && errno == ECHILD) {
    return ExitStatus{};
  }
  return std::nullopt;
}

ExitStatus wait(pid_t pid)
{
  int status = 0;
  pid_t r;
  do {
    r = ::waitpid(pid, &status, 0);
  } while (r < 0 && errno == EINTR);
  if (r < 0) {
    return ExitStatus{};
  }
  return from_wait_status(status);
}

bool alive(pid_t pid)
{
  return pid > 0 && (::kill(pid, 0) == 0 || errno == EPERM);
}

void send_signal(pid_t pid, int sig)
{
  if (pid > 0) {
    ::kill(pid, sig);
  }
}

std::filesystem::path self_executable()
{
  std::error_code ec;
  auto path = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (ec) {
    fail(Errc::IoError, "cannot resolve /proc/self/exe: " + ec.message());
  }
  return path;
}

}  // namespace miniflow::process
