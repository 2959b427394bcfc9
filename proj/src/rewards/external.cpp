#include "offrl/rewards/external.hpp"

#include <json.hpp>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <iostream>
#include <stdexcept>

namespace offrl::rewards {

ExternalScorer::ExternalScorer(std::string cmd) : cmd_(std::move(cmd)) {
  if (cmd_.empty()) throw std::invalid_argument("external scorer command is empty");
  ::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2];
  int out_pipe[2];
  if (::pipe(in_pipe) != 0) throw std::runtime_error("pipe() failed: " + std::string(std::strerror(errno)));
  if (::pipe(out_pipe) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw std::runtime_error("pipe() failed: " + std::string(std::strerror(errno)));
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw std::runtime_error("fork() failed: " + std::string(std::strerror(errno)));
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execl("/bin/sh", "sh", "-c", cmd_.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  pid_ = pid;
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  ::fcntl(to_child_, F_SETFD, FD_CLOEXEC);
  ::fcntl(from_child_, F_SETFD, FD_CLOEXEC);
}

ExternalScorer::~ExternalScorer() { shutdown(); }

void ExternalScorer::shutdown() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  to_child_ = from_child_ = -1;
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }
}

void ExternalScorer::fail(const std::string& what) {
  std::string msg = "external scorer batch " + std::to_string(batch_index_) + ": " + what;
  if (to_child_ >= 0) ::close(to_child_);
  to_child_ = -1;
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
    if (WIFEXITED(status) && WEXITSTATUS(status) != 0) {
      msg += " (process exited with status " + std::to_string(WEXITSTATUS(status)) + ")";
    } else if (WIFSIGNALED(status)) {
      msg += " (process killed by signal " + std::to_string(WTERMSIG(status)) + ")";
    }
  }
  if (from_child_ >= 0) ::close(from_child_);
  from_child_ = -1;
  throw std::runtime_error(msg);
}

std::vector<double> ExternalScorer::score(const std::vector<TextPair>& batch) {
  if (pid_ < 0) fail("scorer process is not running");
  std::string request;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    nlohmann::json j = {{"id", i}, {"generated", batch[i].first}, {"target", batch[i].second}};
    request += j.dump();
    request.push_back('\n');
  }
  request.push_back('\n');

  std::vector<double> scores(batch.size(), 0.0);
  std::vector<bool> seen(batch.size(), false);
  std::size_t received = 0;
  std::size_t written = 0;

  auto consume_lines = [&]() {
    std::size_t pos;
    while (received < batch.size() && (pos = pending_.find('\n')) != std::string::npos) {
      std::string line = pending_.substr(0, pos);
      pending_.erase(0, pos + 1);
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const std::exception&) {
        fail("malformed reply: " + line);
      }
      if (!j.is_object() || !j.contains("id") || !j.contains("score") || !j["id"].is_number_integer() ||
          !j["score"].is_number()) {
        fail("malformed reply: " + line);
      }
      const auto id = j["id"].get<long long>();
      if (id < 0 || static_cast<std::size_t>(id) >= batch.size() || seen[static_cast<std::size_t>(id)]) {
        fail("reply id " + std::to_string(id) + " does not match the request");
      }
      double s = j["score"].get<double>();
      if (s < 0.0 || s > 1.0) {
        const double c = std::clamp(s, 0.0, 1.0);
        std::cerr << "warning: external scorer returned " << s << " for id " << id << "; clamped to " << c << '\n';
        s = c;
      }
      scores[static_cast<std::size_t>(id)] = s;
      seen[static_cast<std::size_t>(id)] = true;
      ++received;
    }
  };

  consume_lines();
  while (received < batch.size() || written < request.size()) {
    pollfd fds[2];
    nfds_t n = 0;
    if (written < request.size()) fds[n++] = {to_child_, POLLOUT, 0};
    if (received < batch.size()) fds[n++] = {from_child_, POLLIN, 0};
    if (::poll(fds, n, -1) < 0) {
      if (errno == EINTR) continue;
      fail("poll() failed");
    }
    for (nfds_t k = 0; k < n; ++k) {
      if (fds[k].fd == to_child_ && (fds[k].revents & (POLLOUT | POLLERR | POLLHUP))) {
        const ssize_t w = ::write(to_child_, request.data() + written, request.size() - written);
        if (w < 0) {
          if (errno == EINTR || errno == EAGAIN) continue;
          fail("write to scorer failed");
        }
        written += static_cast<std::size_t>(w);
      } else if (fds[k].fd == from_child_ && (fds[k].revents & (POLLIN | POLLHUP | POLLERR))) {
        char buf[4096];
        const ssize_t r = ::read(from_child_, buf, sizeof buf);
        if (r < 0) {
          if (errno == EINTR || errno == EAGAIN) continue;
          fail("read from scorer failed");
        }
        if (r == 0) {
          fail("expected " + std::to_string(batch.size()) + " replies, got " + std::to_string(received));
        }
        pending_.append(buf, static_cast<std::size_t>(r));
        consume_lines();
      }
    }
  }
  ++batch_index_;
  return scores;
}

std::vector<double> external_score(const std::vector<TextPair>& batch, const std::string& scorer_cmd) {
  ExternalScorer scorer(scorer_cmd);
  return scorer.score(batch);
}

}  // namespace offrl::rewards
