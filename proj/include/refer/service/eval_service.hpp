#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "refer/world/scene.hpp"

namespace refer::service {

/// Request failure carrying an HTTP-style status (400, 404, 409, 503).
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

/// One (scene, target, expression) candidate for a task.
struct TaskSource {
  world::Scene scene;
  int object = 0;
  std::string expression;
};

struct ServiceConfig {
  int batch_size = 100;
  int batches = 1;
  int max_sessions = 0;  // 0: two per batch
  std::uint64_t seed = 0;
  std::filesystem::path answer_log;  // JSON Lines audit trail; empty disables
};

struct ClickRecord {
  long task_id = 0;
  std::string session_id;
  int x = 0;
  int y = 0;
  bool hit = false;
  std::int64_t timestamp_ms = 0;
};

/// Human-evaluation protocol: each batch is fixed at construction and is
/// answered by exactly two sessions, assigned in creation order. A task
/// counts as unambiguous when both sessions click inside the target mask.
class EvalService {
 public:
  EvalService(std::vector<TaskSource> pool, ServiceConfig cfg);

  int batch_count() const { return int(batches_.size()); }

  /// Ground truth behind a task (operator side only; never served). 404 if
  /// unknown.
  const TaskSource& source(long task_id) const;

  /// 503 once every annotator slot is taken.
  std::string create_session();

  /// {"task_id", "image_png_base64", "expression", "width", "height"} for the
  /// session's next unanswered task, or {"done": true}. Until answered the
  /// same pending task is returned. 404 for an unknown session.
  nlohmann::json next_task(const std::string& session);

  /// 404 unknown session or task not assigned to it; 400 coordinates out of
  /// the image; 409 task already answered by this session (first answer
  /// kept).
  ClickRecord record_click(const std::string& session, long task_id, int x, int y);

  /// {"h_acc", "answered", "total", "partial"}. Tasks lacking either answer
  /// count as misses unless `exclude_unanswered`, which drops them from the
  /// denominator. 404 for an unknown batch.
  nlohmann::json results(int batch, bool exclude_unanswered = false) const;

  /// Fraction of tasks in `batch` hit by both sessions (complete batches).
  double aggregate_h_acc(int batch) const;

 private:
  struct Task {
    long id = 0;
    int batch = 0;
    std::size_t source = 0;
    std::map<std::string, ClickRecord> answers;
  };
  struct Session {
    int batch = 0;
    std::vector<long> order;
  };

  std::vector<TaskSource> pool_;
  ServiceConfig cfg_;
  std::vector<std::vector<long>> batches_;
  std::map<long, Task> tasks_;
  std::map<std::string, Session> sessions_;
  int created_ = 0;
  std::ofstream log_;
  mutable std::shared_mutex mu_;
};

/// Blocking HTTP front end for an EvalService.
class HttpServer {
 public:
  explicit HttpServer(EvalService& service);
  ~HttpServer();

  /// Binds to `port` (0: any free port) and returns the bound port, or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace refer::service
