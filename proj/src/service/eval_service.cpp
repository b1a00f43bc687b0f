#include "refer/service/eval_service.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <random>

#include "httplib.h"
#include "refer/errors.hpp"
#include "refer/world/dataset.hpp"

namespace refer::service {

EvalService::EvalService(std::vector<TaskSource> pool, ServiceConfig cfg) : pool_(std::move(pool)), cfg_(std::move(cfg)) {
  if (cfg_.batch_size < 1 || cfg_.batches < 1) throw ConfigError("batch size and count must be >= 1");
  if (pool_.empty()) throw ConfigError("no evaluation tasks");
  if (cfg_.max_sessions <= 0) cfg_.max_sessions = 2 * cfg_.batches;

  std::vector<std::size_t> order(pool_.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::mt19937_64 rng(cfg_.seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::size_t next = 0;
  long id = 1;
  for (int b = 0; b < cfg_.batches && next < order.size(); ++b) {
    std::vector<long> ids;
    for (int i = 0; i < cfg_.batch_size && next < order.size(); ++i, ++id) {
      tasks_[id] = Task{id, b, order[next++], {}};
      ids.push_back(id);
    }
    batches_.push_back(std::move(ids));
  }
  if (!cfg_.answer_log.empty()) {
    log_.open(cfg_.answer_log, std::ios::app);
    if (!log_) throw InputError("cannot open answer log " + cfg_.answer_log.string());
  }
}

const TaskSource& EvalService::source(long task_id) const {
  std::shared_lock lock(mu_);
  auto t = tasks_.find(task_id);
  if (t == tasks_.end()) throw ServiceError(404, "unknown task");
  return pool_[t->second.source];
}

std::string EvalService::create_session() {
  std::unique_lock lock(mu_);
  const int index = created_;
  const int batch = index / 2;
  if (index >= cfg_.max_sessions || batch >= int(batches_.size()))
    throw ServiceError(503, "session limit reached");
  ++created_;

  std::mt19937_64 rng(cfg_.seed ^ (0x9e3779b97f4a7c15ULL * std::uint64_t(index + 1)));
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%d-%08llx", index, static_cast<unsigned long long>(rng() & 0xffffffffULL));
  Session s;
  s.batch = batch;
  s.order = batches_[std::size_t(batch)];
  std::shuffle(s.order.begin(), s.order.end(), rng);
  sessions_.emplace(buf, std::move(s));
  return buf;
}

nlohmann::json EvalService::next_task(const std::string& session) {
  std::shared_lock lock(mu_);
  auto it = sessions_.find(session);
  if (it == sessions_.end()) throw ServiceError(404, "unknown session");
  for (long id : it->second.order) {
    const auto& task = tasks_.at(id);
    if (task.answers.count(session)) continue;
    const auto& src = pool_[task.source];
    const auto png = world::encode_png(src.scene.image);
    return {{"task_id", id},
            {"image_png_base64", httplib::detail::base64_encode(std::string(png.begin(), png.end()))},
            {"expression", src.expression},
            {"width", src.scene.width},
            {"height", src.scene.height}};
  }
  return {{"done", true}};
}

ClickRecord EvalService::record_click(const std::string& session, long task_id, int x, int y) {
  std::unique_lock lock(mu_);
  auto s = sessions_.find(session);
  if (s == sessions_.end()) throw ServiceError(404, "unknown session");
  auto t = tasks_.find(task_id);
  if (t == tasks_.end() || t->second.batch != s->second.batch) throw ServiceError(404, "task not assigned to session");
  const auto& src = pool_[t->second.source];
  if (x < 0 || y < 0 || x >= src.scene.width || y >= src.scene.height)
    throw ServiceError(400, "click outside the image");
  if (t->second.answers.count(session)) throw ServiceError(409, "task already answered");

  ClickRecord r;
  r.task_id = task_id;
  r.session_id = session;
  r.x = x;
  r.y = y;
  r.hit = src.scene.objects[std::size_t(src.object)].mask.at(x, y);
  r.timestamp_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                       std::chrono::system_clock::now().time_since_epoch())
                       .count();
  t->second.answers.emplace(session, r);
  if (log_.is_open()) {
    log_ << nlohmann::json{{"task_id", r.task_id}, {"session_id", r.session_id}, {"x", r.x},          {"y", r.y},
                           {"hit", r.hit},         {"timestamp", r.timestamp_ms}, {"scene_id", src.scene.id},
                           {"object_id", src.object}}
                .dump()
         << '\n';
    log_.flush();
  }
  return r;
}

nlohmann::json EvalService::results(int batch, bool exclude_unanswered) const {
  std::shared_lock lock(mu_);
  if (batch < 0 || batch >= int(batches_.size())) throw ServiceError(404, "unknown batch");
  long answered = 0, both_hit = 0;
  const long total = long(batches_[std::size_t(batch)].size());
  for (long id : batches_[std::size_t(batch)]) {
    const auto& task = tasks_.at(id);
    if (task.answers.size() < 2) continue;
    ++answered;
    both_hit += std::all_of(task.answers.begin(), task.answers.end(), [](const auto& a) { return a.second.hit; });
  }
  const long denom = exclude_unanswered ? answered : total;
  nlohmann::json j = {{"answered", answered}, {"total", total}, {"partial", answered < total}};
  j["h_acc"] = denom > 0 ? nlohmann::json(double(both_hit) / double(denom)) : nlohmann::json(nullptr);
  return j;
}

double EvalService::aggregate_h_acc(int batch) const {
  auto r = results(batch);
  if (r["partial"].get<bool>()) throw ContractViolation("batch not fully answered");
  return r["h_acc"].get<double>();
}

// ---- HTTP ------------------------------------------------------------------

struct HttpServer::Impl {
  EvalService& service;
  httplib::Server server;

  explicit Impl(EvalService& s) : service(s) {}
};

namespace {

void reply(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_header("Access-Control-Allow-Origin", "*");
  res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    reply(res, 200, f());
  } catch (const ServiceError& e) {
    reply(res, e.status(), {{"error", e.what()}});
  } catch (const nlohmann::json::exception& e) {
    reply(res, 400, {{"error", std::string("bad request: ") + e.what()}});
  } catch (const std::invalid_argument& e) {
    reply(res, 400, {{"error", std::string("bad request: ") + e.what()}});
  } catch (const std::out_of_range& e) {
    reply(res, 400, {{"error", std::string("bad request: ") + e.what()}});
  }
}

}  // namespace

HttpServer::HttpServer(EvalService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  auto& svc = impl_->service;
  srv.Post("/api/session", [&svc](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { return nlohmann::json{{"session_id", svc.create_session()}}; });
  });
  srv.Get("/api/task", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("session")) throw ServiceError(400, "missing session parameter");
      return svc.next_task(req.get_param_value("session"));
    });
  });
  srv.Post("/api/answer", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = nlohmann::json::parse(req.body);
      svc.record_click(body.at("session_id").get<std::string>(), body.at("task_id").get<long>(),
                       body.at("x").get<int>(), body.at("y").get<int>());
      return nlohmann::json{{"recorded", true}};
    });
  });
  srv.Get("/api/results", [&svc](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const int batch = req.has_param("batch") ? std::stoi(req.get_param_value("batch")) : 0;
      const bool exclude = req.has_param("exclude_unanswered") && req.get_param_value("exclude_unanswered") != "0";
      return svc.results(batch, exclude);
    });
  });
  srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace refer::service
