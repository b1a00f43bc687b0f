#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "refer/errors.hpp"
#include "refer/service/eval_service.hpp"
#include "refer/world/dataset.hpp"

using namespace refer;
using service::EvalService;
using service::ServiceConfig;
using service::ServiceError;
using service::TaskSource;

namespace {

std::vector<TaskSource> make_pool(std::size_t n) {
  world::GenerationParams p;
  const auto scenes = world::generate_dataset(20, p, 11);
  std::vector<TaskSource> pool;
  for (const auto& s : scenes)
    for (const auto& o : s.objects) {
      if (pool.size() == n) return pool;
      pool.push_back({s, o.id, "object " + std::to_string(o.id)});
    }
  return pool;
}

// Mask pixel nearest the mask centroid.
std::pair<int, int> centroid_click(const world::Mask& m) {
  double sx = 0, sy = 0, n = 0;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m.at(x, y)) sx += x, sy += y, n += 1;
  const double cx = sx / n, cy = sy / n;
  std::pair<int, int> best{-1, -1};
  double best_d = 1e18;
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      const double d = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      if (m.at(x, y) && d < best_d) best = {x, y}, best_d = d;
    }
  return best;
}

std::pair<int, int> background_click(const world::Scene& s) {
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x)
      if (std::none_of(s.objects.begin(), s.objects.end(), [&](const auto& o) { return o.mask.at(x, y); }))
        return {x, y};
  throw std::logic_error("scene without background");
}

template <typename F>
int status_of(F&& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status();
  }
  return 200;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("refer_service_test_" + name);
}

}  // namespace

TEST_CASE("service: centroid clicks give H-Acc 1, one background click 19/20") {
  ServiceConfig cfg;
  cfg.batch_size = 20;
  cfg.seed = 4;
  cfg.answer_log = temp_path("answers.jsonl");
  std::filesystem::remove(cfg.answer_log);
  EvalService svc(make_pool(20), cfg);
  const auto a = svc.create_session();
  const auto b = svc.create_session();
  CHECK(a != b);
  CHECK(status_of([&] { svc.create_session(); }) == 503);

  std::vector<long> order_a, order_b;
  long miss_task = -1;
  for (const auto& s : {a, b}) {
    for (;;) {
      const auto task = svc.next_task(s);
      if (task.contains("done")) break;
      const long id = task["task_id"].get<long>();
      // A pending task is served again until answered.
      CHECK(svc.next_task(s)["task_id"].get<long>() == id);
      CHECK(svc.results(0)["partial"].get<bool>());
      (s == a ? order_a : order_b).push_back(id);
      const auto& src = svc.source(id);
      auto [x, y] = centroid_click(src.scene.objects[std::size_t(src.object)].mask);
      if (s == b && miss_task < 0) {
        miss_task = id;
        std::tie(x, y) = background_click(src.scene);
      }
      const auto r = svc.record_click(s, id, x, y);
      CHECK(r.hit == !(s == b && id == miss_task));
    }
  }
  CHECK(order_a.size() == 20);
  CHECK(std::set<long>(order_a.begin(), order_a.end()) == std::set<long>(order_b.begin(), order_b.end()));
  const auto res = svc.results(0);
  CHECK(res["answered"] == 20);
  CHECK_FALSE(res["partial"].get<bool>());
  CHECK(svc.aggregate_h_acc(0) == doctest::Approx(19.0 / 20.0));

  // Duplicate answers are rejected and leave the aggregate untouched.
  const auto& src = svc.source(miss_task);
  const auto [cx, cy] = centroid_click(src.scene.objects[std::size_t(src.object)].mask);
  CHECK(status_of([&] { svc.record_click(b, miss_task, cx, cy); }) == 409);
  CHECK(svc.aggregate_h_acc(0) == doctest::Approx(19.0 / 20.0));

  // Audit log: one line per accepted click.
  std::ifstream log(cfg.answer_log);
  int lines = 0;
  for (std::string line; std::getline(log, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"task_id", "session_id", "x", "y", "hit", "timestamp"}) CHECK(j.contains(k));
  }
  CHECK(lines == 40);
}

TEST_CASE("service: error statuses and partial batches") {
  ServiceConfig cfg;
  cfg.batch_size = 5;
  cfg.batches = 2;
  EvalService svc(make_pool(10), cfg);
  CHECK(svc.batch_count() == 2);
  CHECK(status_of([&] { svc.next_task("nobody"); }) == 404);
  const auto s0 = svc.create_session();
  const auto s1 = svc.create_session();
  const auto s2 = svc.create_session();  // second batch
  const auto s3 = svc.create_session();
  CHECK(status_of([&] { svc.create_session(); }) == 503);
  (void)s1;
  (void)s3;

  const long t0 = svc.next_task(s0)["task_id"].get<long>();
  const long t2 = svc.next_task(s2)["task_id"].get<long>();
  CHECK(status_of([&] { svc.record_click("nobody", t0, 1, 1); }) == 404);
  CHECK(status_of([&] { svc.record_click(s0, 9999, 1, 1); }) == 404);
  CHECK(status_of([&] { svc.record_click(s0, t2, 1, 1); }) == 404);  // other batch
  CHECK(status_of([&] { svc.record_click(s0, t0, -1, 1); }) == 400);
  CHECK(status_of([&] { svc.record_click(s0, t0, 64, 1); }) == 400);
  CHECK(status_of([&] { svc.record_click(s0, t0, 3, 64); }) == 400);
  CHECK(status_of([&] { svc.results(2); }) == 404);

  const auto& src = svc.source(t0);
  const auto [x, y] = centroid_click(src.scene.objects[std::size_t(src.object)].mask);
  svc.record_click(s0, t0, x, y);
  CHECK(svc.next_task(s0)["task_id"].get<long>() != t0);
  // Only one of two answers: a miss by default, excluded on request.
  auto r = svc.results(0);
  CHECK(r["partial"].get<bool>());
  CHECK(r["answered"] == 0);
  CHECK(r["h_acc"].get<double>() == 0.0);
  CHECK(svc.results(0, true)["h_acc"].is_null());
  CHECK_THROWS_AS(svc.aggregate_h_acc(0), ContractViolation);
}

TEST_CASE("service: scripted HTTP client") {
  ServiceConfig cfg;
  cfg.batch_size = 20;
  EvalService svc(make_pool(20), cfg);
  service::HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread th([&] { server.listen(); });

  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(10, 0);
  auto post_answer = [&](const std::string& session, long task, int x, int y) {
    nlohmann::json body = {{"session_id", session}, {"task_id", task}, {"x", x}, {"y", y}};
    return cli.Post("/api/answer", body.dump(), "application/json");
  };

  std::vector<std::string> sessions;
  for (int i = 0; i < 2; ++i) {
    auto r = cli.Post("/api/session");
    REQUIRE(r);
    REQUIRE(r->status == 200);
    sessions.push_back(nlohmann::json::parse(r->body)["session_id"].get<std::string>());
  }
  {
    auto r = cli.Post("/api/session");
    REQUIRE(r);
    CHECK(r->status == 503);
  }
  {
    auto r = cli.Get("/api/task?session=unknown");
    REQUIRE(r);
    CHECK(r->status == 404);
  }

  long first_task = -1;
  for (const auto& s : sessions) {
    for (;;) {
      auto r = cli.Get("/api/task?session=" + s);
      REQUIRE(r);
      REQUIRE(r->status == 200);
      const auto task = nlohmann::json::parse(r->body);
      if (task.contains("done")) break;
      const long id = task["task_id"].get<long>();
      if (first_task < 0) first_task = id;
      // The payload is a decodable PNG of the right size.
      const auto png = task["image_png_base64"].get<std::string>();
      CHECK(png.rfind("iVBORw0KGgo", 0) == 0);
      CHECK(task["width"] == 64);
      CHECK(task["height"] == 64);
      CHECK(task.contains("expression"));

      auto bad = post_answer(s, id, 1000, 0);
      REQUIRE(bad);
      CHECK(bad->status == 400);
      const auto& src = svc.source(id);
      const auto [x, y] = centroid_click(src.scene.objects[std::size_t(src.object)].mask);
      auto ok = post_answer(s, id, x, y);
      REQUIRE(ok);
      CHECK(ok->status == 200);
    }
  }
  auto res = cli.Get("/api/results?batch=0");
  REQUIRE(res);
  REQUIRE(res->status == 200);
  auto j = nlohmann::json::parse(res->body);
  CHECK(j["h_acc"].get<double>() == doctest::Approx(1.0));
  CHECK(j["answered"] == 20);
  CHECK_FALSE(j["partial"].get<bool>());

  auto dup = post_answer(sessions[0], first_task, 0, 0);
  REQUIRE(dup);
  CHECK(dup->status == 409);
  auto malformed = cli.Post("/api/answer", "{not json", "application/json");
  REQUIRE(malformed);
  CHECK(malformed->status == 400);
  res = cli.Get("/api/results?batch=0");
  REQUIRE(res);
  CHECK(nlohmann::json::parse(res->body)["h_acc"].get<double>() == doctest::Approx(1.0));
  auto missing = cli.Get("/api/results?batch=7");
  REQUIRE(missing);
  CHECK(missing->status == 404);

  server.stop();
  th.join();
}
