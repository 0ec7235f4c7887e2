#pragma once

// Live training service: a trainer thread that owns the session, a command
// queue drained between batches, immutable published snapshots, and an
// HTTP + WebSocket front end on Boost.Beast.
//
//   GET  /snapshot            {snapshot_id, epoch, mse, running, embeddings, pinned}
//   GET  /status              {epoch, mse, running}
//   GET  /decode?x=&y=        PGM bytes; add &format=json for {x, y, height, width, pgm_base64}
//   POST /command             command JSON → {request_id, ok, error?}
//   WS   /live                first frame is the full snapshot, then one delta frame per
//                             published snapshot; text frames sent by the client are commands
//
// Commands: {"request_id": "...", "kind": K, ...} with K one of
//   Pause, Resume, Step {count}, Pin {moves: [{id, x, y}]}, Unpin {ids},
//   SetLr {lr}, Checkpoint {path}, Shutdown.

#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "gne/checkpoint.hpp"
#include "gne/trainer.hpp"
#include "gne/viz.hpp"

namespace gne {

// ---------------------------------------------------------------- commands

enum class CommandKind { Pause, Resume, Step, Pin, Unpin, SetLr, Checkpoint, Shutdown };

inline const char* to_string(CommandKind k) {
  switch (k) {
    case CommandKind::Pause: return "Pause";
    case CommandKind::Resume: return "Resume";
    case CommandKind::Step: return "Step";
    case CommandKind::Pin: return "Pin";
    case CommandKind::Unpin: return "Unpin";
    case CommandKind::SetLr: return "SetLr";
    case CommandKind::Checkpoint: return "Checkpoint";
    case CommandKind::Shutdown: return "Shutdown";
  }
  return "?";
}

inline std::optional<CommandKind> command_kind_from(std::string_view s) {
  for (auto k : {CommandKind::Pause, CommandKind::Resume, CommandKind::Step, CommandKind::Pin, CommandKind::Unpin,
                 CommandKind::SetLr, CommandKind::Checkpoint, CommandKind::Shutdown}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

struct Command {
  CommandKind kind = CommandKind::Pause;
  std::string request_id;
  std::size_t count = 1;       // Step
  std::vector<PinMove> moves;  // Pin
  std::vector<std::size_t> ids; // Unpin
  double lr = 0.0;             // SetLr
  std::string path;            // Checkpoint
};

struct CommandReply {
  std::string request_id;
  bool ok = true;
  std::string error;
};

inline nlohmann::json to_json(const CommandReply& r) {
  nlohmann::json j{{"request_id", r.request_id}, {"ok", r.ok}};
  if (!r.ok) j["error"] = r.error;
  return j;
}

/// Rejected command text; carries the request id when one could be read.
class BadCommand : public ParseError {
 public:
  BadCommand(const std::string& what, std::string id) : ParseError(what), request_id(std::move(id)) {}
  std::string request_id;
};

namespace detail {

inline std::size_t unsigned_field(const nlohmann::json& v, const char* name, const std::string& id) {
  if (!v.is_number_unsigned()) throw BadCommand(std::string(name) + " must be a non-negative integer", id);
  return v.get<std::size_t>();
}

} // namespace detail

inline Command command_from_json(const nlohmann::json& j) {
  using detail::unsigned_field;
  if (!j.is_object()) throw BadCommand("command must be a JSON object", "");
  std::string id;
  if (auto it = j.find("request_id"); it != j.end() && it->is_string()) id = it->get<std::string>();
  try {
    Command c;
    if (!j.contains("request_id") || !j["request_id"].is_string()) throw BadCommand("missing string request_id", id);
    c.request_id = id;
    if (!j.contains("kind") || !j["kind"].is_string()) throw BadCommand("missing string kind", id);
    const auto kind = command_kind_from(j["kind"].get<std::string>());
    if (!kind) throw BadCommand("unknown command kind '" + j["kind"].get<std::string>() + "'", id);
    c.kind = *kind;
    switch (c.kind) {
      case CommandKind::Step:
        if (j.contains("count")) c.count = unsigned_field(j["count"], "count", id);
        if (c.count < 1) throw BadCommand("Step count must be >= 1", id);
        break;
      case CommandKind::Pin:
        for (const auto& m : j.at("moves")) {
          c.moves.push_back({unsigned_field(m.at("id"), "id", id), {m.at("x").get<double>(), m.at("y").get<double>()}});
        }
        break;
      case CommandKind::Unpin:
        for (const auto& v : j.at("ids")) c.ids.push_back(unsigned_field(v, "ids", id));
        break;
      case CommandKind::SetLr: c.lr = j.at("lr").get<double>(); break;
      case CommandKind::Checkpoint: c.path = j.at("path").get<std::string>(); break;
      default: break;
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw BadCommand(std::string("malformed command fields: ") + e.what(), id);
  }
}

inline Command parse_command(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw BadCommand(std::string("malformed JSON: ") + e.what(), "");
  }
  return command_from_json(j);
}

// --------------------------------------------------------------- snapshots

inline double round5(double v) { return std::round(v * 1e5) / 1e5; }

struct Snapshot {
  std::uint64_t id = 0;
  std::size_t epoch = 0;
  double mse = 0.0;
  bool running = false;
  Matrix embeddings; // rounded to 5 decimals
  std::vector<std::size_t> pinned;
  std::shared_ptr<const Model> model;
  std::size_t cell_h = 1, cell_w = 1;
  std::string json; // serialised once at publication
};

inline nlohmann::json status_json(const Snapshot& s) {
  return {{"epoch", s.epoch}, {"mse", s.mse}, {"running", s.running}};
}

inline nlohmann::json snapshot_json(const Snapshot& s) {
  nlohmann::json j = status_json(s);
  j["snapshot_id"] = s.id;
  nlohmann::json pts = nlohmann::json::array();
  for (std::size_t r = 0; r < s.embeddings.rows(); ++r) {
    pts.push_back(std::vector<double>(s.embeddings.row(r).begin(), s.embeddings.row(r).end()));
  }
  j["embeddings"] = std::move(pts);
  j["pinned"] = s.pinned;
  return j;
}

/// Cell image for a latent point from the snapshot's frozen model copy.
inline ImageSheet snapshot_decode(const Snapshot& s, double x, double y) {
  return std::visit([&](const auto& m) { return decode_cell(m, x, y, s.cell_h, s.cell_w); }, *s.model);
}

// ------------------------------------------------------------ live trainer

/// Sole owner of the session. Commands are queued from any thread and applied
/// between batches; Pause, Checkpoint and Shutdown complete at the next epoch
/// boundary and reply then.
class LiveTrainer {
 public:
  using ReplyFn = std::function<void(const CommandReply&)>;
  using SnapshotFn = std::function<void(std::shared_ptr<const Snapshot>)>;

  explicit LiveTrainer(Session s, bool running = true) : s_(std::move(s)), running_(running) {
    validate_session(s_);
    last_mse_ = s_.history.empty() ? evaluate_mse(s_.model, s_.dataset) : s_.history.back().train_mse;
    publish();
  }

  ~LiveTrainer() {
    request_stop();
    join();
  }

  LiveTrainer(const LiveTrainer&) = delete;
  LiveTrainer& operator=(const LiveTrainer&) = delete;

  /// Listeners run on the trainer thread; set them before start().
  void on_snapshot(SnapshotFn f) { on_snapshot_ = std::move(f); }
  void on_stopped(std::function<void()> f) { on_stopped_ = std::move(f); }

  void start() { thread_ = std::thread([this] { loop(); }); }

  void submit(Command c, ReplyFn done) {
    {
      std::lock_guard lk(mu_);
      if (!closed_) {
        queue_.push_back({std::move(c), std::move(done)});
        cv_.notify_one();
        return;
      }
    }
    done({c.request_id, false, "trainer has shut down"});
  }

  std::shared_ptr<const Snapshot> snapshot() const {
    std::lock_guard lk(snap_mu_);
    return snap_;
  }

  void request_stop() {
    std::lock_guard lk(mu_);
    stop_requested_ = true;
    cv_.notify_one();
  }

  void join() {
    if (thread_.joinable()) thread_.join();
  }

  bool finished() const { return finished_.load(); }

  /// The session; only safe to touch once the trainer thread has been joined.
  Session& session() { return s_; }

 private:
  struct Pending {
    Command cmd;
    ReplyFn done;
  };

  bool active() const { return running_ || steps_ > 0; }

  void loop() {
    while (true) {
      {
        std::unique_lock lk(mu_);
        if (!active()) cv_.wait(lk, [&] { return !queue_.empty() || stop_requested_; });
        if (stop_requested_) shutdown_ = true;
      }
      const bool changed = drain(false);
      if (shutdown_) break;
      if (active()) {
        try {
          const EpochReport r = train_epoch(s_, [this](Session&) { drain(true); });
          last_mse_ = r.mean_train_mse;
        } catch (const std::exception& e) {
          std::cerr << "training stopped: " << e.what() << "\n";
          running_ = false;
          steps_ = 0;
        }
        if (steps_ > 0) --steps_;
        publish();
        finish_deferred();
      } else if (changed) {
        publish();
      }
      flush_replies();
      if (shutdown_) break;
    }
    std::deque<Pending> left;
    {
      std::lock_guard lk(mu_);
      closed_ = true;
      left.swap(queue_);
    }
    for (auto& p : left) p.done({p.cmd.request_id, false, "trainer has shut down"});
    running_ = false;
    steps_ = 0;
    publish();
    finish_deferred();
    flush_replies();
    finished_ = true;
    if (on_stopped_) on_stopped_();
  }

  /// Applies queued commands; returns true when visible state changed.
  bool drain(bool mid_epoch) {
    std::deque<Pending> batch;
    {
      std::lock_guard lk(mu_);
      batch.swap(queue_);
    }
    bool changed = false;
    for (auto& p : batch) changed |= apply(p, mid_epoch);
    if (mid_epoch) flush_replies();
    return changed;
  }

  /// Replies wait until the snapshot showing their effect has been published.
  void flush_replies() {
    for (auto& [done, reply] : replies_) done(reply);
    replies_.clear();
  }

  bool apply(Pending& p, bool mid_epoch) {
    const Command& c = p.cmd;
    auto ok = [&] { replies_.emplace_back(p.done, CommandReply{c.request_id, true, {}}); };
    auto fail = [&](const std::string& why) { replies_.emplace_back(p.done, CommandReply{c.request_id, false, why}); };
    switch (c.kind) {
      case CommandKind::Pause:
        running_ = false;
        steps_ = 0;
        if (mid_epoch) deferred_.push_back(std::move(p));
        else ok();
        return true;
      case CommandKind::Resume:
        running_ = true;
        ok();
        return true;
      case CommandKind::Step:
        running_ = false;
        steps_ = c.count;
        ok();
        return true;
      case CommandKind::Pin:
        try {
          pin_rows(s_, c.moves);
        } catch (const Error& e) {
          fail(e.what());
          return false;
        }
        ok();
        return true;
      case CommandKind::Unpin:
        unpin_rows(s_, c.ids);
        ok();
        return true;
      case CommandKind::SetLr:
        if (!std::isfinite(c.lr) || c.lr < 0.0) {
          fail("learning rate must be finite and >= 0");
          return false;
        }
        s_.adam.lr = c.lr;
        ok();
        return false;
      case CommandKind::Checkpoint:
        if (mid_epoch) {
          deferred_.push_back(std::move(p));
        } else {
          checkpoint(p);
        }
        return false;
      case CommandKind::Shutdown:
        shutdown_ = true;
        running_ = false;
        steps_ = 0;
        ok();
        return true;
    }
    return false;
  }

  void checkpoint(Pending& p) {
    try {
      save_checkpoint(s_, p.cmd.path);
      replies_.emplace_back(p.done, CommandReply{p.cmd.request_id, true, {}});
    } catch (const Error& e) {
      replies_.emplace_back(p.done, CommandReply{p.cmd.request_id, false, e.what()});
    }
  }

  void finish_deferred() {
    for (auto& p : deferred_) {
      if (p.cmd.kind == CommandKind::Checkpoint) checkpoint(p);
      else replies_.emplace_back(p.done, CommandReply{p.cmd.request_id, true, {}});
    }
    deferred_.clear();
  }

  void publish() {
    auto snap = std::make_shared<Snapshot>();
    snap->epoch = s_.epoch;
    snap->mse = last_mse_;
    snap->running = active();
    snap->model = std::make_shared<const Model>(s_.model);
    snap->embeddings = s_.is_gne() ? s_.gne().embeddings() : vae_encode_mean(s_.vae(), s_.dataset.data);
    for (double& v : snap->embeddings.values()) v = round5(v);
    snap->pinned.assign(s_.pins.rows.begin(), s_.pins.rows.end());
    std::tie(snap->cell_h, snap->cell_w) = s_.dataset.cell_shape();
    {
      std::lock_guard lk(snap_mu_);
      snap->id = ++next_snapshot_id_;
      snap->json = snapshot_json(*snap).dump();
      snap_ = snap;
    }
    if (on_snapshot_) on_snapshot_(snap);
  }

  // Trainer-thread state.
  Session s_;
  bool running_;
  std::size_t steps_ = 0;
  bool shutdown_ = false;
  double last_mse_ = 0.0;
  std::vector<Pending> deferred_;
  std::vector<std::pair<ReplyFn, CommandReply>> replies_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Pending> queue_;
  bool stop_requested_ = false;
  bool closed_ = false;

  mutable std::mutex snap_mu_;
  std::shared_ptr<const Snapshot> snap_;
  std::uint64_t next_snapshot_id_ = 0;

  SnapshotFn on_snapshot_;
  std::function<void()> on_stopped_;
  std::thread thread_;
  std::atomic<bool> finished_{false};
};

// -------------------------------------------------------------- HTTP + WS

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

namespace detail {

inline std::string base64(std::string_view bytes) {
  std::string out(beast::detail::base64::encoded_size(bytes.size()), '\0');
  out.resize(beast::detail::base64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

/// key=value pairs of a query string (no percent-decoding; values are numbers or words).
inline std::map<std::string, std::string> parse_query(std::string_view q) {
  std::map<std::string, std::string> out;
  while (!q.empty()) {
    const auto amp = q.find('&');
    const auto part = q.substr(0, amp);
    const auto eq = part.find('=');
    if (eq == std::string_view::npos) out[std::string(part)] = "";
    else out[std::string(part.substr(0, eq))] = std::string(part.substr(eq + 1));
    if (amp == std::string_view::npos) break;
    q.remove_prefix(amp + 1);
  }
  return out;
}

/// Whole-string strtod; nullopt when the text is not a number.
inline std::optional<double> parse_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size()) return std::nullopt;
  return v;
}

/// WebSocket frame for a snapshot relative to the last one sent on that socket.
inline std::string delta_frame(const Snapshot& s, const Matrix& prev) {
  nlohmann::json j = status_json(s);
  j["type"] = "delta";
  j["snapshot_id"] = s.id;
  nlohmann::json deltas = nlohmann::json::array();
  for (std::size_t r = 0; r < s.embeddings.rows(); ++r) {
    if (prev.rows() == s.embeddings.rows() && prev(r, 0) == s.embeddings(r, 0) &&
        prev(r, 1) == s.embeddings(r, 1)) {
      continue;
    }
    deltas.push_back({{"id", r}, {"x", s.embeddings(r, 0)}, {"y", s.embeddings(r, 1)}});
  }
  j["deltas"] = std::move(deltas);
  j["pinned"] = s.pinned;
  return j.dump();
}

} // namespace detail

class Server;

class WsSession : public std::enable_shared_from_this<WsSession> {
 public:
  WsSession(tcp::socket&& socket, Server& server) : ws_(std::move(socket)), server_(server) {}

  void run(http::request<http::string_body> req) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
  }

  /// Thread-safe: queues a frame for this snapshot.
  void push(std::shared_ptr<const Snapshot> s) {
    net::post(ws_.get_executor(), [self = shared_from_this(), s] { self->push_on_strand(*s); });
  }

  void close() {
    net::post(ws_.get_executor(), [self = shared_from_this()] {
      self->closing_ = true;
      beast::error_code ec;
      beast::get_lowest_layer(self->ws_).socket().close(ec);
    });
  }

 private:
  void on_accept(beast::error_code ec);

  void push_on_strand(const Snapshot& s) {
    if (!open_ || s.id <= last_id_) return;
    last_id_ = s.id;
    if (!sent_full_) {
      nlohmann::json j = nlohmann::json::parse(s.json);
      j["type"] = "snapshot";
      send(j.dump());
      sent_full_ = true;
    } else {
      send(detail::delta_frame(s, last_sent_));
    }
    last_sent_ = s.embeddings;
  }

  void send(std::string frame) {
    outbox_.push_back(std::move(frame));
    if (outbox_.size() == 1) do_write();
  }

  void do_write() {
    ws_.text(true);
    ws_.async_write(net::buffer(outbox_.front()),
                    beast::bind_front_handler(&WsSession::on_write, shared_from_this()));
  }

  void on_write(beast::error_code ec, std::size_t) {
    if (ec) return;
    outbox_.pop_front();
    if (!outbox_.empty()) do_write();
  }

  void do_read() {
    ws_.async_read(buffer_, beast::bind_front_handler(&WsSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t);

  websocket::stream<beast::tcp_stream> ws_;
  Server& server_;
  beast::flat_buffer buffer_;
  std::deque<std::string> outbox_;
  Matrix last_sent_;
  std::uint64_t last_id_ = 0;
  bool sent_full_ = false;
  bool open_ = false;
  bool closing_ = false;
  std::set<std::string> seen_ids_;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(tcp::socket&& socket, Server& server) : stream_(std::move(socket)), server_(server) {}

  void run() {
    net::dispatch(stream_.get_executor(), beast::bind_front_handler(&HttpSession::do_read, shared_from_this()));
  }

 private:
  using Response = http::response<http::string_body>;

  void do_read() {
    req_ = {};
    stream_.expires_after(std::chrono::seconds(60));
    http::async_read(stream_, buffer_, req_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
  }

  void on_read(beast::error_code ec, std::size_t);

  Response make(http::status st, std::string content_type, std::string body) const {
    Response res{st, req_.version()};
    res.set(http::field::server, "gne");
    res.set(http::field::content_type, content_type);
    res.set(http::field::access_control_allow_origin, "*");
    res.keep_alive(req_.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
  }

  Response json(http::status st, const nlohmann::json& j) const { return make(st, "application/json", j.dump()); }

  Response error(http::status st, const std::string& why) const { return json(st, {{"ok", false}, {"error", why}}); }

  void send(Response res) {
    auto sp = std::make_shared<Response>(std::move(res));
    http::async_write(stream_, *sp, [self = shared_from_this(), sp](beast::error_code ec, std::size_t) {
      if (ec) return;
      if (sp->need_eof()) {
        beast::error_code ignored;
        self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
        return;
      }
      self->do_read();
    });
  }

  void handle();
  void handle_decode(const std::map<std::string, std::string>& q);
  void handle_command();

  beast::tcp_stream stream_;
  Server& server_;
  beast::flat_buffer buffer_;
  http::request<http::string_body> req_;
};

class Server {
 public:
  /// Binds immediately; port 0 picks a free port (see port()).
  Server(LiveTrainer& trainer, unsigned short port, const std::string& address = "127.0.0.1")
      : trainer_(trainer), acceptor_(ioc_) {
    const tcp::endpoint ep(net::ip::make_address(address), port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(net::socket_base::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen(net::socket_base::max_listen_connections);
    trainer_.on_snapshot([this](std::shared_ptr<const Snapshot> s) { broadcast(std::move(s)); });
    trainer_.on_stopped([this] { stop(); });
  }

  /// The trainer's listeners point back here, so it is stopped first.
  ~Server() {
    trainer_.request_stop();
    trainer_.join();
  }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const { return acceptor_.local_endpoint().port(); }

  LiveTrainer& trainer() { return trainer_; }

  /// Serves until stop(); blocks the calling thread.
  void run() {
    do_accept();
    ioc_.run();
  }

  /// Thread-safe. Lets in-flight replies drain briefly, then stops the loop.
  void stop() {
    if (stopping_.exchange(true)) return;
    net::post(ioc_, [this] {
      beast::error_code ec;
      acceptor_.close(ec);
      auto timer = std::make_shared<net::steady_timer>(ioc_, std::chrono::milliseconds(200));
      timer->async_wait([this, timer](beast::error_code) {
        for (auto& w : live_sessions()) w->close();
        ioc_.stop();
      });
    });
  }

  void add_ws(const std::shared_ptr<WsSession>& s) {
    std::lock_guard lk(ws_mu_);
    ws_.push_back(s);
  }

  void broadcast(std::shared_ptr<const Snapshot> s) {
    for (auto& w : live_sessions()) w->push(s);
  }

 private:
  std::vector<std::shared_ptr<WsSession>> live_sessions() {
    std::lock_guard lk(ws_mu_);
    std::vector<std::shared_ptr<WsSession>> out;
    std::erase_if(ws_, [](const auto& w) { return w.expired(); });
    for (auto& w : ws_)
      if (auto p = w.lock()) out.push_back(std::move(p));
    return out;
  }

  void do_accept() {
    acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket socket) {
      if (ec) return;
      std::make_shared<HttpSession>(std::move(socket), *this)->run();
      do_accept();
    });
  }

  LiveTrainer& trainer_;
  net::io_context ioc_;
  tcp::acceptor acceptor_;
  std::atomic<bool> stopping_{false};
  std::mutex ws_mu_;
  std::vector<std::weak_ptr<WsSession>> ws_;
};

// ------------------------------------------------------ session handlers

inline void WsSession::on_accept(beast::error_code ec) {
  if (ec) return;
  open_ = true;
  push_on_strand(*server_.trainer().snapshot());
  do_read();
}

inline void WsSession::on_read(beast::error_code ec, std::size_t) {
  if (ec) {
    open_ = false;
    return;
  }
  const std::string text = beast::buffers_to_string(buffer_.data());
  buffer_.consume(buffer_.size());
  auto reply_frame = [](const CommandReply& r) {
    nlohmann::json j = to_json(r);
    j["type"] = "reply";
    return j.dump();
  };
  try {
    Command c = parse_command(text);
    if (!seen_ids_.insert(c.request_id).second) {
      send(reply_frame({c.request_id, false, "duplicate request_id on this connection"}));
    } else {
      server_.trainer().submit(std::move(c), [self = shared_from_this(), reply_frame](const CommandReply& r) {
        net::post(self->ws_.get_executor(), [self, frame = reply_frame(r)] {
          if (self->open_) self->send(frame);
        });
      });
    }
  } catch (const BadCommand& e) {
    send(reply_frame({e.request_id, false, e.what()}));
  }
  do_read();
}

inline void HttpSession::on_read(beast::error_code ec, std::size_t) {
  if (ec == http::error::end_of_stream) {
    beast::error_code ignored;
    stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
    return;
  }
  if (ec) return;
  if (websocket::is_upgrade(req_)) {
    const std::string_view target(req_.target().data(), req_.target().size());
    if (target.substr(0, target.find('?')) == "/live") {
      auto ws = std::make_shared<WsSession>(stream_.release_socket(), server_);
      server_.add_ws(ws);
      ws->run(std::move(req_));
      return;
    }
  }
  handle();
}

inline void HttpSession::handle() {
  const std::string_view target(req_.target().data(), req_.target().size());
  const auto qpos = target.find('?');
  const std::string_view path = target.substr(0, qpos);
  const auto query = detail::parse_query(qpos == std::string_view::npos ? std::string_view{} : target.substr(qpos + 1));
  const bool get = req_.method() == http::verb::get;

  if (path == "/snapshot" && get) {
    return send(make(http::status::ok, "application/json", server_.trainer().snapshot()->json));
  }
  if (path == "/status" && get) {
    return send(json(http::status::ok, status_json(*server_.trainer().snapshot())));
  }
  if (path == "/decode" && get) return handle_decode(query);
  if (path == "/command" && req_.method() == http::verb::post) return handle_command();
  if (path == "/snapshot" || path == "/status" || path == "/decode" || path == "/command") {
    return send(error(http::status::method_not_allowed, "method not allowed"));
  }
  send(error(http::status::not_found, "no route for " + std::string(path)));
}

inline void HttpSession::handle_decode(const std::map<std::string, std::string>& q) {
  const auto xs = q.find("x"), ys = q.find("y");
  if (xs == q.end() || ys == q.end()) return send(error(http::status::bad_request, "decode needs x and y"));
  const auto x = detail::parse_real(xs->second), y = detail::parse_real(ys->second);
  if (!x || !y) return send(error(http::status::bad_request, "x and y must be numbers"));
  if (!std::isfinite(*x) || !std::isfinite(*y)) {
    return send(error(http::status::unprocessable_entity, "x and y must be finite"));
  }
  const auto snap = server_.trainer().snapshot();
  ImageSheet cell;
  try {
    cell = snapshot_decode(*snap, *x, *y);
  } catch (const Error& e) {
    return send(error(http::status::bad_request, e.what()));
  }
  const std::string pgm = encode_pgm(cell);
  const auto fmt = q.find("format");
  if (fmt != q.end() && fmt->second == "json") {
    return send(json(http::status::ok, {{"x", *x},
                                        {"y", *y},
                                        {"height", cell.height},
                                        {"width", cell.width},
                                        {"pgm_base64", detail::base64(pgm)}}));
  }
  send(make(http::status::ok, "application/octet-stream", pgm));
}

inline void HttpSession::handle_command() {
  Command c;
  try {
    c = parse_command(req_.body());
  } catch (const BadCommand& e) {
    return send(json(http::status::bad_request, to_json(CommandReply{e.request_id, false, e.what()})));
  }
  server_.trainer().submit(std::move(c), [self = shared_from_this()](const CommandReply& r) {
    net::post(self->stream_.get_executor(), [self, r] {
      self->send(self->json(r.ok ? http::status::ok : http::status::unprocessable_entity, to_json(r)));
    });
  });
}

/// Runs the live service over `session` until a Shutdown command and returns
/// the final session. `on_listening` receives the bound port.
inline Session serve(Session session, unsigned short port, bool start_running = true,
                     const std::function<void(unsigned short)>& on_listening = {}) {
  LiveTrainer trainer(std::move(session), start_running);
  Server server(trainer, port);
  if (on_listening) on_listening(server.port());
  trainer.start();
  server.run();
  trainer.request_stop();
  trainer.join();
  return std::move(trainer.session());
}

} // namespace gne
