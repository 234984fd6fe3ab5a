#pragma once

// Newline-delimited JSON over TCP.
//
// Request:  {"id": str, "tensor": {"shape": [C,H,W], "data_b64": str},
//            "attributes": [str]?}
//           {"id": str, "op": "register_branch", "path": str, "replace": bool?}
// Response: {"id": str, "scores": {attr: [float]}}
//           {"id": str, "registered": attr}
//           {"id": str, "error": code, "message": str}
//
// data_b64 is base64 of the little-endian f32 payload. Each connection gets a
// thread; a malformed request yields an error response and the connection
// stays open.

#include <openssl/evp.h>

#include <boost/asio.hpp>

#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "graftnet/registry.hpp"

namespace graftnet {

namespace asio = boost::asio;
using tcp = asio::ip::tcp;

inline std::string base64_encode(const void* data, std::size_t n) {
  std::string out(4 * ((n + 2) / 3), '\0');
  const int len = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  static_cast<const unsigned char*>(data), static_cast<int>(n));
  out.resize(static_cast<std::size_t>(len));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::kDecode, "base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * (text.size() / 4));
  const int len = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
  if (len < 0) throw Error(ErrorCode::kDecode, "invalid base64");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(len) - pad);
  return out;
}

inline json tensor_to_wire(const Tensor& t) {
  return json{{"shape", t.shape()}, {"data_b64", base64_encode(t.raw(), t.numel() * sizeof(float))}};
}

inline Tensor tensor_from_wire(const json& j) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("data_b64")) {
    throw Error(ErrorCode::kDecode, "tensor needs 'shape' and 'data_b64'");
  }
  Shape shape;
  try {
    shape = j.at("shape").get<Shape>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::kDecode, "tensor shape must be a list of positive integers");
  }
  if (shape.size() != 3 && shape.size() != 4) {
    throw Error(ErrorCode::kShapeMismatch, "tensor must be [C,H,W] or [N,C,H,W], got " +
                                               shape_str(shape));
  }
  const auto bytes = base64_decode(j.at("data_b64").get<std::string>());
  std::size_t numel = 1;
  for (auto d : shape) {
    if (d == 0 || d > (1u << 24)) throw Error(ErrorCode::kDecode, "tensor dimension out of range");
    numel *= d;
  }
  if (bytes.size() != numel * sizeof(float)) {
    throw Error(ErrorCode::kDecode, "payload has " + std::to_string(bytes.size()) +
                                        " bytes, shape " + shape_str(shape) + " needs " +
                                        std::to_string(numel * sizeof(float)));
  }
  std::vector<float> data(numel);
  std::memcpy(data.data(), bytes.data(), bytes.size());
  Tensor t(shape, std::move(data));
  require_finite(t, "request tensor");
  return t;
}

/// Scores for one image as a flat list, or one list per image for a batch.
inline json scores_to_wire(const ScoreMap& scores, bool batched) {
  json out = json::object();
  for (const auto& [attr, p] : scores) {
    const std::size_t n = p.dim(0), k = p.dim(1);
    if (!batched) {
      out[attr] = std::vector<float>(p.raw(), p.raw() + k);
      continue;
    }
    json rows = json::array();
    for (std::size_t i = 0; i < n; ++i) rows.push_back(std::vector<float>(p.raw() + i * k, p.raw() + (i + 1) * k));
    out[attr] = rows;
  }
  return out;
}

inline ScoreMap scores_from_wire(const json& j) {
  ScoreMap out;
  for (const auto& [attr, v] : j.items()) {
    const auto row = v.get<std::vector<float>>();
    out[attr] = Tensor({1, row.size()}, row);
  }
  return out;
}

/// Handles one request line; never throws.
inline json handle_request(Registry& registry, const std::string& line) {
  json id = nullptr;
  try {
    json req;
    try {
      req = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kDecode, std::string("malformed JSON: ") + e.what());
    }
    if (!req.is_object()) throw Error(ErrorCode::kDecode, "request must be a JSON object");
    id = req.value("id", json(nullptr));
    const std::string op = req.value("op", std::string("infer"));
    if (op == "register_branch") {
      const auto attr = registry.register_branch(
          std::filesystem::path(req.at("path").get<std::string>()), false,
          req.value("replace", false));
      return json{{"id", id}, {"registered", attr}};
    }
    if (op != "infer") throw Error(ErrorCode::kInvalidArgument, "unknown op '" + op + "'");
    if (!req.contains("tensor")) throw Error(ErrorCode::kDecode, "request has no tensor");
    const Tensor x = tensor_from_wire(req.at("tensor"));
    std::vector<std::string> filter;
    if (req.contains("attributes")) filter = req.at("attributes").get<std::vector<std::string>>();
    const auto scores = registry.infer(x, filter);
    return json{{"id", id}, {"scores", scores_to_wire(scores, x.rank() == 4)}};
  } catch (const Error& e) {
    return json{{"id", id}, {"error", to_string(e.code())}, {"message", e.what()}};
  } catch (const json::exception& e) {
    return json{{"id", id}, {"error", to_string(ErrorCode::kDecode)}, {"message", e.what()}};
  } catch (const std::exception& e) {
    return json{{"id", id}, {"error", "internal"}, {"message", e.what()}};
  }
}

struct ServerConfig {
  std::string host = "127.0.0.1";
  std::uint16_t port = 7077;  // 0 picks a free port
  std::size_t max_line_bytes = 64u << 20;
};

class Server {
 public:
  Server(Registry& registry, ServerConfig config)
      : registry_(registry), config_(std::move(config)), acceptor_(io_) {
    const tcp::endpoint ep(asio::ip::make_address(config_.host), config_.port);
    acceptor_.open(ep.protocol());
    acceptor_.set_option(tcp::acceptor::reuse_address(true));
    acceptor_.bind(ep);
    acceptor_.listen();
  }

  ~Server() { stop(); }

  std::uint16_t port() const { return acceptor_.local_endpoint().port(); }

  /// Accepts connections on a background thread.
  void start() {
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  /// Accepts connections on the calling thread until stop().
  void run() { accept_loop(); }

  void stop() {
    if (stopping_.exchange(true)) return;
    boost::system::error_code ec;
    if (accept_thread_.joinable()) {
      // A blocked accept() is not interrupted by close(); a loopback
      // connection wakes it so the loop can see the stop flag.
      const auto ep = acceptor_.local_endpoint(ec);
      if (!ec) {
        asio::io_context io;
        tcp::socket wake(io);
        wake.connect(tcp::endpoint(asio::ip::make_address(config_.host), ep.port()), ec);
      }
      accept_thread_.join();
    }
    acceptor_.close(ec);
    {
      std::lock_guard lock(mu_);
      for (auto& s : sockets_) s->shutdown(tcp::socket::shutdown_both, ec);
    }
    std::list<std::thread> threads;
    {
      std::lock_guard lock(mu_);
      threads.swap(threads_);
    }
    for (auto& t : threads)
      if (t.joinable()) t.join();
  }

 private:
  void accept_loop() {
    while (!stopping_) {
      auto socket = std::make_shared<tcp::socket>(io_);
      boost::system::error_code ec;
      acceptor_.accept(*socket, ec);
      if (ec) {
        if (stopping_) break;
        continue;
      }
      std::lock_guard lock(mu_);
      if (stopping_) break;
      sockets_.push_back(socket);
      threads_.emplace_back([this, socket] { serve(socket); });
    }
  }

  void serve(std::shared_ptr<tcp::socket> socket) {
    asio::streambuf buf(config_.max_line_bytes);
    boost::system::error_code ec;
    for (;;) {
      asio::read_until(*socket, buf, '\n', ec);
      if (ec) break;
      std::istream in(&buf);
      std::string line;
      std::getline(in, line);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::string out = handle_request(registry_, line).dump() + "\n";
      asio::write(*socket, asio::buffer(out), ec);
      if (ec) break;
    }
    std::lock_guard lock(mu_);
    socket->close(ec);
    sockets_.remove(socket);
  }

  Registry& registry_;
  ServerConfig config_;
  asio::io_context io_;
  tcp::acceptor acceptor_;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex mu_;
  std::list<std::shared_ptr<tcp::socket>> sockets_;
  std::list<std::thread> threads_;
};

/// Blocking line-protocol client.
class Client {
 public:
  Client(const std::string& host, std::uint16_t port) : socket_(io_) {
    tcp::resolver resolver(io_);
    asio::connect(socket_, resolver.resolve(host, std::to_string(port)));
  }

  json request(const json& req) {
    send_line(req.dump());
    return json::parse(read_line());
  }

  void send_line(const std::string& line) {
    const std::string out = line + "\n";
    asio::write(socket_, asio::buffer(out));
  }

  std::string read_line() {
    asio::read_until(socket_, buf_, '\n');
    std::istream in(&buf_);
    std::string line;
    std::getline(in, line);
    return line;
  }

 private:
  asio::io_context io_;
  tcp::socket socket_;
  asio::streambuf buf_;
};

}  // namespace graftnet
