#include "cascade/gateway/trace_appender.hpp"

#include <iostream>

namespace cascade::gateway {

TraceAppender::TraceAppender(const std::filesystem::path& path, TraceHeader header, std::size_t capacity)
    : header_(std::move(header)), capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("TraceAppender: capacity must be positive");
  header_.validate();
  out_.open(path, std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot open trace output " + path.string());
  out_ << to_json(header_).dump() << '\n';
  out_.flush();
  worker_ = std::thread([this] { run(); });
}

TraceAppender::~TraceAppender() { close(); }

bool TraceAppender::try_reserve() {
  std::lock_guard lock(mutex_);
  if (stop_ || reserved_ + queue_.size() >= capacity_) return false;
  ++reserved_;
  return true;
}

void TraceAppender::cancel() {
  std::lock_guard lock(mutex_);
  if (reserved_ > 0) --reserved_;
  drained_.notify_all();
}

void TraceAppender::commit(QueryTrace record) {
  {
    std::lock_guard lock(mutex_);
    if (reserved_ > 0) --reserved_;
    queue_.push_back(std::move(record));
  }
  cv_.notify_one();
}

void TraceAppender::flush() {
  std::unique_lock lock(mutex_);
  drained_.wait(lock, [this] { return queue_.empty() && !writing_; });
}

void TraceAppender::close() {
  {
    std::lock_guard lock(mutex_);
    if (stop_) return;
    stop_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
  out_.flush();
}

std::size_t TraceAppender::written() const {
  std::lock_guard lock(mutex_);
  return written_;
}

void TraceAppender::run() {
  std::unique_lock lock(mutex_);
  for (;;) {
    cv_.wait(lock, [this] { return stop_ || !queue_.empty(); });
    if (queue_.empty() && stop_) break;
    QueryTrace record = std::move(queue_.front());
    queue_.pop_front();
    writing_ = true;
    lock.unlock();
    try {
      validate_record(record, header_);
      out_ << to_json(record, header_.hidden_encoding).dump() << '\n';
      out_.flush();
    } catch (const std::exception& e) {
      std::cerr << R"({"level":"error","event":"trace_append_failed","message":)"
                << nlohmann::json(e.what()).dump() << "}\n";
    }
    lock.lock();
    ++written_;
    writing_ = false;
    if (queue_.empty()) drained_.notify_all();
  }
  writing_ = false;
  drained_.notify_all();
}

}  // namespace cascade::gateway
