#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "cascade/trace.hpp"

namespace cascade::gateway {

// Single writer thread fed by a bounded queue. Callers reserve a slot before
// doing expensive work so a full queue can be refused up front.
class TraceAppender {
 public:
  TraceAppender(const std::filesystem::path& path, TraceHeader header, std::size_t capacity);
  ~TraceAppender();

  TraceAppender(const TraceAppender&) = delete;
  TraceAppender& operator=(const TraceAppender&) = delete;

  const TraceHeader& header() const { return header_; }

  /// Claims a queue slot; false when the queue is full.
  bool try_reserve();
  /// Releases a reserved slot without writing.
  void cancel();
  /// Queues a record into a previously reserved slot.
  void commit(QueryTrace record);

  /// Blocks until every queued record is on disk.
  void flush();
  void close();

  std::size_t written() const;

 private:
  void run();

  TraceHeader header_;
  std::size_t capacity_;
  std::ofstream out_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable drained_;
  std::deque<QueryTrace> queue_;
  std::size_t reserved_ = 0;
  std::size_t written_ = 0;
  bool writing_ = false;
  bool stop_ = false;
  std::thread worker_;
};

}  // namespace cascade::gateway
