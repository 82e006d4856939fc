#include "ssd/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace ssd {

namespace {

int initial_threads() {
  if (const char* env = std::getenv("SSD_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::atomic<int> g_threads{initial_threads()};
thread_local bool t_in_worker = false;

// Lazily started pool. Workers pick chunk indices from a shared counter;
// which worker runs a chunk never affects the arithmetic inside it.
class Pool {
 public:
  void run(std::int64_t begin, std::int64_t end, std::int64_t chunk,
           const std::function<void(std::int64_t, std::int64_t)>& body) {
    std::unique_lock<std::mutex> lk(mu_);
    ensure_workers(g_threads.load() - 1);
    body_ = &body;
    begin_ = begin;
    end_ = end;
    chunk_ = chunk;
    next_.store(begin);
    pending_ = static_cast<int>(workers_.size());
    ++epoch_;
    cv_.notify_all();
    lk.unlock();

    drain();

    lk.lock();
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    body_ = nullptr;
  }

 private:
  void ensure_workers(int n) {
    while (static_cast<int>(workers_.size()) < n) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    t_in_worker = true;
    std::uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return epoch_ != seen; });
      seen = epoch_;
      lk.unlock();
      drain();
      lk.lock();
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  void drain() {
    for (;;) {
      std::int64_t b = next_.fetch_add(chunk_);
      if (b >= end_) break;
      std::int64_t e = std::min(b + chunk_, end_);
      (*body_)(b, e);
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  const std::function<void(std::int64_t, std::int64_t)>* body_ = nullptr;
  std::atomic<std::int64_t> next_{0};
  std::int64_t begin_ = 0, end_ = 0, chunk_ = 1;
  std::uint64_t epoch_ = 0;
  int pending_ = 0;
};

Pool& pool() {
  static Pool* p = new Pool();  // leaked; workers live for the process
  return *p;
}

}  // namespace

int num_threads() { return g_threads.load(); }

void set_num_threads(int n) {
  if (n >= 1) g_threads.store(n);
}

void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t, std::int64_t)>& body) {
  if (begin >= end) return;
  std::int64_t span = end - begin;
  int nt = g_threads.load();
  if (nt <= 1 || span == 1 || t_in_worker) {
    body(begin, end);
    return;
  }
  std::int64_t chunk = (span + nt * 4 - 1) / (nt * 4);
  if (chunk < 1) chunk = 1;
  pool().run(begin, end, chunk, body);
}

}  // namespace ssd
