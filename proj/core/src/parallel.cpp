#include "thrid/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <thread>
#include <vector>

namespace thrid {
namespace {

int g_thread_cap = 0;  // 0 = hardware default, resolved lazily
thread_local bool g_inside_pool = false;

int resolve_cap() {
  if (g_thread_cap > 0) return g_thread_cap;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Persistent pool. Chunk c of a job covers [n*c/k, n*(c+1)/k); chunk 0 runs on
// the calling thread, chunk w+1 on worker w. Chunks never overlap, so the
// split is free of data races by construction.
class Pool {
 public:
  explicit Pool(int workers) : workers_(workers) {
    threads_.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      threads_.emplace_back([this, w] { run_worker(w); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_work_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int workers() const { return workers_; }

  void run(std::size_t n, int chunks, const std::function<void(std::size_t, std::size_t)>& fn) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      job_ = &fn;
      job_n_ = n;
      job_chunks_ = chunks;
      pending_.store(chunks, std::memory_order_release);
      ++generation_;
    }
    cv_work_.notify_all();
    run_chunk(0);
    std::unique_lock<std::mutex> lock(mu_);
    cv_done_.wait(lock, [this] { return pending_.load(std::memory_order_acquire) == 0; });
    job_ = nullptr;
  }

 private:
  void run_chunk(int c) {
    const std::size_t n = job_n_;
    const std::size_t k = static_cast<std::size_t>(job_chunks_);
    const std::size_t begin = n * static_cast<std::size_t>(c) / k;
    const std::size_t end = n * static_cast<std::size_t>(c + 1) / k;
    g_inside_pool = true;
    if (begin < end) (*job_)(begin, end);
    g_inside_pool = false;
    if (pending_.fetch_sub(1, std::memory_order_acq_rel) == 1) {
      std::lock_guard<std::mutex> lock(mu_);
      cv_done_.notify_all();
    }
  }

  void run_worker(int w) {
    std::uint64_t seen = 0;
    for (;;) {
      int chunk = -1;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_work_.wait(lock, [&, this] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        if (w + 1 < job_chunks_) chunk = w + 1;
      }
      if (chunk >= 0) run_chunk(chunk);
    }
  }

  const int workers_;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_work_;
  std::condition_variable cv_done_;
  const std::function<void(std::size_t, std::size_t)>* job_ = nullptr;
  std::size_t job_n_ = 0;
  int job_chunks_ = 0;
  std::uint64_t generation_ = 0;
  std::atomic<int> pending_{0};
  bool stop_ = false;
};

std::mutex g_pool_mu;
Pool* g_pool = nullptr;

Pool* pool_for(int cap) {
  std::lock_guard<std::mutex> lock(g_pool_mu);
  if (g_pool && g_pool->workers() != cap - 1) {
    delete g_pool;
    g_pool = nullptr;
  }
  if (!g_pool) g_pool = new Pool(cap - 1);
  return g_pool;
}

}  // namespace

void set_threads(int n) { g_thread_cap = n > 0 ? n : 0; }

int thread_count() { return resolve_cap(); }

void parallel_chunks(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  const int cap = resolve_cap();
  const int chunks = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(cap), n));
  if (chunks <= 1 || g_inside_pool) {
    fn(0, n);
    return;
  }
  pool_for(cap)->run(n, chunks, fn);
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  parallel_chunks(n, [&fn](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
  });
}

}  // namespace thrid
