#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "talk3d/common.hpp"

namespace talk3d {

int thread_count() {
    static const int n = [] {
        if (const char* env = std::getenv("TALK3D_THREADS")) {
            const int v = std::atoi(env);
            if (v >= 1) return std::min(v, 64);
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return std::max(1, std::min<int>(static_cast<int>(hw), 16));
    }();
    return n;
}

namespace detail {

namespace {

/// Persistent worker pool. The caller runs slot 0 itself; workers handle the
/// rest. Jobs are whole-pool barriers, which is all the static partitioning
/// in parallel_for needs.
class Pool {
public:
    static Pool& instance() {
        static Pool* p = new Pool(thread_count());  // leaked: outlives detached workers
        return *p;
    }

    void dispatch(int nthreads, const std::function<void(int)>& fn) {
        std::unique_lock<std::mutex> lock(m_);
        fn_ = &fn;
        nactive_ = std::min<int>(nthreads - 1, static_cast<int>(workers_.size()));
        ndone_ = 0;
        first_error_ = nullptr;
        ++generation_;
        cv_start_.notify_all();
        lock.unlock();

        try {
            fn(0);
        } catch (...) {
            std::lock_guard<std::mutex> g(m_);
            if (!first_error_) first_error_ = std::current_exception();
        }

        lock.lock();
        cv_done_.wait(lock, [&] { return ndone_ == static_cast<int>(workers_.size()); });
        fn_ = nullptr;
        if (first_error_) std::rethrow_exception(first_error_);
    }

    int size() const { return static_cast<int>(workers_.size()) + 1; }

private:
    explicit Pool(int nthreads) {
        for (int t = 1; t < nthreads; ++t) {
            workers_.emplace_back([this, t] { worker_loop(t); });
            workers_.back().detach();
        }
    }

    void worker_loop(int slot) {
        std::uint64_t seen = 0;
        for (;;) {
            std::unique_lock<std::mutex> lock(m_);
            cv_start_.wait(lock, [&] { return generation_ != seen; });
            seen = generation_;
            const auto* fn = fn_;
            const bool active = slot <= nactive_;
            lock.unlock();
            if (active && fn) {
                try {
                    (*fn)(slot);
                } catch (...) {
                    std::lock_guard<std::mutex> g(m_);
                    if (!first_error_) first_error_ = std::current_exception();
                }
            }
            lock.lock();
            ++ndone_;
            if (ndone_ == static_cast<int>(workers_.size())) cv_done_.notify_one();
        }
    }

    std::mutex m_;
    std::condition_variable cv_start_, cv_done_;
    std::vector<std::thread> workers_;
    const std::function<void(int)>* fn_ = nullptr;
    std::uint64_t generation_ = 0;
    int nactive_ = 0;
    int ndone_ = 0;
    std::exception_ptr first_error_;
};

}  // namespace

void pool_dispatch(int nthreads, const std::function<void(int)>& fn) {
    Pool::instance().dispatch(nthreads, fn);
}

}  // namespace detail

}  // namespace talk3d
