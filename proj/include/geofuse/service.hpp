#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "geofuse/localizer.hpp"
#include "geofuse/mapbuilder.hpp"
#include "geofuse/wire.hpp"

namespace geofuse {

// LRU shard cache with single-flight loading: concurrent requests for the
// same shard share one disk read.
class ShardCache {
public:
    using Loader = std::function<std::shared_ptr<const MapShard>(uint64_t)>;

    ShardCache(size_t capacity, Loader loader);

    std::shared_ptr<const MapShard> get(uint64_t image_id);

    size_t size() const;
    uint64_t loads() const { return loads_.load(); }
    uint64_t evictions() const { return evictions_.load(); }
    uint64_t hits() const { return hits_.load(); }

private:
    struct Slot {
        std::shared_ptr<const MapShard> shard;
        std::list<uint64_t>::iterator lru_it;
    };
    struct Inflight {
        std::condition_variable cv;
        bool done = false;
        std::exception_ptr error;
    };

    size_t capacity_;
    Loader loader_;
    mutable std::mutex mu_;
    std::list<uint64_t> lru_;  // front = most recently used
    std::unordered_map<uint64_t, Slot> slots_;
    std::unordered_map<uint64_t, std::shared_ptr<Inflight>> inflight_;
    std::atomic<uint64_t> loads_{0}, evictions_{0}, hits_{0};
};

struct ServiceConfig {
    CameraModel camera;
    int descriptor_dim = 64;
    LocalizeParams localize;
};

// service.cfg lives next to map.idx; build-map writes it, serve reads it.
ServiceConfig load_service_config(const std::string& map_dir);
void write_service_config(const std::string& map_dir, const CameraModel& cam,
                          int descriptor_dim, const LocalizeParams& params);

// The visual localization service: eagerly resident index, lazily cached
// shards, per-request deterministic RNG seeded by request_id.
class VlsService {
public:
    VlsService(const std::string& map_dir, size_t cache_capacity);
    VlsService(const std::string& map_dir, size_t cache_capacity, ServiceConfig config);

    WireResponse handle(const WireRequest& req);

    size_t shards_loaded() const { return cache_.size(); }
    uint64_t shard_loads() const { return cache_.loads(); }
    uint64_t shard_evictions() const { return cache_.evictions(); }
    uint64_t requests_handled() const { return requests_.load(); }

    const MapIndex& index() const { return index_; }
    const ServiceConfig& config() const { return config_; }

private:
    ServiceConfig config_;
    MapIndex index_;
    ShardReader reader_;
    ShardCache cache_;
    std::atomic<uint64_t> requests_{0};
};

// Binary-protocol TCP front end; one thread per connection, requests on a
// connection answered in order.
class TcpServer {
public:
    TcpServer(VlsService& service, const std::string& bind_addr);
    ~TcpServer();

    TcpServer(const TcpServer&) = delete;
    TcpServer& operator=(const TcpServer&) = delete;

    uint16_t port() const { return port_; }
    void start();     // accept loop on a background thread
    void run();       // accept loop on the calling thread
    void shutdown();  // in-flight requests complete, listener closes

private:
    void accept_loop();
    void handle_connection(int fd);

    VlsService& service_;
    int listen_fd_ = -1;
    uint16_t port_ = 0;
    std::atomic<bool> stop_{false};
    std::thread accept_thread_;
    std::mutex conn_mu_;
    std::unordered_set<int> conn_fds_;
    std::vector<std::thread> conn_threads_;
};

class VlsClient {
public:
    VlsClient(const std::string& host, uint16_t port);
    ~VlsClient();

    VlsClient(const VlsClient&) = delete;
    VlsClient& operator=(const VlsClient&) = delete;

    WireResponse call(const WireRequest& req);

private:
    int fd_ = -1;
};

std::pair<std::string, uint16_t> parse_bind_addr(const std::string& addr);

}  // namespace geofuse
