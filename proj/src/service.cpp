#include "geofuse/service.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "geofuse/config.hpp"
#include "geofuse/error.hpp"

namespace geofuse {

// --- shard cache ------------------------------------------------------------

ShardCache::ShardCache(size_t capacity, Loader loader)
    : capacity_(std::max<size_t>(1, capacity)), loader_(std::move(loader)) {}

size_t ShardCache::size() const {
    std::lock_guard lk(mu_);
    return slots_.size();
}

std::shared_ptr<const MapShard> ShardCache::get(uint64_t image_id) {
    std::unique_lock lk(mu_);
    for (;;) {
        if (auto it = slots_.find(image_id); it != slots_.end()) {
            lru_.splice(lru_.begin(), lru_, it->second.lru_it);
            hits_.fetch_add(1);
            return it->second.shard;
        }
        if (auto fit = inflight_.find(image_id); fit != inflight_.end()) {
            auto entry = fit->second;
            entry->cv.wait(lk, [&] { return entry->done; });
            if (entry->error) std::rethrow_exception(entry->error);
            continue;  // should be cached now; reload if it was already evicted
        }

        auto entry = std::make_shared<Inflight>();
        inflight_.emplace(image_id, entry);
        lk.unlock();
        std::shared_ptr<const MapShard> shard;
        std::exception_ptr error;
        try {
            shard = loader_(image_id);
        } catch (...) {
            error = std::current_exception();
        }
        lk.lock();
        inflight_.erase(image_id);
        entry->error = error;
        entry->done = true;
        entry->cv.notify_all();
        if (error) std::rethrow_exception(error);

        lru_.push_front(image_id);
        slots_[image_id] = {shard, lru_.begin()};
        loads_.fetch_add(1);
        while (slots_.size() > capacity_) {
            slots_.erase(lru_.back());
            lru_.pop_back();
            evictions_.fetch_add(1);
        }
        return shard;
    }
}

// --- service config ---------------------------------------------------------

ServiceConfig load_service_config(const std::string& map_dir) {
    const Config cfg = Config::parse_file(map_dir + "/service.cfg");
    ServiceConfig sc;
    sc.camera.fx = cfg.get_double("camera", "fx");
    sc.camera.fy = cfg.get_double("camera", "fy");
    sc.camera.cx = cfg.get_double("camera", "cx");
    sc.camera.cy = cfg.get_double("camera", "cy");
    sc.camera.width = static_cast<int>(cfg.get_int("camera", "width"));
    sc.camera.height = static_cast<int>(cfg.get_int("camera", "height"));
    sc.camera.max_range = cfg.get_double("camera", "max_range", 35.0);
    sc.descriptor_dim = static_cast<int>(cfg.get_int("features", "descriptor_dim"));

    auto& lp = sc.localize;
    lp.retrieval.k = static_cast<int>(cfg.get_int("vls", "k", lp.retrieval.k));
    lp.retrieval.overfetch_factor =
        static_cast<int>(cfg.get_int("vls", "overfetch_factor", lp.retrieval.overfetch_factor));
    lp.retrieval.prior_radius = cfg.get_double("vls", "prior_radius", lp.retrieval.prior_radius);
    lp.retrieval.nms_radius = cfg.get_double("vls", "nms_radius", lp.retrieval.nms_radius);
    lp.ratio = static_cast<float>(cfg.get_double("vls", "ratio", lp.ratio));
    lp.pnp.iterations = static_cast<int>(cfg.get_int("vls", "pnp_iterations", lp.pnp.iterations));
    lp.pnp.reproj_threshold_px =
        cfg.get_double("vls", "reproj_threshold_px", lp.pnp.reproj_threshold_px);
    lp.dbscan_eps = cfg.get_double("vls", "dbscan_eps", lp.dbscan_eps);
    lp.dbscan_min_pts = static_cast<int>(cfg.get_int("vls", "dbscan_min_pts", lp.dbscan_min_pts));
    lp.pose_lambda = cfg.get_double("vls", "pose_lambda", lp.pose_lambda);
    lp.constraint.delta_L = cfg.get_double("vls", "delta_L", lp.constraint.delta_L);
    lp.constraint.delta_theta = cfg.get_double("vls", "delta_theta", lp.constraint.delta_theta);
    lp.constraint.camera_radius =
        cfg.get_double("vls", "camera_radius", lp.constraint.camera_radius);
    lp.constraint.camera_normal_max_angle =
        cfg.get_double("vls", "camera_normal_max_angle", lp.constraint.camera_normal_max_angle);
    lp.huber_px = cfg.get_double("vls", "huber_px", lp.huber_px);
    lp.workers = static_cast<int>(cfg.get_int("vls", "workers", lp.workers));
    return sc;
}

void write_service_config(const std::string& map_dir, const CameraModel& cam,
                          int descriptor_dim, const LocalizeParams& lp) {
    Config cfg;
    auto num = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.12g", v);
        return std::string(buf);
    };
    cfg.set("camera", "fx", num(cam.fx));
    cfg.set("camera", "fy", num(cam.fy));
    cfg.set("camera", "cx", num(cam.cx));
    cfg.set("camera", "cy", num(cam.cy));
    cfg.set("camera", "width", std::to_string(cam.width));
    cfg.set("camera", "height", std::to_string(cam.height));
    cfg.set("camera", "max_range", num(cam.max_range));
    cfg.set("features", "descriptor_dim", std::to_string(descriptor_dim));
    cfg.set("vls", "k", std::to_string(lp.retrieval.k));
    cfg.set("vls", "overfetch_factor", std::to_string(lp.retrieval.overfetch_factor));
    cfg.set("vls", "prior_radius", num(lp.retrieval.prior_radius));
    cfg.set("vls", "nms_radius", num(lp.retrieval.nms_radius));
    cfg.set("vls", "ratio", num(lp.ratio));
    cfg.set("vls", "pnp_iterations", std::to_string(lp.pnp.iterations));
    cfg.set("vls", "reproj_threshold_px", num(lp.pnp.reproj_threshold_px));
    cfg.set("vls", "dbscan_eps", num(lp.dbscan_eps));
    cfg.set("vls", "dbscan_min_pts", std::to_string(lp.dbscan_min_pts));
    cfg.set("vls", "pose_lambda", num(lp.pose_lambda));
    cfg.set("vls", "delta_L", num(lp.constraint.delta_L));
    cfg.set("vls", "delta_theta", num(lp.constraint.delta_theta));
    cfg.set("vls", "camera_radius", num(lp.constraint.camera_radius));
    cfg.set("vls", "camera_normal_max_angle", num(lp.constraint.camera_normal_max_angle));
    cfg.set("vls", "huber_px", num(lp.huber_px));
    cfg.set("vls", "workers", std::to_string(lp.workers));
    cfg.write_file(map_dir + "/service.cfg");
}

// --- service ----------------------------------------------------------------

VlsService::VlsService(const std::string& map_dir, size_t cache_capacity)
    : VlsService(map_dir, cache_capacity, load_service_config(map_dir)) {}

VlsService::VlsService(const std::string& map_dir, size_t cache_capacity, ServiceConfig config)
    : config_(std::move(config)),
      cache_(cache_capacity, [this](uint64_t id) { return reader_.load(id); }) {
    auto [index, reader] = read_map(map_dir);
    index_ = std::move(index);
    reader_ = std::move(reader);
}

WireResponse VlsService::handle(const WireRequest& req) {
    requests_.fetch_add(1);
    WireResponse resp;
    resp.request_id = req.request_id;
    resp.status = ResponseStatus::failed;
    resp.failure_stage = LocalizeStage::bad_request;

    const auto k = req.keypoints.size();
    if (k == 0 || req.descriptors.rows() != static_cast<int>(k) ||
        req.descriptors.cols() != config_.descriptor_dim ||
        req.global_descriptor.size() != static_cast<int>(index_.global_dim)) {
        return resp;
    }

    QueryFeatures query;
    query.keypoints = req.keypoints;
    query.descriptors = req.descriptors;
    query.global_descriptor = req.global_descriptor;

    try {
        const auto result =
            localize(index_, config_.camera, [this](uint64_t id) { return cache_.get(id); },
                     query, req.prior, config_.localize, req.request_id);
        if (result.ok) {
            resp.status = ResponseStatus::ok;
            resp.failure_stage = LocalizeStage::none;
            resp.inlier_count = static_cast<uint32_t>(result.inlier_count);
            resp.pose = result.pose;
        } else {
            resp.failure_stage = result.failure_stage;
        }
    } catch (const std::exception&) {
        resp.failure_stage = LocalizeStage::bad_request;
    }
    return resp;
}

// --- sockets ----------------------------------------------------------------

namespace {

bool read_exact(int fd, uint8_t* buf, size_t n) {
    size_t got = 0;
    while (got < n) {
        const ssize_t r = ::recv(fd, buf + got, n - got, 0);
        if (r == 0) return false;
        if (r < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        got += static_cast<size_t>(r);
    }
    return true;
}

bool write_all(int fd, const uint8_t* buf, size_t n) {
    size_t sent = 0;
    while (sent < n) {
        const ssize_t r = ::send(fd, buf + sent, n - sent, MSG_NOSIGNAL);
        if (r < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        sent += static_cast<size_t>(r);
    }
    return true;
}

}  // namespace

std::pair<std::string, uint16_t> parse_bind_addr(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) {
        throw Error(ErrorCode::InvalidArgument, "address must be host:port, got " + addr);
    }
    const std::string host = addr.substr(0, colon);
    const int port = std::stoi(addr.substr(colon + 1));
    if (port < 0 || port > 65535) {
        throw Error(ErrorCode::InvalidArgument, "port out of range in " + addr);
    }
    return {host.empty() ? "0.0.0.0" : host, static_cast<uint16_t>(port)};
}

TcpServer::TcpServer(VlsService& service, const std::string& bind_addr) : service_(service) {
    const auto [host, port] = parse_bind_addr(bind_addr);
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw Error(ErrorCode::IoError, "socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &sa.sin_addr) != 1) {
        ::close(listen_fd_);
        throw Error(ErrorCode::InvalidArgument, "bad bind host " + host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0 ||
        ::listen(listen_fd_, 64) != 0) {
        ::close(listen_fd_);
        throw Error(ErrorCode::IoError, "cannot bind " + bind_addr + ": " + std::strerror(errno));
    }
    socklen_t len = sizeof(sa);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&sa), &len);
    port_ = ntohs(sa.sin_port);
}

TcpServer::~TcpServer() { shutdown(); }

void TcpServer::start() {
    accept_thread_ = std::thread([this] { accept_loop(); });
}

void TcpServer::run() { accept_loop(); }

void TcpServer::accept_loop() {
    while (!stop_.load()) {
        pollfd pfd{listen_fd_, POLLIN, 0};
        const int rc = ::poll(&pfd, 1, 200);
        if (rc <= 0) continue;
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) continue;
        std::lock_guard lk(conn_mu_);
        if (stop_.load()) {
            ::close(fd);
            break;
        }
        conn_fds_.insert(fd);
        conn_threads_.emplace_back([this, fd] { handle_connection(fd); });
    }
}

void TcpServer::handle_connection(int fd) {
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    std::vector<uint8_t> payload;
    for (;;) {
        uint8_t header[kFrameHeaderSize];
        if (!read_exact(fd, header, sizeof(header))) break;
        FrameHeader fh{};
        WireRequest req;
        try {
            fh = decode_frame_header(header);
            if (fh.type != MsgType::request) throw FormatError("expected request frame", 4);
            payload.resize(fh.payload_len);
            if (!read_exact(fd, payload.data(), payload.size())) break;
            req = decode_request_payload(payload.data(), payload.size(),
                                         service_.config().descriptor_dim,
                                         service_.index().global_dim);
        } catch (const std::exception&) {
            break;  // malformed frame: drop this connection, others unaffected
        }
        const WireResponse resp = service_.handle(req);
        const auto out = encode_response_frame(resp);
        if (!write_all(fd, out.data(), out.size())) break;
    }
    ::close(fd);
    std::lock_guard lk(conn_mu_);
    conn_fds_.erase(fd);
}

void TcpServer::shutdown() {
    if (stop_.exchange(true)) return;
    if (listen_fd_ >= 0) {
        ::shutdown(listen_fd_, SHUT_RDWR);
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    {
        std::lock_guard lk(conn_mu_);
        for (int fd : conn_fds_) ::shutdown(fd, SHUT_RD);  // in-flight writes still drain
    }
    for (auto& t : conn_threads_) {
        if (t.joinable()) t.join();
    }
    if (listen_fd_ >= 0) {
        ::close(listen_fd_);
        listen_fd_ = -1;
    }
}

VlsClient::VlsClient(const std::string& host, uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error(ErrorCode::IoError, "socket() failed");
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    const std::string resolved = host == "localhost" ? "127.0.0.1" : host;
    if (::inet_pton(AF_INET, resolved.c_str(), &sa.sin_addr) != 1) {
        ::close(fd_);
        throw Error(ErrorCode::InvalidArgument, "bad host " + host);
    }
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
        ::close(fd_);
        throw Error(ErrorCode::IoError,
                    "cannot connect to " + host + ":" + std::to_string(port));
    }
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

VlsClient::~VlsClient() {
    if (fd_ >= 0) ::close(fd_);
}

WireResponse VlsClient::call(const WireRequest& req) {
    const auto frame = encode_request_frame(req);
    if (!write_all(fd_, frame.data(), frame.size())) {
        throw Error(ErrorCode::IoError, "request send failed");
    }
    uint8_t header[kFrameHeaderSize];
    if (!read_exact(fd_, header, sizeof(header))) {
        throw Error(ErrorCode::IoError, "connection closed before response");
    }
    const FrameHeader fh = decode_frame_header(header);
    if (fh.type != MsgType::response) throw FormatError("expected response frame", 4);
    std::vector<uint8_t> payload(fh.payload_len);
    if (!read_exact(fd_, payload.data(), payload.size())) {
        throw Error(ErrorCode::IoError, "truncated response");
    }
    return decode_response_payload(payload.data(), payload.size());
}

}  // namespace geofuse
