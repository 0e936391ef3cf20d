#include <filesystem>
#include <fstream>

#include "geofuse/binio.hpp"
#include "geofuse/error.hpp"
#include "geofuse/mapbuilder.hpp"

namespace geofuse {

namespace {

constexpr char kIndexMagic[4] = {'G', 'F', 'M', 'I'};
constexpr char kShardMagic[4] = {'G', 'F', 'M', 'S'};
constexpr uint16_t kMapVersion = 1;

void put_pose(ByteWriter& w, const Pose& p) {
    w.f64(p.t.x());
    w.f64(p.t.y());
    w.f64(p.t.z());
    w.f64(p.q.w());
    w.f64(p.q.x());
    w.f64(p.q.y());
    w.f64(p.q.z());
}

Pose get_pose(ByteReader& r) {
    // assigned directly, no re-normalization: stored poses are already
    // canonical and round-trips must be bit-exact
    Pose p;
    p.t.x() = r.f64();
    p.t.y() = r.f64();
    p.t.z() = r.f64();
    const double qw = r.f64(), qx = r.f64(), qy = r.f64(), qz = r.f64();
    p.q = Eigen::Quaterniond(qw, qx, qy, qz);
    return p;
}

}  // namespace

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::IoError, "cannot open " + path);
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
    return data;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
    if (!f) throw Error(ErrorCode::IoError, "write failed for " + path);
}

void write_map(const MapIndex& index, const std::vector<MapShard>& shards,
               const std::string& dir) {
    std::filesystem::create_directories(dir);

    ByteWriter w;
    w.bytes(kIndexMagic, 4);
    w.u16(kMapVersion);
    w.u16(static_cast<uint16_t>(index.global_dim));
    w.u32(static_cast<uint32_t>(index.entries.size()));
    for (const auto& e : index.entries) {
        w.u64(e.image_id);
        put_pose(w, e.pose);
        for (int i = 0; i < index.global_dim; ++i) w.f32(e.global_descriptor[i]);
        w.u16(static_cast<uint16_t>(e.shard_path.size()));
        w.bytes(e.shard_path.data(), e.shard_path.size());
    }
    write_file_bytes(dir + "/map.idx", w.buffer());

    for (const auto& shard : shards) {
        ByteWriter s;
        s.bytes(kShardMagic, 4);
        s.u16(kMapVersion);
        s.u16(static_cast<uint16_t>(shard.descriptor_dim));
        s.u32(static_cast<uint32_t>(shard.landmarks.size()));
        for (const auto& lm : shard.landmarks) {
            s.u64(lm.id);
            s.f64(lm.p3d.x());
            s.f64(lm.p3d.y());
            s.f64(lm.p3d.z());
            s.f32(lm.cone.n.x());
            s.f32(lm.cone.n.y());
            s.f32(lm.cone.n.z());
            s.f32(lm.cone.theta);
            s.f32(lm.cone.L);
            s.f32(lm.obs2d.x());
            s.f32(lm.obs2d.y());
            for (int i = 0; i < shard.descriptor_dim; ++i) s.f32(lm.descriptor[i]);
        }
        write_file_bytes(dir + "/shard_" + std::to_string(shard.image_id) + ".bin", s.buffer());
    }
}

MapShard read_shard_file(const std::string& path) {
    const auto data = read_file_bytes(path);
    ByteReader r(data.data(), data.size());
    r.expect_magic(kShardMagic, "shard");
    const uint16_t version = r.u16();
    if (version != kMapVersion) r.fail("unsupported shard version " + std::to_string(version));
    MapShard shard;
    shard.descriptor_dim = r.u16();
    const uint32_t count = r.u32();
    const auto base = path.find_last_of('/');
    const std::string name = base == std::string::npos ? path : path.substr(base + 1);
    if (name.size() > 10 && name.rfind("shard_", 0) == 0) {
        shard.image_id = std::stoull(name.substr(6, name.size() - 10));
    }
    shard.landmarks.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        MapLandmark lm;
        lm.id = r.u64();
        lm.p3d.x() = r.f64();
        lm.p3d.y() = r.f64();
        lm.p3d.z() = r.f64();
        lm.cone.n.x() = r.f32();
        lm.cone.n.y() = r.f32();
        lm.cone.n.z() = r.f32();
        lm.cone.theta = r.f32();
        lm.cone.L = r.f32();
        lm.obs2d.x() = r.f32();
        lm.obs2d.y() = r.f32();
        lm.descriptor.resize(shard.descriptor_dim);
        for (int d = 0; d < shard.descriptor_dim; ++d) lm.descriptor[d] = r.f32();
        shard.landmarks.push_back(std::move(lm));
    }
    if (r.remaining() != 0) r.fail("trailing bytes after shard payload");
    return shard;
}

ShardReader::ShardReader(std::string dir, const MapIndex& index) : dir_(std::move(dir)) {
    for (const auto& e : index.entries) paths_.emplace(e.image_id, e.shard_path);
}

std::shared_ptr<const MapShard> ShardReader::load(uint64_t image_id) const {
    const auto it = paths_.find(image_id);
    if (it == paths_.end()) {
        throw Error(ErrorCode::InvalidArgument,
                    "unknown shard image_id " + std::to_string(image_id));
    }
    auto shard = std::make_shared<MapShard>(read_shard_file(dir_ + "/" + it->second));
    shard->image_id = image_id;
    return shard;
}

std::pair<MapIndex, ShardReader> read_map(const std::string& dir) {
    const auto data = read_file_bytes(dir + "/map.idx");
    ByteReader r(data.data(), data.size());
    r.expect_magic(kIndexMagic, "index");
    const uint16_t version = r.u16();
    if (version != kMapVersion) r.fail("unsupported index version " + std::to_string(version));
    MapIndex index;
    index.global_dim = r.u16();
    const uint32_t count = r.u32();
    index.entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        MapIndexEntry e;
        e.image_id = r.u64();
        e.pose = get_pose(r);
        e.global_descriptor.resize(index.global_dim);
        for (int d = 0; d < index.global_dim; ++d) e.global_descriptor[d] = r.f32();
        const uint16_t len = r.u16();
        e.shard_path = r.str(len);
        index.entries.push_back(std::move(e));
    }
    if (r.remaining() != 0) r.fail("trailing bytes after index payload");
    ShardReader reader(dir, index);
    return {std::move(index), std::move(reader)};
}

}  // namespace geofuse
