#pragma once

#include <Eigen/Core>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace geofuse {

// Minimal sectioned key-value text config:
//   [section]
//   key = value        # comment
// Values are whitespace-separated tokens; vectors are written "x y z".
class Config {
public:
    Config() = default;

    static Config parse_file(const std::string& path);
    static Config parse_string(const std::string& text, const std::string& origin = "<string>");

    bool has(const std::string& section, const std::string& key) const;

    std::string get_string(const std::string& section, const std::string& key) const;
    std::string get_string(const std::string& section, const std::string& key,
                           const std::string& fallback) const;
    double get_double(const std::string& section, const std::string& key) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    int64_t get_int(const std::string& section, const std::string& key) const;
    int64_t get_int(const std::string& section, const std::string& key, int64_t fallback) const;
    uint64_t get_u64(const std::string& section, const std::string& key, uint64_t fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    Eigen::Vector3d get_vec3(const std::string& section, const std::string& key) const;
    Eigen::Vector3d get_vec3(const std::string& section, const std::string& key,
                             const Eigen::Vector3d& fallback) const;

    void set(const std::string& section, const std::string& key, const std::string& value);
    std::string serialize() const;
    void write_file(const std::string& path) const;

private:
    const std::string* find(const std::string& section, const std::string& key) const;

    // section -> ordered (key, value) pairs
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections_;
    std::vector<std::string> section_order_;
};

}  // namespace geofuse
