#include "geofuse/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "geofuse/error.hpp"

namespace geofuse {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorCode::IoError, "cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_string(ss.str(), path);
}

Config Config::parse_string(const std::string& text, const std::string& origin) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') {
                throw Error(ErrorCode::FormatError,
                            origin + ":" + std::to_string(line_no) + ": unterminated section");
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw Error(ErrorCode::FormatError,
                        origin + ":" + std::to_string(line_no) + ": expected key = value");
        }
        cfg.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
    auto it = sections_.find(section);
    if (it == sections_.end()) {
        section_order_.push_back(section);
        it = sections_.emplace(section, std::vector<std::pair<std::string, std::string>>{}).first;
    }
    for (auto& kv : it->second) {
        if (kv.first == key) {
            kv.second = value;
            return;
        }
    }
    it->second.emplace_back(key, value);
}

const std::string* Config::find(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return nullptr;
    for (const auto& kv : it->second) {
        if (kv.first == key) return &kv.second;
    }
    return nullptr;
}

bool Config::has(const std::string& section, const std::string& key) const {
    return find(section, key) != nullptr;
}

std::string Config::get_string(const std::string& section, const std::string& key) const {
    const std::string* v = find(section, key);
    if (!v) throw Error(ErrorCode::InvalidArgument, "missing config key [" + section + "] " + key);
    return *v;
}

std::string Config::get_string(const std::string& section, const std::string& key,
                               const std::string& fallback) const {
    const std::string* v = find(section, key);
    return v ? *v : fallback;
}

double Config::get_double(const std::string& section, const std::string& key) const {
    return std::stod(get_string(section, key));
}

double Config::get_double(const std::string& section, const std::string& key,
                          double fallback) const {
    const std::string* v = find(section, key);
    return v ? std::stod(*v) : fallback;
}

int64_t Config::get_int(const std::string& section, const std::string& key) const {
    return std::stoll(get_string(section, key));
}

int64_t Config::get_int(const std::string& section, const std::string& key,
                        int64_t fallback) const {
    const std::string* v = find(section, key);
    return v ? std::stoll(*v) : fallback;
}

uint64_t Config::get_u64(const std::string& section, const std::string& key,
                         uint64_t fallback) const {
    const std::string* v = find(section, key);
    return v ? std::stoull(*v) : fallback;
}

bool Config::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const std::string* v = find(section, key);
    if (!v) return fallback;
    std::string s = *v;
    std::transform(s.begin(), s.end(), s.begin(), ::tolower);
    return s == "1" || s == "true" || s == "yes" || s == "on";
}

Eigen::Vector3d Config::get_vec3(const std::string& section, const std::string& key) const {
    std::istringstream ss(get_string(section, key));
    Eigen::Vector3d v;
    if (!(ss >> v.x() >> v.y() >> v.z())) {
        throw Error(ErrorCode::FormatError, "[" + section + "] " + key + ": expected 3 numbers");
    }
    return v;
}

Eigen::Vector3d Config::get_vec3(const std::string& section, const std::string& key,
                                 const Eigen::Vector3d& fallback) const {
    return has(section, key) ? get_vec3(section, key) : fallback;
}

std::string Config::serialize() const {
    std::ostringstream out;
    for (const auto& name : section_order_) {
        if (!name.empty()) out << "[" << name << "]\n";
        for (const auto& kv : sections_.at(name)) {
            out << kv.first << " = " << kv.second << "\n";
        }
        out << "\n";
    }
    return out.str();
}

void Config::write_file(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw Error(ErrorCode::IoError, "cannot write config " + path);
    f << serialize();
}

}  // namespace geofuse
