#include "escape/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace escape {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::from_string(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: missing '=' on line " + std::to_string(line_no));
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument("config: empty key on line " + std::to_string(line_no));
        cfg.entries_[key] = value;
    }
    return cfg;
}

Config Config::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return from_string(buf.str());
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : std::stod(it->second);
}

int Config::get_int(const std::string& key, int fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : std::stoi(it->second);
}

uint64_t Config::get_u64(const std::string& key, uint64_t fallback) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? fallback : std::stoull(it->second);
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw std::invalid_argument("config: bad boolean for '" + key + "': " + v);
}

std::string Config::serialize() const {
    std::string out;
    for (const auto& [key, value] : entries_) {
        out += key;
        out += " = ";
        out += value;
        out += "\n";
    }
    return out;
}

void Config::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("config: cannot write '" + path.string() + "'");
    out << serialize();
}

}  // namespace escape
