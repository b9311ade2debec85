#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace escape {

// Flat `key = value` configuration document: UTF-8, one entry per line,
// '#' starts a comment. Keys mirror the training and harness fields.
class Config {
public:
    Config() = default;

    static Config from_string(const std::string& text);
    static Config load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return entries_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { entries_[key] = value; }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    // Sorted keys, canonical "key = value" lines.
    std::string serialize() const;
    void save(const std::filesystem::path& path) const;

    const std::map<std::string, std::string>& entries() const { return entries_; }

private:
    std::map<std::string, std::string> entries_;
};

}  // namespace escape
