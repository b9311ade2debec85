#include "escape/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

namespace escape {

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes little-endian");

namespace {

constexpr char kMagic[] = "ESCDATA1";
constexpr size_t kMagicLen = 8;

void append_u64(std::vector<uint8_t>& out, uint64_t v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    out.insert(out.end(), p, p + 8);
}

void append_f64(std::vector<uint8_t>& out, double v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    out.insert(out.end(), p, p + 8);
}

uint64_t read_u64(const uint8_t*& p) {
    uint64_t v;
    std::memcpy(&v, p, 8);
    p += 8;
    return v;
}

double read_f64(const uint8_t*& p) {
    double v;
    std::memcpy(&v, p, 8);
    p += 8;
    return v;
}

}  // namespace

std::vector<uint8_t> rle_encode(const std::vector<uint8_t>& bits) {
    std::vector<std::pair<uint64_t, uint8_t>> runs;
    size_t i = 0;
    while (i < bits.size()) {
        uint8_t v = bits[i] ? 1 : 0;
        size_t j = i;
        while (j < bits.size() && (bits[j] ? 1 : 0) == v) ++j;
        runs.emplace_back(j - i, v);
        i = j;
    }
    std::vector<uint8_t> out;
    append_u64(out, runs.size());
    for (const auto& [len, v] : runs) {
        append_u64(out, len);
        out.push_back(v);
    }
    return out;
}

std::vector<uint8_t> rle_decode(const std::vector<uint8_t>& encoded, size_t expected_size) {
    const uint8_t* p = encoded.data();
    uint64_t n_runs = read_u64(p);
    std::vector<uint8_t> out;
    out.reserve(expected_size);
    for (uint64_t r = 0; r < n_runs; ++r) {
        uint64_t len = read_u64(p);
        uint8_t v = *p++;
        out.insert(out.end(), len, v);
    }
    if (out.size() != expected_size) throw std::runtime_error("rle_decode: size mismatch");
    return out;
}

void write_episode(const std::filesystem::path& dir, const EpisodeRecord& record) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::vector<uint8_t> bin(kMagic, kMagic + kMagicLen);
    std::vector<uint64_t> offsets;
    for (const ExpertFrame& frame : record.frames) {
        offsets.push_back(bin.size());
        append_f64(bin, frame.obs.pose.x);
        append_f64(bin, frame.obs.pose.y);
        append_f64(bin, static_cast<double>(frame.obs.pose.yaw_deg));
        append_f64(bin, static_cast<double>(frame.obs.pose.tilt_deg));
        for (double v : frame.obs.projection.p) append_f64(bin, v);
        bin.insert(bin.end(), frame.obs.semantic.begin(), frame.obs.semantic.end());
        auto map_rle = rle_encode(frame.map_label);
        bin.insert(bin.end(), map_rle.begin(), map_rle.end());
        auto mask_rle = rle_encode(frame.image_masks);
        bin.insert(bin.end(), mask_rle.begin(), mask_rle.end());
        bin.insert(bin.end(), frame.manip.begin(), frame.manip.end());
    }
    {
        std::ofstream f(dir / "frames.bin", std::ios::binary | std::ios::trunc);
        f.write(reinterpret_cast<const char*>(bin.data()), static_cast<std::streamsize>(bin.size()));
        if (!f) throw std::runtime_error("write_episode: frames.bin write failed");
    }

    nlohmann::json meta{
        {"seed", record.seed},
        {"task",
         {{"type", task_type_name(record.task.type)},
          {"object", category_name(record.task.object_target)},
          {"receptacle", category_name(record.task.receptacle)},
          {"slice", record.task.slice}}},
        {"expert_length", record.expert_length},
        {"grid", {record.grid_h, record.grid_w}},
        {"grid_res", record.grid_res},
        {"image", record.image_size},
        {"categories", record.categories},
    };
    std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";

    nlohmann::json labels{
        {"version", "ESCDATA1"},
        {"frames", record.frames.size()},
        {"offsets", offsets},
    };
    std::ofstream(dir / "labels.json") << labels.dump(2) << "\n";
}

EpisodeRecord load_episode(const std::filesystem::path& dir) {
    EpisodeRecord record;
    {
        std::ifstream f(dir / "meta.json");
        if (!f) throw std::runtime_error("load_episode: missing meta.json in " + dir.string());
        nlohmann::json meta = nlohmann::json::parse(f);
        record.seed = meta.at("seed").get<uint64_t>();
        record.expert_length = meta.at("expert_length").get<int>();
        record.grid_h = meta.at("grid").at(0).get<int>();
        record.grid_w = meta.at("grid").at(1).get<int>();
        record.grid_res = meta.at("grid_res").get<double>();
        record.image_size = meta.at("image").get<int>();
        record.categories = meta.at("categories").get<int>();
        std::string type = meta.at("task").at("type").get<std::string>();
        for (TaskType t : {TaskType::PickPlace, TaskType::PlaceTwo, TaskType::HeatPlace})
            if (type == task_type_name(t)) record.task.type = t;
        record.task.object_target = category_from_name(meta.at("task").at("object").get<std::string>());
        record.task.receptacle = category_from_name(meta.at("task").at("receptacle").get<std::string>());
        record.task.slice = meta.at("task").at("slice").get<bool>();
    }

    std::ifstream f(dir / "frames.bin", std::ios::binary);
    if (!f) throw std::runtime_error("load_episode: missing frames.bin in " + dir.string());
    std::vector<uint8_t> bin((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bin.size() < kMagicLen || std::memcmp(bin.data(), kMagic, kMagicLen) != 0)
        throw std::runtime_error("load_episode: bad frames.bin magic");

    const size_t img2 = static_cast<size_t>(record.image_size) * record.image_size;
    const size_t map_size = static_cast<size_t>(record.grid_h) * record.grid_w * record.categories;
    const size_t mask_size = img2 * static_cast<size_t>(record.categories);

    const uint8_t* p = bin.data() + kMagicLen;
    const uint8_t* end = bin.data() + bin.size();
    while (p < end) {
        ExpertFrame frame;
        frame.obs.pose.x = read_f64(p);
        frame.obs.pose.y = read_f64(p);
        frame.obs.pose.yaw_deg = static_cast<int>(read_f64(p));
        frame.obs.pose.tilt_deg = static_cast<int>(read_f64(p));
        for (double& v : frame.obs.projection.p) v = read_f64(p);
        frame.obs.semantic.assign(p, p + img2);
        p += img2;
        auto read_rle = [&](size_t expected) {
            const uint8_t* start = p;
            uint64_t n_runs = read_u64(p);
            p += n_runs * 9;
            std::vector<uint8_t> enc(start, p);
            return rle_decode(enc, expected);
        };
        frame.map_label = read_rle(map_size);
        frame.image_masks = read_rle(mask_size);
        frame.manip.assign(p, p + record.categories);
        p += record.categories;
        frame.obs.t = static_cast<int>(record.frames.size());
        record.frames.push_back(std::move(frame));
    }
    return record;
}

void gen_dataset(uint64_t seed, int n_episodes, const std::filesystem::path& out_dir,
                 const WorldConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<std::string> names;
    for (int i = 0; i < n_episodes; ++i) {
        uint64_t ep_seed = seed + static_cast<uint64_t>(i) * 0x9E3779B97F4A7C15ULL;
        ExpertTrajectory traj;
        EpisodeSetup setup = gen_solvable_episode(ep_seed, cfg, &traj);

        EpisodeRecord record;
        record.seed = ep_seed;
        record.task = setup.task;
        record.expert_length = traj.length();
        record.grid_h = setup.room.grid_h;
        record.grid_w = setup.room.grid_w;
        record.grid_res = setup.room.grid_res;
        record.image_size = cfg.image_size;
        record.categories = kNumCategories;
        record.frames = std::move(traj.frames);

        char name[16];
        std::snprintf(name, sizeof(name), "ep_%05d", i);
        write_episode(out_dir / name, record);
        names.emplace_back(name);
    }
    nlohmann::json index{{"version", "ESCDATA1"}, {"seed", seed}, {"episodes", names}};
    std::ofstream(out_dir / "index.json") << index.dump(2) << "\n";
}

std::vector<std::filesystem::path> list_episode_dirs(const std::filesystem::path& dataset_dir) {
    namespace fs = std::filesystem;
    std::vector<fs::path> dirs;
    std::ifstream f(dataset_dir / "index.json");
    if (f) {
        nlohmann::json index = nlohmann::json::parse(f);
        for (const auto& name : index.at("episodes")) dirs.push_back(dataset_dir / name.get<std::string>());
        return dirs;
    }
    for (const auto& entry : fs::directory_iterator(dataset_dir))
        if (entry.is_directory() && entry.path().filename().string().rfind("ep_", 0) == 0)
            dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

}  // namespace escape
