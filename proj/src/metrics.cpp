#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "escape/harness.hpp"

namespace escape {

MetricsReport compute_metrics(const std::vector<EpisodeLog>& logs) {
    if (logs.empty()) throw std::invalid_argument("compute_metrics: no logs");
    MetricsReport report;
    report.episodes = static_cast<int>(logs.size());
    double sr = 0.0, gc = 0.0, plwsr = 0.0, plwgc = 0.0;
    std::map<std::string, int> failures;
    for (const EpisodeLog& log : logs) {
        double weight = log.expert_length > 0
                            ? static_cast<double>(log.expert_length) /
                                  std::max(log.expert_length, log.agent_length)
                            : 0.0;
        double gc_frac = log.gc_total > 0 ? static_cast<double>(log.gc_met) / log.gc_total : 0.0;
        sr += log.success ? 1.0 : 0.0;
        gc += gc_frac;
        plwsr += log.success ? weight : 0.0;
        plwgc += gc_frac * weight;
        if (!log.success && !log.failure.empty()) ++failures[log.failure];
    }
    double n = static_cast<double>(logs.size());
    report.sr = sr / n;
    report.gc = gc / n;
    report.plwsr = plwsr / n;
    report.plwgc = plwgc / n;
    if (report.sr > 0.0) report.ef = report.plwsr / report.sr;
    for (const auto& [name, count] : failures)
        report.failure_rates[name] = static_cast<double>(count) / n;
    return report;
}

std::string classify_failure(const EpisodeLog& log) {
    if (log.success) throw std::invalid_argument("classify_failure: log is a success");
    // never located the target: the policy never ran a proactive global plan
    bool located = false;
    for (const StepRecord& s : log.steps) located = located || s.origin == PlanOrigin::GlobalPlanner;
    if (!located) return "object_not_found";

    auto count_tail = [&](auto predicate) {
        int count = 0;
        size_t n = log.steps.size();
        for (size_t i = n > 5 ? n - 5 : 0; i < n; ++i)
            if (predicate(log.steps[i])) ++count;
        return count;
    };
    if (count_tail([](const StepRecord& s) { return s.outcome == OutcomeKind::Collision; }) >= 3)
        return "navigation_collision";
    if (count_tail([](const StepRecord& s) { return s.outcome == OutcomeKind::InteractionFailed; }) >= 3)
        return "interaction_failure";
    return "budget_exhausted";
}

namespace {

nlohmann::json step_to_json(const StepRecord& s) {
    std::string bits(s.monitor_bits.size(), '0');
    for (size_t i = 0; i < s.monitor_bits.size(); ++i)
        if (s.monitor_bits[i]) bits[i] = '1';
    return nlohmann::json{
        {"t", s.t},
        {"pose", {s.pose.x, s.pose.y, s.pose.yaw_deg, s.pose.tilt_deg}},
        {"action", action_name(s.action)},
        {"origin", plan_origin_name(s.origin)},
        {"monitor_bits", bits},
        {"outcome", s.outcome == OutcomeKind::Ok            ? "ok"
                    : s.outcome == OutcomeKind::Collision   ? "collision"
                                                            : "interaction_failed"},
        {"reason", s.reason},
    };
}

ActionKind action_from_name(const std::string& name) {
    for (int k = 0; k <= static_cast<int>(ActionKind::Stop); ++k)
        if (name == action_name(static_cast<ActionKind>(k))) return static_cast<ActionKind>(k);
    throw std::runtime_error("unknown action name: " + name);
}

PlanOrigin origin_from_name(const std::string& name) {
    for (PlanOrigin o : {PlanOrigin::Exploration, PlanOrigin::GlobalPlanner, PlanOrigin::Fallback})
        if (name == plan_origin_name(o)) return o;
    throw std::runtime_error("unknown plan origin: " + name);
}

}  // namespace

void write_episode_log(const std::filesystem::path& path, const EpisodeLog& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_episode_log: cannot open " + path.string());
    nlohmann::json header{
        {"seed", log.seed},
        {"task",
         {{"type", task_type_name(log.task.type)},
          {"object", category_name(log.task.object_target)},
          {"receptacle", category_name(log.task.receptacle)},
          {"slice", log.task.slice}}},
        {"agent_length", log.agent_length},
        {"expert_length", log.expert_length},
        {"success", log.success},
        {"gc", {log.gc_met, log.gc_total}},
        {"failure", log.failure},
    };
    out << header.dump() << "\n";
    for (const StepRecord& s : log.steps) out << step_to_json(s).dump() << "\n";
}

EpisodeLog read_episode_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_episode_log: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("read_episode_log: empty file");
    nlohmann::json header = nlohmann::json::parse(line);
    EpisodeLog log;
    log.seed = header.at("seed").get<uint64_t>();
    std::string type = header.at("task").at("type").get<std::string>();
    for (TaskType t : {TaskType::PickPlace, TaskType::PlaceTwo, TaskType::HeatPlace})
        if (type == task_type_name(t)) log.task.type = t;
    log.task.object_target = category_from_name(header.at("task").at("object").get<std::string>());
    log.task.receptacle = category_from_name(header.at("task").at("receptacle").get<std::string>());
    log.task.slice = header.at("task").at("slice").get<bool>();
    log.agent_length = header.at("agent_length").get<int>();
    log.expert_length = header.at("expert_length").get<int>();
    log.success = header.at("success").get<bool>();
    log.gc_met = header.at("gc").at(0).get<int>();
    log.gc_total = header.at("gc").at(1).get<int>();
    log.failure = header.at("failure").get<std::string>();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        StepRecord s;
        s.t = j.at("t").get<int>();
        s.pose.x = j.at("pose").at(0).get<double>();
        s.pose.y = j.at("pose").at(1).get<double>();
        s.pose.yaw_deg = j.at("pose").at(2).get<int>();
        s.pose.tilt_deg = j.at("pose").at(3).get<int>();
        s.action = action_from_name(j.at("action").get<std::string>());
        s.origin = origin_from_name(j.at("origin").get<std::string>());
        std::string bits = j.at("monitor_bits").get<std::string>();
        s.monitor_bits.assign(bits.size(), 0);
        for (size_t i = 0; i < bits.size(); ++i) s.monitor_bits[i] = bits[i] == '1' ? 1 : 0;
        std::string outcome = j.at("outcome").get<std::string>();
        s.outcome = outcome == "ok"          ? OutcomeKind::Ok
                    : outcome == "collision" ? OutcomeKind::Collision
                                             : OutcomeKind::InteractionFailed;
        s.reason = j.at("reason").get<std::string>();
        log.steps.push_back(std::move(s));
    }
    return log;
}

std::string metrics_json(const MetricsReport& report) {
    nlohmann::json j{
        {"episodes", report.episodes}, {"SR", report.sr},       {"GC", report.gc},
        {"PLWSR", report.plwsr},       {"PLWGC", report.plwgc},
    };
    if (report.ef.has_value())
        j["EF"] = *report.ef;
    else
        j["EF"] = nullptr;
    j["failures"] = report.failure_rates;
    return j.dump(2);
}

}  // namespace escape
