#include "retrig/scanner.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "retrig/errors.hpp"
#include "retrig/parallel.hpp"
#include "retrig/rng.hpp"

namespace retrig {

using nlohmann::json;

namespace {

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        parts.push_back(s.substr(start, pos - start));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return parts;
}

template <typename T>
T parse_number(std::string_view s, const char* what) {
    T value{};
    const auto* end = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(s.data(), end, value);
    if (ec != std::errc() || ptr != end) {
        throw DataError(std::string("invalid ") + what + " '" + std::string(s) + "'");
    }
    return value;
}

double parse_double(std::string_view s, const char* what) {
    try {
        std::size_t used = 0;
        const std::string str(s);
        const double v = std::stod(str, &used);
        if (used != str.size()) {
            throw DataError("");
        }
        return v;
    } catch (const std::exception&) {
        throw DataError(std::string("invalid ") + what + " '" + std::string(s) + "'");
    }
}

std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t count, std::uint64_t seed) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    Rng rng(splitmix64(seed));
    count = std::min(count, n);
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = i + rng.index(n - i);
        std::swap(all[i], all[j]);
    }
    all.resize(count);
    std::sort(all.begin(), all.end());
    return all;
}

std::string excerpt(const std::string& text, std::size_t limit = 120) {
    if (text.size() <= limit) {
        return text;
    }
    std::size_t cut = limit;
    while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) {
        --cut;
    }
    return text.substr(0, cut);
}

std::string format_delta(float delta) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, delta);
    return std::string(buf, ptr);
}

std::vector<std::uint32_t> sweep_dims(const ScanRecord& r) {
    std::vector<std::uint32_t> dims;
    for (const auto& d : r.disruptions) {
        dims.push_back(d.is_scalar() ? d.scalar().dim : UINT32_MAX);
    }
    return dims;
}

}  // namespace

TokenStrategy TokenStrategy::parse(std::string_view text) {
    const auto parts = split(text, ':');
    const auto name = parts[0];
    TokenStrategy s;
    auto positions = [&](std::string_view list) {
        std::vector<std::int64_t> out;
        for (auto p : split(list, ',')) {
            out.push_back(parse_number<std::int64_t>(p, "position"));
        }
        return out;
    };
    if (name == "last" && parts.size() == 1) {
        s.kind = Kind::Last;
    } else if (name == "random" && parts.size() >= 2 && parts.size() <= 3) {
        s.kind = Kind::Random;
        s.random_count = parse_number<std::size_t>(parts[1], "token count");
        s.random_seed = parts.size() == 3 ? parse_number<std::uint64_t>(parts[2], "seed") : 0;
    } else if ((name == "harmful" || name == "fictitious" || name == "explicit") &&
               parts.size() == 2) {
        s.kind = name == "harmful"      ? Kind::Harmful
                 : name == "fictitious" ? Kind::Fictitious
                                        : Kind::Explicit;
        s.positions = positions(parts[1]);
    } else {
        throw DataError("invalid token strategy '" + std::string(text) +
                        "' (expected last | random:N[:SEED] | harmful:P,.. | fictitious:P,.. | "
                        "explicit:P,..)");
    }
    return s;
}

DimChoice DimChoice::parse(std::string_view text) {
    DimChoice c;
    const auto parts = split(text, ':');
    if (parts[0] == "random" && parts.size() >= 2 && parts.size() <= 3) {
        c.random = true;
        c.random_count = parse_number<std::size_t>(parts[1], "dim count");
        c.random_seed = parts.size() == 3 ? parse_number<std::uint64_t>(parts[2], "seed") : 0;
        return c;
    }
    const auto list = parts.size() == 2 && parts[0] == "explicit" ? parts[1]
                      : parts.size() == 1                        ? parts[0]
                                                                 : std::string_view{};
    if (list.empty()) {
        throw DataError("invalid dims '" + std::string(text) + "'");
    }
    for (auto d : split(list, ',')) {
        c.dims.push_back(parse_number<std::uint32_t>(d, "dim"));
    }
    return c;
}

void ScanPlan::validate() const {
    if (!(lo < hi)) {
        throw DataError("scan interval needs lo < hi");
    }
    if (!(step > 0.0)) {
        throw DataError("scan step must be positive");
    }
    if (!dims.random && dims.dims.empty()) {
        throw DataError("scan plan selects no dims");
    }
    if (dims.random && dims.random_count == 0) {
        throw DataError("scan plan selects no dims");
    }
}

std::size_t ScanPlan::points_per_sweep() const {
    return static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
}

double ScanPlan::delta_at(std::size_t i) const {
    const double v = lo + static_cast<double>(i) * step;
    return std::round(v * 1e9) / 1e9;
}

std::vector<SweepTarget> expand_plan(const ScanPlan& plan, std::size_t prompt_length,
                                     std::size_t embedding_dim) {
    plan.validate();
    if (prompt_length == 0) {
        throw DataError("cannot scan an empty prompt");
    }
    std::vector<std::size_t> positions;
    const auto& ts = plan.token_strategy;
    switch (ts.kind) {
        case TokenStrategy::Kind::Last:
            positions.push_back(prompt_length - 1);
            break;
        case TokenStrategy::Kind::Random:
            positions = sample_distinct(prompt_length, ts.random_count, ts.random_seed);
            break;
        default:
            if (ts.positions.empty()) {
                throw DataError("token strategy needs at least one position");
            }
            for (auto p : ts.positions) {
                positions.push_back(resolve_position(p, prompt_length));
            }
            break;
    }

    std::vector<std::uint32_t> dims;
    if (plan.dims.random) {
        for (auto d : sample_distinct(embedding_dim, plan.dims.random_count, plan.dims.random_seed)) {
            dims.push_back(static_cast<std::uint32_t>(d));
        }
    } else {
        dims = plan.dims.dims;
    }
    for (auto d : dims) {
        if (d >= embedding_dim) {
            throw InvalidDisruption("dim " + std::to_string(d) + " out of range");
        }
    }

    std::vector<SweepTarget> targets;
    for (auto p : positions) {
        if (plan.joint_dims) {
            targets.push_back({p, dims});
        } else {
            for (auto d : dims) {
                targets.push_back({p, {d}});
            }
        }
    }
    return targets;
}

ScanResult brute_scan(const TokenizedPrompt& prompt, const ScanPlan& plan, Backend& backend,
                      const ClassifierConfig& classifier, std::size_t jobs,
                      std::size_t max_new_tokens) {
    const auto info = backend.model_info();
    if (plan.layer_index > info.num_layers) {
        throw InvalidDisruption("layer " + std::to_string(plan.layer_index) + " out of range");
    }
    const auto targets = expand_plan(plan, prompt.token_ids.size(), info.embedding_dim);
    const std::size_t per_sweep = plan.points_per_sweep();
    const std::size_t total = targets.size() * per_sweep;

    std::vector<ScanRecord> records(total);
    std::atomic<std::size_t> first_failure{total};
    const auto errors = parallel_for(total, std::min(jobs, info.max_concurrency), [&](std::size_t i) {
        if (i > first_failure.load()) {
            return;
        }
        const auto& target = targets[i / per_sweep];
        const auto delta = static_cast<float>(plan.delta_at(i % per_sweep));
        ScanRecord rec;
        rec.prompt_id = prompt.prompt_id;
        rec.token_id = prompt.token_ids[target.position];
        for (auto d : target.dims) {
            rec.disruptions.push_back(DisruptionSpec::scalar_at(
                static_cast<std::int64_t>(target.position), d, delta, plan.layer_index));
        }
        try {
            const auto out = backend.generate(prompt, rec.disruptions, max_new_tokens, 0);
            rec.verdict = classify_response(out.text, classifier);
            rec.response_excerpt = excerpt(out.text);
        } catch (...) {
            auto cur = first_failure.load();
            while (i < cur && !first_failure.compare_exchange_weak(cur, i)) {
            }
            throw;
        }
        records[i] = std::move(rec);
    });

    ScanResult result;
    const auto fail = first_failure.load();
    if (fail < total) {
        result.complete = false;
        // Only transport failures truncate; bad input is the caller's problem.
        try {
            std::rethrow_exception(errors[fail]);
        } catch (const BackendError& e) {
            result.error = e.what();
        }
        records.resize(fail);
    }
    result.records = std::move(records);
    return result;
}

std::vector<std::vector<ScanRecord>> split_sweeps(const std::vector<ScanRecord>& records) {
    std::vector<std::vector<ScanRecord>> sweeps;
    for (const auto& r : records) {
        const bool same = !sweeps.empty() && sweeps.back().front().prompt_id == r.prompt_id &&
                          sweeps.back().front().position() == r.position() &&
                          sweep_dims(sweeps.back().front()) == sweep_dims(r);
        if (!same) {
            sweeps.emplace_back();
        }
        sweeps.back().push_back(r);
    }
    return sweeps;
}

std::string export_strip(const std::vector<ScanRecord>& records) {
    if (split_sweeps(records).size() > 1) {
        throw DataError("strip export needs records from a single (position, dim) sweep");
    }
    std::string out = "delta,verdict\n";
    for (const auto& r : records) {
        out += format_delta(r.delta());
        out += ',';
        out += verdict_name(r.verdict);
        out += '\n';
    }
    return out;
}

std::vector<std::pair<float, Verdict>> parse_strip(std::string_view csv) {
    std::vector<std::pair<float, Verdict>> rows;
    std::size_t line_no = 0;
    for (auto line : split(csv, '\n')) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        if (line.empty()) {
            continue;
        }
        if (line_no == 1) {
            if (line != "delta,verdict") {
                throw DataError("strip CSV must start with header 'delta,verdict'");
            }
            continue;
        }
        const auto cells = split(line, ',');
        if (cells.size() != 2) {
            throw DataError("strip CSV line " + std::to_string(line_no) + " needs 2 cells");
        }
        rows.emplace_back(static_cast<float>(parse_double(cells[0], "delta")),
                          parse_verdict(cells[1]));
    }
    return rows;
}

json to_json(const ScanRecord& record) {
    json ds = json::array();
    for (const auto& d : record.disruptions) {
        ds.push_back(to_json(d));
    }
    return {{"prompt_id", record.prompt_id},
            {"disruptions", std::move(ds)},
            {"token_id", record.token_id},
            {"verdict", verdict_name(record.verdict)},
            {"response_excerpt", record.response_excerpt}};
}

ScanRecord scan_record_from_json(const json& j) {
    ScanRecord r;
    try {
        r.prompt_id = j.at("prompt_id").get<std::string>();
        for (const auto& d : j.at("disruptions")) {
            r.disruptions.push_back(disruption_from_json(d));
        }
        r.token_id = j.at("token_id").get<TokenId>();
        r.verdict = parse_verdict(j.at("verdict").get<std::string>());
        r.response_excerpt = j.value("response_excerpt", std::string{});
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed scan record: ") + e.what());
    }
    if (r.disruptions.empty()) {
        throw DataError("scan record without disruptions");
    }
    return r;
}

std::string to_jsonl(const std::vector<ScanRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

std::vector<ScanRecord> load_scan_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DataError("cannot open scan log " + path.string());
    }
    std::vector<ScanRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            records.push_back(scan_record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw DataError("scan log line " + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError("scan log line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

std::pair<double, double> parse_interval(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) {
        throw DataError("interval must be written lo:hi");
    }
    const double lo = parse_double(text.substr(0, colon), "interval bound");
    const double hi = parse_double(text.substr(colon + 1), "interval bound");
    if (!(lo < hi)) {
        throw DataError("interval needs lo < hi");
    }
    return {lo, hi};
}

}  // namespace retrig
