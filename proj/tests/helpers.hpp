#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <unistd.h>

#include "retrig/rng.hpp"
#include "retrig/simlab.hpp"

namespace testing {

// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("retrig-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& content) {
    std::ofstream f(p, std::ios::binary);
    f << content;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// Single-landscape backend over a small world. The landscape is keyed "*"
// so any prompt text hits it.
inline retrig::simlab::SimBackend one_landscape_backend(const retrig::simlab::SyntheticWorld& world,
                                                        retrig::simlab::LandscapeSpec spec) {
    spec.prompt_id = "*";
    spec.prompt_text.clear();
    return retrig::simlab::SimBackend(world.model, {std::move(spec)});
}

inline retrig::simlab::Region scalar_region(double lo, double hi,
                                            retrig::Verdict v = retrig::Verdict::Denial) {
    retrig::simlab::Region r;
    r.kind = retrig::simlab::Region::Kind::Scalar;
    r.lo = lo;
    r.hi = hi;
    r.verdict = v;
    return r;
}

}  // namespace testing
