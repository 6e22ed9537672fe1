#pragma once

#include "jdp/dataset.hpp"
#include "jdp/simgen.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace jdp::test {

inline std::string id(int i)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "S%04d", i);
    return buf;
}

inline Cohort scenario_cohort(int scenario, int n, std::uint64_t seed,
                              simgen::GeneratorMode mode = simgen::GeneratorMode::closed_form)
{
    auto cfg = simgen::scenario_preset(scenario);
    cfg.n = n;
    return simgen::generate_scenario(cfg, seed, mode);
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag)
    {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("jdp_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& content)
{
    std::ofstream(p, std::ios::binary) << content;
}

inline std::string read_file(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace jdp::test
