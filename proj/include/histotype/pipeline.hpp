#pragma once

// Stage orchestration. Every stage reads its inputs from the work directory
// (or the cohort), writes its outputs there and records a provenance file
// `provenance/<stage>.json` holding the hash of the configuration keys it
// depends on, the SHA-256 of every input and output, its seed and a
// timestamp. A stage whose recorded hashes still match is skipped.

#include "histotype/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace histotype::pipeline {

namespace fs = std::filesystem;

/// `key = value` lines; `#` starts a comment. Only keys present in the
/// default configuration are accepted.
class Config {
public:
    /// The built-in defaults.
    static Config defaults();
    static const std::string& default_text();

    /// Parses `text` on top of the defaults; relative paths resolve against
    /// `base_dir`.
    static Config parse(const std::string& text, const fs::path& base_dir, const std::string& origin = "config");
    static Config load(const fs::path& path);

    /// `key=value`; unknown keys are rejected.
    void apply_override(const std::string& assignment);
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    double real(const std::string& key) const;
    long long integer(const std::string& key) const;
    bool boolean(const std::string& key) const;
    fs::path path(const std::string& key) const;

    /// Range checks on every field; throws ValidationError.
    void validate() const;

    /// Sorted `key=value` lines of the keys starting with any of `prefixes`.
    std::string canonical(const std::vector<std::string>& prefixes) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    const fs::path& base_dir() const { return base_dir_; }
    std::uint64_t seed() const;

private:
    std::map<std::string, std::string> values_;
    fs::path base_dir_;
};

/// Stage names in execution order.
const std::vector<std::string>& stage_names();

struct RunOptions {
    bool force = false;  // ignore provenance and rerun
};

struct StageResult {
    std::string stage;
    bool skipped = false;
    std::map<std::string, std::string> outputs;  // relative path -> sha256
};

/// Runs one stage. Errors are rethrown with the stage name prepended and the
/// original error kind preserved.
StageResult run_stage(const std::string& stage, const Config& config, const RunOptions& options = {});

/// Runs every stage in order.
std::vector<StageResult> run_all(const Config& config, const RunOptions& options = {});

}  // namespace histotype::pipeline
