#include "histotype/scorer.hpp"

#include "histotype/io.hpp"
#include "histotype/rng.hpp"

#include <fcntl.h>
#include <fmt/format.h>
#include <signal.h>
#include <spdlog/spdlog.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <thread>

namespace histotype {

namespace fs = std::filesystem;

void validate_score(const ScoreRecord& r, const ScoreValidation& v) {
    auto in_unit = [](double x) { return std::isfinite(x) && x >= 0.0 && x <= 1.0; };
    if (!in_unit(r.target) || !in_unit(r.rest))
        throw ProtocolError(fmt::format("tile {} classifier {}: score outside [0, 1] (target {}, rest {})", r.tile_id,
                                        r.classifier_id, r.target, r.rest));
    if (std::abs(r.target + r.rest - 1.0) > v.pair_sum_tolerance) {
        auto msg = fmt::format("tile {} classifier {}: target + rest = {} differs from 1", r.tile_id, r.classifier_id,
                               r.target + r.rest);
        if (!v.pair_sum_warn_only) throw ProtocolError(msg);
        spdlog::warn("{}", msg);
    }
}

void ScoreTable::insert(const ScoreRecord& r) {
    auto [it, inserted] = records_.emplace(Key{r.tile_id, r.classifier_id}, ScorePair{r.target, r.rest});
    if (!inserted)
        throw ValidationError(fmt::format("duplicate score for tile {} classifier {}", r.tile_id, r.classifier_id));
}

std::optional<ScorePair> ScoreTable::find(const std::string& tile_id, std::string_view classifier_id) const {
    auto it = records_.find(Key{tile_id, std::string(classifier_id)});
    if (it == records_.end()) return std::nullopt;
    return it->second;
}

bool ScoreTable::contains(const std::string& tile_id, std::string_view classifier_id) const {
    return find(tile_id, classifier_id).has_value();
}

void ScoreTable::merge(const ScoreTable& other) {
    for (const auto& [key, pair] : other.records_) insert({key.first, key.second, pair.target, pair.rest});
}

std::set<std::string> ScoreTable::tile_ids() const {
    std::set<std::string> ids;
    for (const auto& [key, _] : records_) ids.insert(key.first);
    return ids;
}

void save_scores(const fs::path& path, const ScoreTable& table) {
    std::string out = "tile_id,classifier_id,target,rest\n";
    for (const auto& [key, p] : table.records())
        out += fmt::format("{},{},{},{}\n", key.first, key.second, io::format_real(p.target), io::format_real(p.rest));
    io::write_file(path, out);
}

ScoreTable load_scores(const fs::path& path, const ScoreValidation& v) {
    if (fs::exists(path) && fs::file_size(path) == 0) return {};
    auto csv = io::read_csv(path, {"tile_id", "classifier_id", "target", "rest"});
    ScoreTable table;
    for (const auto& row : csv.rows) {
        auto where = fmt::format("{}: line {}", path.string(), row.line);
        ScoreRecord r{row.fields[0], row.fields[1], io::parse_real(row.fields[2], where),
                      io::parse_real(row.fields[3], where)};
        try {
            validate_score(r, v);
            table.insert(r);
        } catch (const Error& e) {
            throw ValidationError(where + ": " + e.what());
        }
    }
    return table;
}

SyntheticScorer::SyntheticScorer(SyntheticScorerSpec spec) : spec_(std::move(spec)) {
    if (!(spec_.signal >= 0.0 && spec_.signal <= 1.0))
        throw ValidationError("synthetic scorer signal strength must be in [0, 1]");
}

ScoreTable SyntheticScorer::score(std::span<const TileRequest> tiles, const std::string& classifier_id) {
    ScoreTable table;
    for (const auto& t : tiles) {
        auto it = spec_.truth.find(t.tile_id);
        if (it == spec_.truth.end()) continue;  // reported as unscored by score_tiles
        Xoshiro256 rng(derive_seed(derive_seed(spec_.seed, t.tile_id), classifier_id));
        const double u = rng.uniform();
        const double indicator = it->second == classifier_id ? 1.0 : 0.0;
        const double target = spec_.signal * indicator + (1.0 - spec_.signal) * u;
        table.insert({t.tile_id, classifier_id, target, 1.0 - target});
    }
    return table;
}

ProcessScorer::ProcessScorer(std::string command, int workers, ScoreValidation validation)
    : command_(std::move(command)), workers_(std::max(1, workers)), validation_(validation) {
    if (command_.empty()) throw ValidationError("scorer command is empty");
    // a scorer that dies mid-session must surface as EPIPE, not kill us
    static std::once_flag once;
    std::call_once(once, [] { ::signal(SIGPIPE, SIG_IGN); });
}

namespace {

std::string substitute(std::string s, std::string_view key, std::string_view value) {
    for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size()))
        s.replace(pos, key.size(), value);
    return s;
}

bool write_all(int fd, std::string_view data) {
    while (!data.empty()) {
        const ssize_t n = ::write(fd, data.data(), data.size());
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
    return true;
}

// Owns the child process and its pipes; tears everything down on scope exit.
class Session {
public:
    explicit Session(const std::string& command) {
        int in_pipe[2], out_pipe[2];
        if (::pipe2(in_pipe, O_CLOEXEC) != 0 || ::pipe2(out_pipe, O_CLOEXEC) != 0)
            throw RuntimeError(fmt::format("pipe: {}", std::strerror(errno)));
        pid_ = ::fork();
        if (pid_ < 0) throw RuntimeError(fmt::format("fork: {}", std::strerror(errno)));
        if (pid_ == 0) {
            ::dup2(in_pipe[0], STDIN_FILENO);
            ::dup2(out_pipe[1], STDOUT_FILENO);
            ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
            ::_exit(127);
        }
        ::close(in_pipe[0]);
        ::close(out_pipe[1]);
        to_child_ = in_pipe[1];
        from_child_ = ::fdopen(out_pipe[0], "r");
    }

    Session(const Session&) = delete;
    Session& operator=(const Session&) = delete;

    ~Session() {
        // a blocked writer only wakes up once the child is gone (EPIPE)
        if (writer_.joinable()) {
            if (pid_ > 0 && !reaped_) ::kill(pid_, SIGTERM);
            writer_.join();
        }
        close_input();
        if (from_child_) std::fclose(from_child_);
        if (pid_ > 0 && !reaped_) {
            ::kill(pid_, SIGTERM);
            ::waitpid(pid_, nullptr, 0);
        }
    }

    std::optional<std::string> read_line() {
        char* buf = nullptr;
        std::size_t cap = 0;
        const ssize_t n = ::getline(&buf, &cap, from_child_);
        if (n < 0) {
            std::free(buf);
            return std::nullopt;
        }
        std::string line(buf, static_cast<std::size_t>(n));
        std::free(buf);
        while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.pop_back();
        return line;
    }

    void start_writer(std::vector<std::string> lines) {
        writer_ = std::thread([this, lines = std::move(lines)] {
            for (const auto& l : lines)
                if (!write_all(to_child_, l)) break;
            close_input();
        });
    }

    int wait() {
        if (writer_.joinable()) writer_.join();
        int status = 0;
        ::waitpid(pid_, &status, 0);
        reaped_ = true;
        return status;
    }

private:
    void close_input() {
        std::lock_guard lock(close_mutex_);
        if (to_child_ >= 0) {
            ::close(to_child_);
            to_child_ = -1;
        }
    }

    pid_t pid_ = -1;
    bool reaped_ = false;
    int to_child_ = -1;
    std::FILE* from_child_ = nullptr;
    std::thread writer_;
    std::mutex close_mutex_;
};

double number_field(const nlohmann::json& j, const char* key, const std::string& tile_id) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_number())
        throw ProtocolError(fmt::format("response for tile {} lacks numeric '{}'", tile_id, key));
    return it->get<double>();
}

}  // namespace

ScoreTable ProcessScorer::run_session(std::span<const TileRequest> tiles, const std::string& classifier_id) const {
    Session session(substitute(command_, "{classifier}", classifier_id));

    auto ready = session.read_line();
    if (!ready) throw ProtocolError("scorer exited before signalling READY");
    if (*ready != "READY") throw ProtocolError(fmt::format("expected READY from scorer, got '{}'", *ready));

    std::set<std::string> pending;
    std::vector<std::string> lines;
    lines.reserve(tiles.size());
    for (const auto& t : tiles) {
        pending.insert(t.tile_id);
        nlohmann::ordered_json req;
        req["tile_id"] = t.tile_id;
        req["path"] = t.path.string();
        lines.push_back(req.dump() + "\n");
    }
    session.start_writer(std::move(lines));

    ScoreTable table;
    std::map<std::string, std::string> failed;
    bool done = false;
    while (auto line = session.read_line()) {
        if (*line == "DONE") {
            done = true;
            break;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(*line);
        } catch (const nlohmann::json::exception&) {
            throw ProtocolError(fmt::format("malformed scorer line: '{}'", *line));
        }
        if (!j.is_object() || !j.contains("tile_id") || !j["tile_id"].is_string())
            throw ProtocolError(fmt::format("scorer line without tile_id: '{}'", *line));
        const auto tile_id = j["tile_id"].get<std::string>();
        if (pending.erase(tile_id) == 0)
            throw ProtocolError(fmt::format("scorer answered unrequested or repeated tile {}", tile_id));
        if (j.contains("error")) {
            failed[tile_id] = j["error"].is_string() ? j["error"].get<std::string>() : j["error"].dump();
            continue;
        }
        ScoreRecord r{tile_id, classifier_id, number_field(j, "target", tile_id), number_field(j, "rest", tile_id)};
        validate_score(r, validation_);
        table.insert(r);
    }
    const int status = session.wait();

    std::vector<std::string> unscored(pending.begin(), pending.end());
    for (const auto& [id, why] : failed) {
        spdlog::warn("scorer could not score tile {}: {}", id, why);
        unscored.push_back(id);
    }
    std::sort(unscored.begin(), unscored.end());
    if (!done || !unscored.empty()) {
        std::string head;
        for (std::size_t i = 0; i < std::min<std::size_t>(unscored.size(), 5); ++i) head += " " + unscored[i];
        // message first: the vector is moved into a by-value parameter
        const auto what =
            fmt::format("scorer session for {} {} (exit status {}); {} unscored tile(s):{}{}", classifier_id,
                        done ? "finished" : "ended before DONE", WIFEXITED(status) ? WEXITSTATUS(status) : -1,
                        unscored.size(), head, unscored.size() > 5 ? " ..." : "");
        throw ScorerIncompleteError(what, std::move(unscored), std::move(table));
    }
    return table;
}

ScoreTable ProcessScorer::score(std::span<const TileRequest> tiles, const std::string& classifier_id) {
    const auto n_batches = std::min<std::size_t>(static_cast<std::size_t>(workers_), std::max<std::size_t>(1, tiles.size()));
    if (n_batches <= 1) return run_session(tiles, classifier_id);

    std::vector<ScoreTable> parts(n_batches);
    std::vector<std::exception_ptr> errors(n_batches);
    std::vector<std::thread> threads;
    const std::size_t per = (tiles.size() + n_batches - 1) / n_batches;
    for (std::size_t b = 0; b < n_batches; ++b) {
        const auto begin = std::min(tiles.size(), b * per);
        const auto end = std::min(tiles.size(), begin + per);
        threads.emplace_back([&, b, begin, end] {
            try {
                parts[b] = run_session(tiles.subspan(begin, end - begin), classifier_id);
            } catch (...) {
                errors[b] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();

    ScoreTable merged;
    std::vector<std::string> unscored;
    std::optional<std::string> first_message;
    for (std::size_t b = 0; b < n_batches; ++b) {
        if (!errors[b]) {
            merged.merge(parts[b]);
            continue;
        }
        try {
            std::rethrow_exception(errors[b]);
        } catch (const ScorerIncompleteError& e) {
            merged.merge(e.partial());
            unscored.insert(unscored.end(), e.unscored().begin(), e.unscored().end());
            if (!first_message) first_message = e.what();
        }
    }
    if (!unscored.empty()) {
        std::sort(unscored.begin(), unscored.end());
        throw ScorerIncompleteError(*first_message, std::move(unscored), std::move(merged));
    }
    return merged;
}

ScoreTable score_tiles(Scorer& scorer, std::span<const TileRequest> tiles, const std::string& classifier_id) {
    std::set<std::string> requested;
    for (const auto& t : tiles)
        if (!requested.insert(t.tile_id).second) throw ValidationError("duplicate tile in scoring request: " + t.tile_id);

    auto table = scorer.score(tiles, classifier_id);
    std::vector<std::string> unscored;
    for (const auto& id : requested)
        if (!table.contains(id, classifier_id)) unscored.push_back(id);
    if (!unscored.empty()) {
        const auto what = fmt::format("{} of {} tiles were not scored by {} (first: {})", unscored.size(),
                                      requested.size(), classifier_id, unscored.front());
        throw ScorerIncompleteError(what, std::move(unscored), std::move(table));
    }
    if (table.size() != requested.size())
        throw ProtocolError(fmt::format("scorer returned {} records for {} tiles", table.size(), requested.size()));
    return table;
}

std::set<std::string> filter_tumor_tiles(const ScoreTable& table, double tumor_threshold,
                                         std::span<const std::string> tile_ids) {
    std::set<std::string> kept;
    if (tile_ids.empty()) {
        for (const auto& [key, pair] : table.records())
            if (key.second == kTumorClassifier && pair.target >= tumor_threshold) kept.insert(key.first);
        return kept;
    }
    for (const auto& id : tile_ids) {
        auto s = table.find(id, kTumorClassifier);
        if (!s) throw ValidationError(fmt::format("tile {} has no tumor score", id));
        if (s->target >= tumor_threshold) kept.insert(id);
    }
    return kept;
}

}  // namespace histotype
