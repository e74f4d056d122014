#include "histotype/io.hpp"

#include "histotype/common.hpp"

#include <fmt/format.h>
#include <openssl/evp.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>

namespace histotype {

std::string_view subtype_name(Subtype s) {
    switch (s) {
        case Subtype::LumA: return "LumA";
        case Subtype::LumB: return "LumB";
        case Subtype::HER2: return "HER2";
        case Subtype::Basal: return "Basal";
    }
    return "?";
}

std::optional<Subtype> parse_subtype(std::string_view name) {
    if (name == "LumA") return Subtype::LumA;
    if (name == "LumB") return Subtype::LumB;
    if (name == "HER2") return Subtype::HER2;
    if (name == "Basal" || name == "BL") return Subtype::Basal;
    return std::nullopt;
}

}  // namespace histotype

namespace histotype::io {

std::vector<std::string> split_csv(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.emplace_back(line.substr(start));
            break;
        }
        out.emplace_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

CsvTable read_csv(const fs::path& path, const std::vector<std::string>& expected_header,
                  const std::vector<std::string>& optional_columns) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError(fmt::format("cannot open '{}'", path.string()));

    CsvTable table;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        auto fields = split_csv(line);
        for (auto& f : fields) f = trim(f);
        if (!have_header) {
            have_header = true;
            if (!expected_header.empty()) {
                auto n = expected_header.size();
                bool ok = fields.size() >= n && fields.size() <= n + optional_columns.size() &&
                          std::equal(expected_header.begin(), expected_header.end(), fields.begin());
                for (std::size_t i = n; ok && i < fields.size(); ++i)
                    ok = fields[i] == optional_columns[i - n];
                if (!ok)
                    throw ValidationError(fmt::format("{}: line {}: unexpected header '{}'",
                                                      path.string(), lineno, line));
            }
            table.header = std::move(fields);
            continue;
        }
        if (fields.size() != table.header.size())
            throw ValidationError(fmt::format("{}: line {}: expected {} fields, got {}", path.string(),
                                              lineno, table.header.size(), fields.size()));
        table.rows.push_back({lineno, std::move(fields)});
    }
    if (!have_header && !expected_header.empty())
        throw ValidationError(fmt::format("{}: missing header", path.string()));
    return table;
}

std::string format_real(double v) { return fmt::format("{:.17g}", v); }

double parse_real(std::string_view s, std::string_view context) {
    std::string tmp(s);
    char* end = nullptr;
    errno = 0;
    double v = std::strtod(tmp.c_str(), &end);
    if (tmp.empty() || end != tmp.c_str() + tmp.size() || errno == ERANGE)
        throw ValidationError(fmt::format("{}: not a number: '{}'", context, s));
    return v;
}

long long parse_int(std::string_view s, std::string_view context) {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size())
        throw ValidationError(fmt::format("{}: not an integer: '{}'", context, s));
    return v;
}

void write_file(const fs::path& path, std::string_view contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw RuntimeError(fmt::format("cannot write '{}'", path.string()));
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw RuntimeError(fmt::format("write failed for '{}'", path.string()));
    }
    fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError(fmt::format("cannot open '{}'", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

struct MdCtxDeleter {
    void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};

std::string to_hex(const unsigned char* digest, unsigned int len) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xf]);
    }
    return out;
}

}  // namespace

std::string sha256_hex(std::string_view data) {
    std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx(EVP_MD_CTX_new());
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
        throw RuntimeError("sha256 failed");
    return to_hex(digest, len);
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

}  // namespace histotype::io
