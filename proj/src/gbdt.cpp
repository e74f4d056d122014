#include "histotype/gbdt.hpp"

#include "histotype/common.hpp"
#include "histotype/io.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace histotype::gbdt {

namespace {

constexpr const char* kMagic = "histotype-gbdt";
constexpr int kVersion = 1;

// Gains closer than this are treated as tied so that summation order cannot
// decide between mathematically equal splits.
bool clearly_better(double candidate, double best) {
    return candidate > best + 1e-12 * std::max(1.0, std::abs(best));
}

double leaf_weight(double g, double h, double lambda) {
    const double denom = h + lambda;
    return denom > 0 ? -g / denom : 0.0;
}

double score_term(double g, double h, double lambda) {
    const double denom = h + lambda;
    return denom > 0 ? g * g / denom : 0.0;
}

void softmax_inplace(std::vector<double>& v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (auto& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (auto& x : v) x /= sum;
}

struct Grower {
    const Matrix& x;
    std::span<const double> g;
    std::span<const double> h;
    const TrainConfig& cfg;
    Tree tree;

    int grow(std::vector<std::size_t> rows, int depth) {
        double G = 0.0, H = 0.0;
        for (auto i : rows) {
            G += g[i];
            H += h[i];
        }
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({});
        if (depth < cfg.max_depth) {
            auto best = find_best_split(x, rows, g, h, cfg.lambda, cfg.gamma, cfg.min_child_weight);
            if (best.feature >= 0 && best.gain > 0) {
                std::vector<std::size_t> left, right;
                for (auto i : rows) (x[i][best.feature] < best.split ? left : right).push_back(i);
                tree.nodes[id].feature = best.feature;
                tree.nodes[id].split = best.split;
                const int l = grow(std::move(left), depth + 1);
                const int r = grow(std::move(right), depth + 1);
                tree.nodes[id].left = l;
                tree.nodes[id].right = r;
                return id;
            }
        }
        tree.nodes[id].weight = leaf_weight(G, H, cfg.lambda);
        return id;
    }
};

}  // namespace

double Tree::predict(std::span<const double> row) const {
    if (nodes.empty()) return 0.0;
    int i = 0;
    while (!nodes[i].is_leaf()) i = row[nodes[i].feature] < nodes[i].split ? nodes[i].left : nodes[i].right;
    return nodes[i].weight;
}

int Tree::depth() const {
    std::vector<int> d(nodes.size(), 0);
    int best = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        best = std::max(best, d[i]);
        if (!nodes[i].is_leaf()) {
            d[nodes[i].left] = d[i] + 1;
            d[nodes[i].right] = d[i] + 1;
        }
    }
    return best;
}

void TrainConfig::validate() const {
    if (n_rounds < 0) throw ValidationError("n_rounds must be >= 0");
    if (!(learning_rate > 0 && learning_rate <= 1)) throw ValidationError("learning rate must be in (0, 1]");
    if (!(lambda >= 0)) throw ValidationError("lambda must be >= 0");
    if (!(gamma >= 0)) throw ValidationError("gamma must be >= 0");
    if (max_depth < 0) throw ValidationError("max_depth must be >= 0");
    if (!(min_child_weight >= 0)) throw ValidationError("min_child_weight must be >= 0");
}

SplitCandidate find_best_split(const Matrix& x, std::span<const std::size_t> rows, std::span<const double> g,
                               std::span<const double> h, double lambda, double gamma, double min_child_weight) {
    SplitCandidate best;
    if (rows.size() < 2) return best;
    double G = 0.0, H = 0.0;
    for (auto i : rows) {
        G += g[i];
        H += h[i];
    }
    const double parent = score_term(G, H, lambda);
    const int n_features = static_cast<int>(x[rows[0]].size());

    std::vector<std::size_t> order(rows.begin(), rows.end());
    for (int f = 0; f < n_features; ++f) {
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return x[a][f] < x[b][f]; });
        double GL = 0.0, HL = 0.0;
        for (std::size_t k = 0; k + 1 < order.size(); ++k) {
            GL += g[order[k]];
            HL += h[order[k]];
            const double v = x[order[k]][f], next = x[order[k + 1]][f];
            if (!(v < next)) continue;
            const double GR = G - GL, HR = H - HL;
            if (HL < min_child_weight || HR < min_child_weight) continue;
            const double gain = 0.5 * (score_term(GL, HL, lambda) + score_term(GR, HR, lambda) - parent) - gamma;
            if (best.feature < 0 || clearly_better(gain, best.gain)) {
                best = {f, 0.5 * (v + next), gain};
            }
        }
    }
    return best;
}

GbdtModel train(const Matrix& features, std::span<const int> labels, const TrainConfig& config, int n_classes) {
    config.validate();
    if (features.empty()) throw ValidationError("cannot train on an empty dataset");
    if (features.size() != labels.size())
        throw ValidationError(fmt::format("{} feature rows but {} labels", features.size(), labels.size()));
    if (n_classes < 2) throw ValidationError("need at least two classes");
    const auto n_features = features[0].size();
    for (const auto& row : features)
        if (row.size() != n_features) throw ValidationError("feature rows differ in length");
    for (int y : labels)
        if (y < 0 || y >= n_classes) throw ValidationError(fmt::format("label {} outside the class set", y));

    GbdtModel model;
    model.n_classes = n_classes;
    model.n_features = static_cast<int>(n_features);
    model.learning_rate = config.learning_rate;
    model.lambda = config.lambda;
    model.gamma = config.gamma;
    model.max_depth = config.max_depth;
    model.min_child_weight = config.min_child_weight;

    const std::size_t n = features.size();
    const auto K = static_cast<std::size_t>(n_classes);
    std::vector<double> raw(n * K, model.base_score);
    std::vector<double> prob(n * K);
    std::vector<double> g(n), h(n);
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});

    for (int r = 0; r < config.n_rounds; ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> p(raw.begin() + i * K, raw.begin() + (i + 1) * K);
            softmax_inplace(p);
            std::copy(p.begin(), p.end(), prob.begin() + i * K);
        }
        std::vector<Tree> round;
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t i = 0; i < n; ++i) {
                const double p = prob[i * K + k];
                g[i] = p - (static_cast<std::size_t>(labels[i]) == k ? 1.0 : 0.0);
                h[i] = p * (1.0 - p);
            }
            Grower grower{features, g, h, config, {}};
            grower.grow(all, 0);
            round.push_back(std::move(grower.tree));
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < K; ++k) raw[i * K + k] += config.learning_rate * round[k].predict(features[i]);
        model.rounds.push_back(std::move(round));
    }
    return model;
}

std::vector<double> raw_scores(const GbdtModel& model, std::span<const double> row) {
    if (static_cast<int>(row.size()) != model.n_features)
        throw ValidationError(fmt::format("feature row has {} values, model expects {}", row.size(), model.n_features));
    std::vector<double> raw(static_cast<std::size_t>(model.n_classes), model.base_score);
    for (const auto& round : model.rounds)
        for (std::size_t k = 0; k < round.size(); ++k) raw[k] += model.learning_rate * round[k].predict(row);
    return raw;
}

std::vector<double> predict_proba(const GbdtModel& model, std::span<const double> row) {
    auto p = raw_scores(model, row);
    softmax_inplace(p);
    return p;
}

int predict(const GbdtModel& model, std::span<const double> row) {
    const auto p = predict_proba(model, row);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double log_loss(const GbdtModel& model, const Matrix& features, std::span<const int> labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
        auto raw = raw_scores(model, features[i]);
        const double mx = *std::max_element(raw.begin(), raw.end());
        double lse = 0.0;
        for (double v : raw) lse += std::exp(v - mx);
        total += mx + std::log(lse) - raw[static_cast<std::size_t>(labels[i])];
    }
    return total / static_cast<double>(features.size());
}

std::string serialize(const GbdtModel& m) {
    using io::format_real;
    std::size_t n_nodes = 0;
    for (const auto& round : m.rounds)
        for (const auto& t : round) n_nodes += t.nodes.size();

    std::string out = fmt::format("{} {}\n", kMagic, kVersion);
    out += fmt::format("n_classes {}\nn_features {}\n", m.n_classes, m.n_features);
    out += fmt::format("learning_rate {}\nlambda {}\ngamma {}\n", format_real(m.learning_rate), format_real(m.lambda),
                       format_real(m.gamma));
    out += fmt::format("max_depth {}\nmin_child_weight {}\nbase_score {}\n", m.max_depth,
                       format_real(m.min_child_weight), format_real(m.base_score));
    out += fmt::format("n_rounds {}\nn_nodes {}\n", m.rounds.size(), n_nodes);
    out += "round,class,node_id,kind,feature,split,left,right,weight\n";
    for (std::size_t r = 0; r < m.rounds.size(); ++r)
        for (std::size_t k = 0; k < m.rounds[r].size(); ++k)
            for (std::size_t id = 0; id < m.rounds[r][k].nodes.size(); ++id) {
                const auto& nd = m.rounds[r][k].nodes[id];
                out += fmt::format("{},{},{},{},{},{},{},{},{}\n", r, k, id, nd.is_leaf() ? "leaf" : "split",
                                   nd.feature, format_real(nd.split), nd.left, nd.right, format_real(nd.weight));
            }
    out += "end\n";
    return out;
}

GbdtModel deserialize(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    auto next = [&](const char* what) {
        if (!std::getline(in, line)) throw ValidationError(fmt::format("model file truncated before {}", what));
        return line;
    };
    auto field = [&](const char* key) {
        auto l = next(key);
        auto sp = l.find(' ');
        if (sp == std::string::npos || l.substr(0, sp) != key)
            throw ValidationError(fmt::format("model file: expected '{}', got '{}'", key, l));
        return l.substr(sp + 1);
    };

    auto magic = next("header");
    if (magic.rfind(kMagic, 0) != 0) throw ValidationError("not a histotype gbdt model file");
    const auto version = io::parse_int(io::trim(magic.substr(std::string_view(kMagic).size())), "model version");
    if (version != kVersion)
        throw ValidationError(fmt::format("model version {} is not supported (expected {})", version, kVersion));

    GbdtModel m;
    m.n_classes = static_cast<int>(io::parse_int(field("n_classes"), "n_classes"));
    m.n_features = static_cast<int>(io::parse_int(field("n_features"), "n_features"));
    m.learning_rate = io::parse_real(field("learning_rate"), "learning_rate");
    m.lambda = io::parse_real(field("lambda"), "lambda");
    m.gamma = io::parse_real(field("gamma"), "gamma");
    m.max_depth = static_cast<int>(io::parse_int(field("max_depth"), "max_depth"));
    m.min_child_weight = io::parse_real(field("min_child_weight"), "min_child_weight");
    m.base_score = io::parse_real(field("base_score"), "base_score");
    const auto n_rounds = io::parse_int(field("n_rounds"), "n_rounds");
    const auto n_nodes = io::parse_int(field("n_nodes"), "n_nodes");
    if (m.n_classes < 2 || m.n_features < 1 || n_rounds < 0 || n_nodes < 0)
        throw ValidationError("model file: invalid dimensions");
    if (next("node header") != "round,class,node_id,kind,feature,split,left,right,weight")
        throw ValidationError("model file: bad node table header");

    m.rounds.assign(static_cast<std::size_t>(n_rounds), std::vector<Tree>(static_cast<std::size_t>(m.n_classes)));
    for (long long i = 0; i < n_nodes; ++i) {
        auto l = next("node record");
        auto f = io::split_csv(l);
        auto where = fmt::format("model node {}", i);
        if (f.size() != 9) throw ValidationError(where + ": expected 9 fields");
        const auto r = io::parse_int(f[0], where), k = io::parse_int(f[1], where), id = io::parse_int(f[2], where);
        if (r < 0 || r >= n_rounds || k < 0 || k >= m.n_classes)
            throw ValidationError(where + ": round/class out of range");
        auto& tree = m.rounds[r][k];
        if (id != static_cast<long long>(tree.nodes.size())) throw ValidationError(where + ": node ids out of order");
        TreeNode nd;
        nd.feature = static_cast<int>(io::parse_int(f[4], where));
        nd.split = io::parse_real(f[5], where);
        nd.left = static_cast<int>(io::parse_int(f[6], where));
        nd.right = static_cast<int>(io::parse_int(f[7], where));
        nd.weight = io::parse_real(f[8], where);
        if ((f[3] == "leaf") != nd.is_leaf() || (f[3] != "leaf" && f[3] != "split"))
            throw ValidationError(where + ": inconsistent node kind");
        if (!nd.is_leaf() && nd.feature >= m.n_features) throw ValidationError(where + ": feature index out of range");
        tree.nodes.push_back(nd);
    }
    if (next("end marker") != "end") throw ValidationError("model file: missing end marker");

    for (const auto& round : m.rounds)
        for (const auto& tree : round) {
            if (tree.nodes.empty()) throw ValidationError("model file: empty tree");
            const int size = static_cast<int>(tree.nodes.size());
            for (int i = 0; i < size; ++i) {
                const auto& nd = tree.nodes[i];
                if (!nd.is_leaf() && (nd.left <= i || nd.right <= i || nd.left >= size || nd.right >= size))
                    throw ValidationError("model file: child index out of range");
            }
        }
    return m;
}

void save_model(const std::filesystem::path& path, const GbdtModel& model) { io::write_file(path, serialize(model)); }

GbdtModel load_model(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

}  // namespace histotype::gbdt
