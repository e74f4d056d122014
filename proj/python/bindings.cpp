#include "histotype/gbdt.hpp"
#include "histotype/metrics.hpp"
#include "histotype/pipeline.hpp"
#include "histotype/rng.hpp"
#include "histotype/stain.hpp"
#include "histotype/synthetic.hpp"
#include "histotype/thresholding.hpp"
#include "histotype/tiling.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace histotype;

namespace {

using ImageArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

RasterImage to_raster(const ImageArray& a, double mpp = 0.5) {
    if (a.ndim() != 3 || a.shape(2) != 3) throw ValidationError("expected an (H, W, 3) uint8 array");
    RasterImage img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), mpp);
    std::copy_n(a.data(), img.pixels.size(), img.pixels.begin());
    return img;
}

ImageArray to_array(const RasterImage& img) {
    ImageArray out({img.height, img.width, 3});
    std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
    return out;
}

py::dict profile_dict(const StainProfile& p) {
    py::dict d;
    d["hematoxylin"] = p.columns[0];
    d["eosin"] = p.columns[1];
    d["max_concentrations"] = p.max_concentrations;
    return d;
}

StainProfile profile_from(const py::dict& d) {
    StainProfile p;
    p.columns[0] = d["hematoxylin"].cast<Vec3>();
    p.columns[1] = d["eosin"].cast<Vec3>();
    p.max_concentrations = d["max_concentrations"].cast<std::array<double, 2>>();
    return p;
}

py::dict metrics_dict(const metrics::ClassMetrics& m) {
    py::dict d;
    d["precision"] = m.precision;
    d["sensitivity"] = m.sensitivity;
    d["specificity"] = m.specificity;
    d["f1"] = m.f1;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "histotype core bindings";

    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

    m.def("derive_seed", py::overload_cast<std::uint64_t, std::string_view>(&derive_seed), py::arg("seed"),
          py::arg("tag"));

    // metrics
    m.def("f1_score", &metrics::f1_score, py::arg("precision"), py::arg("sensitivity"));
    m.def(
        "confusion_matrix",
        [](const std::vector<std::string>& pred, const std::vector<std::string>& truth,
           const std::vector<std::string>& classes) {
            return metrics::confusion_matrix(std::span<const std::string>(pred), std::span<const std::string>(truth),
                                             classes)
                .counts;
        },
        py::arg("predictions"), py::arg("truths"), py::arg("classes"),
        "Counts indexed [truth][predicted].");
    auto to_cm = [](const std::vector<std::vector<std::size_t>>& counts) {
        metrics::ConfusionMatrix cm;
        cm.counts = counts;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            if (counts[i].size() != counts.size()) throw ValidationError("confusion matrix must be square");
            cm.classes.push_back(std::to_string(i));
        }
        return cm;
    };
    m.def(
        "class_metrics", [to_cm](const std::vector<std::vector<std::size_t>>& counts,
                                 std::size_t c) { return metrics_dict(metrics::class_metrics(to_cm(counts), c)); },
        py::arg("counts"), py::arg("class_index"));
    m.def(
        "macro_metrics",
        [to_cm](const std::vector<std::vector<std::size_t>>& counts) {
            auto mm = metrics::macro_metrics(to_cm(counts));
            py::dict d;
            d["f1"] = mm.f1;
            d["precision"] = mm.precision;
            d["sensitivity"] = mm.sensitivity;
            d["specificity"] = mm.specificity;
            d["accuracy"] = mm.accuracy;
            return d;
        },
        py::arg("counts"));

    // thresholding
    m.def(
        "pr_curve",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
            std::vector<std::tuple<double, double, double>> out;
            for (const auto& p : pr_curve(scores, labels).points) out.emplace_back(p.threshold, p.precision, p.recall);
            return out;
        },
        py::arg("scores"), py::arg("labels"), "List of (threshold, precision, recall), ascending thresholds.");
    m.def(
        "optimal_threshold",
        [](const std::vector<double>& scores, const std::vector<int>& labels, double beta) {
            auto c = optimal_threshold(scores, labels, {}, beta);
            return std::pair{c.threshold, c.criterion_value};
        },
        py::arg("scores"), py::arg("labels"), py::arg("beta") = 1.0, "(threshold, F-beta at threshold).");
    m.def(
        "average_precision",
        [](const std::vector<double>& scores, const std::vector<int>& labels) {
            return average_precision(scores, labels);
        },
        py::arg("scores"), py::arg("labels"));

    // tiling
    m.def(
        "plan_tiles",
        [](int width, int height, int tile_size, int overlap) {
            auto grid = plan_tiles("slide", width, height, tile_size, overlap, TissueMask::full(width, height), 0.0);
            std::vector<std::pair<int, int>> out;
            for (const auto& t : grid.tiles) out.emplace_back(t.x, t.y);
            return out;
        },
        py::arg("width"), py::arg("height"), py::arg("tile_size") = 512, py::arg("overlap") = 0,
        "Tile origins over an all-tissue image, row-major.");

    // stain
    m.def(
        "estimate_stain_profile",
        [](const ImageArray& tile, double I0, double beta, double alpha) {
            return profile_dict(estimate_stain_profile(rgb_to_od(to_raster(tile), I0), {I0, beta, alpha}));
        },
        py::arg("tile"), py::arg("I0") = 255.0, py::arg("beta") = 0.15, py::arg("alpha") = 1.0);
    m.def(
        "normalize_tile",
        [](const ImageArray& tile, const py::dict& source, const py::dict& reference, double I0) {
            return to_array(normalize_tile(to_raster(tile), profile_from(source), profile_from(reference), I0));
        },
        py::arg("tile"), py::arg("source"), py::arg("reference"), py::arg("I0") = 255.0);

    // gbdt
    m.def(
        "gbdt_train",
        [](const gbdt::Matrix& x, const std::vector<int>& y, int n_rounds, double learning_rate, int max_depth,
           double lambda, double gamma, double min_child_weight) {
            gbdt::TrainConfig tc;
            tc.n_rounds = n_rounds;
            tc.learning_rate = learning_rate;
            tc.max_depth = max_depth;
            tc.lambda = lambda;
            tc.gamma = gamma;
            tc.min_child_weight = min_child_weight;
            return gbdt::serialize(gbdt::train(x, y, tc));
        },
        py::arg("features"), py::arg("labels"), py::arg("n_rounds") = 50, py::arg("learning_rate") = 0.1,
        py::arg("max_depth") = 3, py::arg("reg_lambda") = 1.0, py::arg("gamma") = 0.0,
        py::arg("min_child_weight") = 1.0, "Returns the serialized model text.");
    m.def(
        "gbdt_predict_proba",
        [](const std::string& model_text, const gbdt::Matrix& x) {
            const auto model = gbdt::deserialize(model_text);
            std::vector<std::vector<double>> out;
            for (const auto& row : x) out.push_back(gbdt::predict_proba(model, row));
            return out;
        },
        py::arg("model"), py::arg("features"));

    // pipeline
    py::class_<pipeline::Config>(m, "Config")
        .def_static("defaults", &pipeline::Config::defaults)
        .def_static("load", &pipeline::Config::load, py::arg("path"))
        .def_static("default_text", &pipeline::Config::default_text)
        .def("set", &pipeline::Config::set, py::arg("key"), py::arg("value"))
        .def("get", &pipeline::Config::get, py::arg("key"))
        .def("validate", &pipeline::Config::validate)
        .def("values", &pipeline::Config::values);
    m.def("stage_names", &pipeline::stage_names);
    m.def(
        "run_stage",
        [](const std::string& stage, const pipeline::Config& cfg, bool force) {
            auto r = pipeline::run_stage(stage, cfg, {force});
            return std::pair{r.skipped, r.outputs};
        },
        py::arg("stage"), py::arg("config"), py::arg("force") = false, "(skipped, {output: sha256}).");
    m.def(
        "run_all",
        [](const pipeline::Config& cfg, bool force) {
            std::vector<std::pair<std::string, bool>> out;
            for (const auto& r : pipeline::run_all(cfg, {force})) out.emplace_back(r.stage, r.skipped);
            return out;
        },
        py::arg("config"), py::arg("force") = false, "[(stage, skipped)].");
    m.def(
        "generate_synthetic_cohort",
        [](const std::filesystem::path& out_dir, int wsis_per_class, double signal, std::uint64_t seed,
           int slide_size, bool artifacts) {
            SyntheticCohortConfig c;
            c.wsis_per_class = wsis_per_class;
            c.signal = signal;
            c.seed = seed;
            c.slide_size = slide_size;
            c.artifacts = artifacts;
            return generate_synthetic_cohort(c, out_dir).manifest.records.size();
        },
        py::arg("out_dir"), py::arg("wsis_per_class") = 20, py::arg("signal") = 1.0, py::arg("seed") = 0,
        py::arg("slide_size") = 384, py::arg("artifacts") = true, "Returns the number of slides written.");
}
