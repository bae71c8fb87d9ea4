#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "zip/anchors.hpp"
#include "zip/commands.hpp"
#include "zip/config.hpp"
#include "zip/geometry.hpp"
#include "zip/inference.hpp"

namespace py = pybind11;
using namespace zip;

namespace {

using BoxTuple = std::tuple<double, double, double, double>;

Box to_box(const BoxTuple& t) {
    return Box{std::get<0>(t), std::get<1>(t), std::get<2>(t), std::get<3>(t)};
}

std::vector<Box> to_boxes(const std::vector<BoxTuple>& ts) {
    std::vector<Box> out;
    out.reserve(ts.size());
    for (const auto& t : ts) out.push_back(to_box(t));
    return out;
}

RunConfig config_from(const std::string& config_path, const std::vector<std::string>& overrides) {
    return load_config(config_path, overrides);
}

// Holds a trained network plus its engine settings for repeated propose calls.
template <typename T>
struct Predictor {
    RunConfig cfg;
    std::unique_ptr<ZipNet<T>> net;

    Predictor(const RunConfig& config, const std::string& checkpoint) : cfg(config) {
        Rng rng(cfg.seed);
        net = std::make_unique<ZipNet<T>>(make_net_config(cfg), rng);
        net->from_entries(load_checkpoint(checkpoint));
    }

    std::vector<std::tuple<double, double, double, double, double>> propose_file(
        const std::string& image_path) {
        Image img = read_image(image_path);
        ProposalEngine<T> engine(*net, make_inference_settings(cfg));
        std::vector<std::tuple<double, double, double, double, double>> out;
        for (const auto& p : engine.propose(img))
            out.push_back({p.box.x1, p.box.y1, p.box.x2, p.box.y2, p.score});
        return out;
    }
};

}  // namespace

PYBIND11_MODULE(_zipnet, m) {
    m.doc() = "zoom-out-and-in object proposal network (C++ core)";

    m.def("iou", [](const BoxTuple& a, const BoxTuple& b) { return iou(to_box(a), to_box(b)); },
          py::arg("a"), py::arg("b"));

    m.def(
        "nms",
        [](const std::vector<BoxTuple>& boxes, const std::vector<double>& scores, double threshold,
           int max_keep) { return nms(to_boxes(boxes), scores, threshold, max_keep); },
        py::arg("boxes"), py::arg("scores"), py::arg("threshold"), py::arg("max_keep") = -1);

    m.def(
        "encode_offset",
        [](const BoxTuple& anchor, const BoxTuple& gt) {
            Offset t = encode_offset(to_box(anchor), to_box(gt));
            return std::make_tuple(t.tx, t.ty, t.tw, t.th);
        },
        py::arg("anchor"), py::arg("gt"));

    m.def(
        "decode_offset",
        [](const std::tuple<double, double, double, double>& offset, const BoxTuple& anchor) {
            Box b = decode_offset(Offset{std::get<0>(offset), std::get<1>(offset),
                                         std::get<2>(offset), std::get<3>(offset)},
                                  to_box(anchor));
            return std::make_tuple(b.x1, b.y1, b.x2, b.y2);
        },
        py::arg("offset"), py::arg("anchor"));

    m.def(
        "make_templates",
        [](const std::vector<double>& scales, const std::vector<double>& ratios) {
            std::vector<std::tuple<double, double, double>> out;
            for (const auto& t : make_templates(scales, ratios))
                out.push_back({t.scale, t.ratio, t.width()});
            return out;
        },
        py::arg("scales"), py::arg("ratios"));

    m.def(
        "fit_ratio_stats",
        [](const std::vector<BoxTuple>& gts) { return fit_ratio_stats(to_boxes(gts)); },
        py::arg("gt_boxes"));

    m.def("default_config_json", []() { return config_to_json_text(default_config()); });

    m.def(
        "gen_data",
        [](const std::string& config_path, const std::vector<std::string>& overrides) {
            return cmd_gen_data(config_from(config_path, overrides));
        },
        py::arg("config_path") = "", py::arg("overrides") = std::vector<std::string>{});

    m.def(
        "train",
        [](const std::string& manifest, const std::string& out_dir, const std::string& config_path,
           const std::vector<std::string>& overrides, const std::string& resume) {
            return cmd_train(config_from(config_path, overrides), manifest, out_dir, resume);
        },
        py::arg("manifest"), py::arg("out_dir"), py::arg("config_path") = "",
        py::arg("overrides") = std::vector<std::string>{}, py::arg("resume") = "");

    m.def(
        "propose",
        [](const std::string& checkpoint, const std::string& manifest, const std::string& out_json,
           const std::string& config_path, const std::vector<std::string>& overrides,
           const std::string& out_csv) {
            return cmd_propose(config_from(config_path, overrides), checkpoint, manifest, out_json,
                               out_csv);
        },
        py::arg("checkpoint"), py::arg("manifest"), py::arg("out_json"),
        py::arg("config_path") = "", py::arg("overrides") = std::vector<std::string>{},
        py::arg("out_csv") = "");

    m.def(
        "evaluate",
        [](const std::string& gts_manifest, const std::string& proposals, const std::string& out_json,
           const std::string& config_path, const std::vector<std::string>& overrides,
           const std::string& out_csv) {
            return cmd_eval(config_from(config_path, overrides), gts_manifest, proposals, out_json,
                            out_csv);
        },
        py::arg("gts_manifest"), py::arg("proposals"), py::arg("out_json"),
        py::arg("config_path") = "", py::arg("overrides") = std::vector<std::string>{},
        py::arg("out_csv") = "");

    m.def(
        "anchor_stats",
        [](const std::string& manifest, const std::string& out_json, const std::string& config_path,
           const std::vector<std::string>& overrides) {
            return cmd_anchor_stats(config_from(config_path, overrides), manifest, out_json);
        },
        py::arg("manifest"), py::arg("out_json"), py::arg("config_path") = "",
        py::arg("overrides") = std::vector<std::string>{});

    m.def("grad_check", []() {
        std::vector<std::tuple<std::string, double, bool>> out;
        for (const auto& r : run_grad_suite()) out.push_back({r.op, r.max_rel_err, r.pass});
        return out;
    });

    py::class_<Predictor<float>>(m, "PredictorF32")
        .def(py::init([](const std::string& checkpoint, const std::string& config_path,
                         const std::vector<std::string>& overrides) {
                 return new Predictor<float>(config_from(config_path, overrides), checkpoint);
             }),
             py::arg("checkpoint"), py::arg("config_path") = "",
             py::arg("overrides") = std::vector<std::string>{})
        .def("propose_file", &Predictor<float>::propose_file, py::arg("image_path"));

    py::class_<Predictor<double>>(m, "PredictorF64")
        .def(py::init([](const std::string& checkpoint, const std::string& config_path,
                         const std::vector<std::string>& overrides) {
                 return new Predictor<double>(config_from(config_path, overrides), checkpoint);
             }),
             py::arg("checkpoint"), py::arg("config_path") = "",
             py::arg("overrides") = std::vector<std::string>{})
        .def("propose_file", &Predictor<double>::propose_file, py::arg("image_path"));
}
