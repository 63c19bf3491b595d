// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <string>

#include <fmt/format.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sqft/error.hpp"
#include "sqft/pipeline.hpp"

namespace py = pybind11;
using namespace sqft;

namespace {

using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const F64Array& a) {
    if (a.ndim() != 2) throw ShapeError("expected a 2-d array");
    const auto rows = static_cast<std::size_t>(a.shape(0));
    const auto cols = static_cast<std::size_t>(a.shape(1));
    return Matrix(rows, cols, std::vector<double>(a.data(), a.data() + rows * cols));
}

py::array_t<double> to_numpy(const Matrix& m) {
    py::array_t<double> out({m.rows(), m.cols()});
    std::memcpy(out.mutable_data(), m.data().data(), m.size() * sizeof(double));
    return out;
}

py::array_t<bool> mask_to_numpy(const SparsityMask& m) {
    py::array_t<bool> out({m.rows(), m.cols()});
    bool* dst = out.mutable_data();
    for (std::size_t i = 0; i < m.bits().size(); ++i) dst[i] = m.bits()[i] != 0;
    return out;
}

py::dict quantized_to_dict(const QuantizedTensor& q) {
    const std::size_t g = q.params.groups_per_row();
    py::array_t<std::uint8_t> codes({q.rows(), q.cols()});
    std::memcpy(codes.mutable_data(), q.codes.data(), q.codes.size());
    py::array_t<double> scales({q.rows(), g});
    std::memcpy(scales.mutable_data(), q.params.scales.data(), q.params.scales.size() * sizeof(double));
    py::array_t<std::int32_t> zeros({q.rows(), g});
    std::memcpy(zeros.mutable_data(), q.params.zeros.data(), q.params.zeros.size() * sizeof(std::int32_t));
    py::dict d;
    d["codes"] = codes;
    d["scales"] = scales;
    d["zeros"] = zeros;
    d["bits"] = q.params.bits;
    d["range_mode"] = std::string(to_string(q.params.range_mode));
    d["q_max"] = q.params.q_max;
    return d;
}

QuantizedTensor quantized_from_dict(const py::dict& d) {
    auto codes = d["codes"].cast<py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>>();
    auto scales = d["scales"].cast<F64Array>();
    auto zeros = d["zeros"].cast<py::array_t<std::int32_t, py::array::c_style | py::array::forcecast>>();
    if (codes.ndim() != 2 || scales.ndim() != 2 || zeros.ndim() != 2) {
        throw ShapeError("codes, scales and zeros must be 2-d");
    }
    QuantizedTensor q;
    q.params.bits = d["bits"].cast<int>();
    q.params.range_mode = parse_range_mode(d["range_mode"].cast<std::string>());
    q.params.q_max = q_max_for(q.params.bits, q.params.range_mode);
    q.params.rows = static_cast<std::size_t>(codes.shape(0));
    q.params.cols = static_cast<std::size_t>(codes.shape(1));
    const auto groups = static_cast<std::size_t>(scales.shape(1));
    if (groups == 0 || q.params.cols % groups != 0) throw ShapeError("scales do not tile the columns");
    q.params.group_size = q.params.cols / groups;
    q.codes.assign(codes.data(), codes.data() + codes.size());
    q.params.scales.assign(scales.data(), scales.data() + scales.size());
    q.params.zeros.assign(zeros.data(), zeros.data() + zeros.size());
    q.params.validate();
    return q;
}

template <typename T>
py::array_t<T> typed_array(const std::vector<std::uint64_t>& dims, const std::vector<T>& values) {
    std::vector<py::ssize_t> shape(dims.begin(), dims.end());
    py::array_t<T> out(shape);
    if (!values.empty()) std::memcpy(out.mutable_data(), values.data(), values.size() * sizeof(T));
    return out;
}

py::object tensor_to_numpy(const Tensor& t) {
    switch (t.dtype) {
        case DType::f32: {
            const auto v = t.to_f64_values();
            return typed_array<float>(t.dims, std::vector<float>(v.begin(), v.end()));
        }
        case DType::f64: return typed_array<double>(t.dims, t.to_f64_values());
        case DType::u8: return typed_array<std::uint8_t>(t.dims, t.to_u8());
        case DType::i32: return typed_array<std::int32_t>(t.dims, t.to_i32());
        case DType::mask: {
            std::vector<py::ssize_t> shape(t.dims.begin(), t.dims.end());
            py::array_t<bool> out(shape);
            for (std::size_t i = 0; i < t.payload.size(); ++i) out.mutable_data()[i] = t.payload[i] != 0;
            return out;
        }
    }
    throw Error("unknown dtype");
}

Tensor tensor_from_numpy(const std::string& name, const py::array& a) {
    Tensor t;
    t.name = name;
    for (py::ssize_t i = 0; i < a.ndim(); ++i) t.dims.push_back(static_cast<std::uint64_t>(a.shape(i)));
    py::array c = py::array::ensure(a, py::array::c_style);
    const auto kind = a.dtype().kind();
    const auto itemsize = a.dtype().itemsize();
    if (kind == 'b') {
        t.dtype = DType::mask;
    } else if (kind == 'f' && itemsize == 4) {
        t.dtype = DType::f32;
    } else if (kind == 'f' && itemsize == 8) {
        t.dtype = DType::f64;
    } else if (kind == 'u' && itemsize == 1) {
        t.dtype = DType::u8;
    } else if (kind == 'i' && itemsize == 4) {
        t.dtype = DType::i32;
    } else {
        throw ConfigError(fmt::format("tensor '{}': unsupported dtype (use float32, float64, uint8, "
                                      "int32 or bool)", name));
    }
    const auto* p = static_cast<const std::uint8_t*>(c.data());
    t.payload.assign(p, p + c.nbytes());
    return t;
}

py::dict metrics_to_dict(const Metrics& m) {
    py::dict d;
    d["loss"] = m.loss;
    if (m.accuracy) d["accuracy"] = *m.accuracy;
    d["sparsity"] = m.sparsity;
    d["layer_sparsity"] = m.layer_sparsity;
    d["params"] = m.total_params;
    if (m.mergeable) {
        d["mergeable"] = *m.mergeable;
        d["merge_note"] = m.merge_note;
    }
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "sqft-forge core: pruning, quantization, elastic adapters, rank search, SQCK checkpoints";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<InvariantError>(m, "InvariantError", PyExc_RuntimeError);
    py::register_exception<FormatError>(m, "CheckpointFormatError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

    m.def("score_magnitude", [](const F64Array& w) { return to_numpy(score_magnitude(to_matrix(w)).values); },
          py::arg("w"));
    m.def("score_wanda",
          [](const F64Array& w, const F64Array& calib_x) {
              return to_numpy(score_wanda(to_matrix(w), to_matrix(calib_x)).values);
          },
          py::arg("w"), py::arg("calib_x"),
          "|W| times the L2 norm of each input feature; rows of calib_x are samples.");
    m.def("build_mask",
          [](const F64Array& scores, double sparsity, const std::string& group) {
              return mask_to_numpy(build_mask(ScoreMatrix{to_matrix(scores)}, SparsityLevel(sparsity),
                                              parse_mask_group(group)));
          },
          py::arg("scores"), py::arg("sparsity"), py::arg("group") = "row",
          "Boolean keep-mask pruning the lowest scores (ties to the lower index).");

    m.def("quantize_rtn",
          [](const F64Array& w, int bits, std::size_t group_size, const std::string& range_mode) {
              const Matrix mw = to_matrix(w);
              return quantized_to_dict(
                  quantize_rtn(mw, calibrate_params(mw, bits, group_size, parse_range_mode(range_mode))));
          },
          py::arg("w"), py::arg("bits") = 4, py::arg("group_size") = 0, py::arg("range_mode") = "paper");
    m.def("quantize_gptq_lite",
          [](const F64Array& w, const F64Array& calib_x, int bits, std::size_t group_size,
             const std::string& range_mode) {
              const GptqResult r = quantize_gptq_lite(to_matrix(w), to_matrix(calib_x), bits, group_size,
                                                      parse_range_mode(range_mode));
              py::dict d = quantized_to_dict(r.quantized);
              d["recon_error"] = r.recon_error;
              d["rtn_recon_error"] = r.rtn_recon_error;
              return d;
          },
          py::arg("w"), py::arg("calib_x"), py::arg("bits") = 4, py::arg("group_size") = 0,
          py::arg("range_mode") = "paper");
    m.def("dequantize", [](const py::dict& q) { return to_numpy(dequantize(quantized_from_dict(q))); },
          py::arg("quantized"));

    m.def("merge_sparsepeft",
          [](const F64Array& w_p, const F64Array& l_p) {
              return to_numpy(merge_sparsepeft(to_matrix(w_p), to_matrix(l_p)));
          },
          py::arg("w_p"), py::arg("l_p"),
          "W^p + L^p; raises InvariantError if L^p is nonzero where W^p is pruned.");
    m.def("merge_qa",
          [](const F64Array& w_p, const F64Array& l_p, const py::dict& base) {
              return quantized_to_dict(merge_qa(to_matrix(w_p), to_matrix(l_p), quantized_from_dict(base).params));
          },
          py::arg("w_p"), py::arg("l_p"), py::arg("base"),
          "Requantizes W^p + L^p with the base's scales and zeros.");

    m.def("heuristic_config",
          [](const std::vector<std::vector<int>>& spaces) {
              std::vector<RankSpace> rs(spaces.begin(), spaces.end());
              return heuristic_config(rs).ranks;
          },
          py::arg("spaces"));
    m.def("hill_climb",
          [](const std::vector<std::vector<int>>& spaces, const std::function<double(std::vector<int>)>& score,
             int turns, int neighbors, int step, std::uint64_t seed) {
              std::vector<RankSpace> rs(spaces.begin(), spaces.end());
              SearchParams p;
              p.turns = turns;
              p.neighbors = neighbors;
              p.step = step;
              p.seed = seed;
              const SearchResult r =
                  hill_climb(rs, p, [&](const RankConfig& c) { return score(c.ranks); });
              py::dict d;
              d["best"] = r.best.ranks;
              d["best_score"] = r.best_score;
              d["heuristic"] = r.heuristic.ranks;
              d["heuristic_score"] = r.heuristic_score;
              d["evaluations"] = r.evaluations;
              d["anchor_scores"] = r.anchor_scores;
              return d;
          },
          py::arg("spaces"), py::arg("score"), py::arg("turns") = 10, py::arg("neighbors") = 8,
          py::arg("step") = 1, py::arg("seed") = 0,
          "Maximizes score(ranks) starting from the per-layer median configuration.");

    m.def("save_checkpoint",
          [](const std::string& path, const py::dict& tensors, const py::dict& metadata) {
              CheckpointContainer c;
              for (auto item : tensors) {
                  c.tensors.push_back(tensor_from_numpy(item.first.cast<std::string>(),
                                                        py::array::ensure(item.second)));
              }
              for (auto item : metadata) {
                  c.set_meta(item.first.cast<std::string>(), py::str(item.second).cast<std::string>());
              }
              save_checkpoint(path, c);
          },
          py::arg("path"), py::arg("tensors"), py::arg("metadata") = py::dict());
    m.def("load_checkpoint",
          [](const std::string& path) {
              const CheckpointContainer c = load_checkpoint(path);
              py::dict tensors;
              for (const auto& t : c.tensors) tensors[py::str(t.name)] = tensor_to_numpy(t);
              py::dict meta;
              for (const auto& [k, v] : c.metadata) meta[py::str(k)] = v;
              return py::make_tuple(tensors, meta);
          },
          py::arg("path"), "Returns (tensors, metadata); tensors keep their stored order.");

    m.def("run_pipeline_json",
          [](const std::string& config, const std::string& out_dir) {
              RunResult r;
              {
                  py::gil_scoped_release release;
                  r = run_pipeline(parse_spec(config));
                  if (!out_dir.empty()) write_artifacts(r, out_dir);
              }
              py::dict d;
              d["method"] = std::string(to_string(r.spec.method));
              d["dense"] = metrics_to_dict(r.dense);
              d["no_tune"] = metrics_to_dict(r.no_tune);
              d["final"] = metrics_to_dict(r.final);
              d["loss_history"] = r.loss_history;
              d["ranks"] = r.reference.ranks;
              py::dict files;
              for (const auto& a : r.artifacts) files[py::str(a.filename)] = a.bytes;
              d["artifacts"] = files;
              d["precision"] = r.cost.precision;
              return d;
          },
          py::arg("config"), py::arg("out_dir") = "");
}
