#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "fuseloc/checkpoint.hpp"
#include "fuseloc/cli.hpp"
#include "fuseloc/dataset.hpp"
#include "fuseloc/evaluation.hpp"
#include "fuseloc/model.hpp"

namespace py = pybind11;
using namespace fuseloc;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(std::span<const double> v, std::vector<py::ssize_t> shape) {
  py::array_t<double> out(shape);
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

PointCloud cloud_from(const F32& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) throw std::invalid_argument("point cloud must have shape [N, 3]");
  PointCloud pc(static_cast<std::size_t>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), pc.empty() ? nullptr : pc[0].data());
  return pc;
}

Image image_from(const U8& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("image must have shape [H, W, 3]");
  Image img(static_cast<std::size_t>(a.shape(1)), static_cast<std::size_t>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.data.begin());
  return img;
}

U8 image_to(const Image& img) {
  U8 out({static_cast<py::ssize_t>(img.height), static_cast<py::ssize_t>(img.width), py::ssize_t{3}});
  std::copy(img.data.begin(), img.data.end(), out.mutable_data());
  return out;
}

std::vector<Position> positions_from(const F64& a) {
  if (a.ndim() != 2 || a.shape(1) != 2) throw std::invalid_argument("positions must have shape [N, 2]");
  std::vector<Position> p(static_cast<std::size_t>(a.shape(0)));
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = {a.data()[2 * i], a.data()[2 * i + 1]};
  return p;
}

DescriptorDatabase db_from(const F64& desc, const F64& pos, const char* prefix) {
  if (desc.ndim() != 2) throw std::invalid_argument("descriptors must have shape [N, D]");
  const auto p = positions_from(pos);
  if (p.size() != static_cast<std::size_t>(desc.shape(0))) throw std::invalid_argument("descriptor and position counts differ");
  const auto D = static_cast<std::size_t>(desc.shape(1));
  DescriptorDatabase db(D);
  for (std::size_t i = 0; i < p.size(); ++i)
    db.add({prefix + std::to_string(i), p[i], std::vector<double>(desc.data() + i * D, desc.data() + (i + 1) * D)});
  return db;
}

NetworkConfig network_from(std::size_t k, std::vector<std::size_t> pc, std::vector<std::size_t> img, double quant_step,
                           const std::string& fusion, const std::string& head, const std::string& pooling, bool normalize) {
  NetworkConfig c;
  c.k = k;
  c.pc_channels = std::move(pc);
  c.image_channels = std::move(img);
  c.quantization.step = quant_step;
  c.fusion_mode = parse_fusion_mode(fusion);
  c.fusion_head = parse_fusion_head(head);
  c.pooling.method = parse_pool_method(pooling);
  c.normalize = normalize;
  c.validate();
  return c;
}

py::dict describe(Model& m, const std::vector<F32>& clouds, const std::vector<U8>& images, const std::string& precision) {
  if (clouds.size() != images.size()) throw std::invalid_argument("need one image per point cloud");
  std::vector<PointCloud> pcs;
  std::vector<Image> imgs;
  for (std::size_t i = 0; i < clouds.size(); ++i) {
    pcs.push_back(cloud_from(clouds[i]));
    imgs.push_back(image_from(images[i]));
  }
  std::vector<const PointCloud*> cp;
  std::vector<const Image*> ip;
  for (std::size_t i = 0; i < pcs.size(); ++i) {
    cp.push_back(&pcs[i]);
    ip.push_back(&imgs[i]);
  }
  Tape tape(parse_precision(precision), false);
  const Descriptors d = m.forward(tape, cp, ip);
  auto arr = [](Var v) {
    return to_numpy(v.value(), {static_cast<py::ssize_t>(v.shape()[0]), static_cast<py::ssize_t>(v.shape()[1])});
  };
  py::dict out;
  out["pc"] = arr(d.pc);
  out["rgb"] = arr(d.rgb);
  out["fused"] = arr(d.fused);
  return out;
}

}  // namespace

PYBIND11_MODULE(_fuseloc, m) {
  m.doc() = "Multimodal point-cloud and image place recognition";

  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> all{"fuseloc"};
        all.insert(all.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        for (const auto& a : all) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command-line tool in-process; returns (exit_code, stdout, stderr).");

  m.def(
      "generate_synthetic",
      [](const std::string& out_dir, int places, int traversals, double spacing, std::size_t points, std::size_t width,
         std::size_t height, int variants, bool spurious_rgb, std::uint64_t seed) {
        SyntheticConfig c;
        c.places = places;
        c.traversals = traversals;
        c.spacing_m = spacing;
        c.points = points;
        c.image_width = width;
        c.image_height = height;
        c.image_variants = variants;
        c.spurious_rgb = spurious_rgb;
        c.seed = seed;
        const auto r = generate_synthetic(c, out_dir);
        py::dict d;
        d["elements"] = r.elements;
        d["spurious"] = r.spurious;
        d["watermarked_traversals"] = r.watermarked_traversals;
        d["self_check_passed"] = r.self_check_passed;
        d["summary"] = r.summary();
        return d;
      },
      py::arg("out_dir"), py::kw_only(), py::arg("places") = 40, py::arg("traversals") = 4, py::arg("spacing") = 100.0,
      py::arg("points") = 4096, py::arg("image_width") = 64, py::arg("image_height") = 64, py::arg("image_variants") = 2,
      py::arg("spurious_rgb") = false, py::arg("seed") = 0);

  py::class_<Dataset>(m, "Dataset")
      .def_static("load", &load_dataset, py::arg("root"))
      .def("__len__", &Dataset::size)
      .def_property_readonly("ids",
                             [](const Dataset& d) {
                               std::vector<std::string> ids;
                               for (const auto& e : d.elements) ids.push_back(e.id);
                               return ids;
                             })
      .def_property_readonly("traversals",
                             [](const Dataset& d) {
                               std::vector<int> t;
                               for (const auto& e : d.elements) t.push_back(e.traversal);
                               return t;
                             })
      .def_property_readonly("positions",
                             [](const Dataset& d) {
                               std::vector<double> v;
                               for (const auto& p : d.positions()) v.insert(v.end(), {p.easting, p.northing});
                               return to_numpy(v, {static_cast<py::ssize_t>(d.size()), 2});
                             })
      .def("cloud",
           [](const Dataset& d, std::size_t i) {
             const auto& pc = d.clouds.at(i);
             py::array_t<float> out({static_cast<py::ssize_t>(pc.size()), py::ssize_t{3}});
             for (std::size_t r = 0; r < pc.size(); ++r) std::copy(pc[r].begin(), pc[r].end(), out.mutable_data() + 3 * r);
             return out;
           })
      .def("image", [](const Dataset& d, std::size_t i, std::size_t v) { return image_to(d.images.at(i).at(v)); },
           py::arg("index"), py::arg("variant") = 0);

  py::class_<Model>(m, "Model")
      .def(py::init([](std::size_t k, std::vector<std::size_t> pc, std::vector<std::size_t> img, double quant_step,
                       const std::string& fusion, const std::string& head, const std::string& pooling, bool normalize,
                       std::uint64_t seed) {
             return Model(network_from(k, std::move(pc), std::move(img), quant_step, fusion, head, pooling, normalize), seed);
           }),
           py::kw_only(), py::arg("k") = 128, py::arg("pc_channels") = std::vector<std::size_t>{32, 32, 64, 64},
           py::arg("image_channels") = std::vector<std::size_t>{32, 64, 128, 256}, py::arg("quant_step") = 0.01,
           py::arg("fusion") = "concat", py::arg("fusion_head") = "none", py::arg("pooling") = "gem",
           py::arg("normalize") = true, py::arg("seed") = 0)
      .def_static("load", [](const std::string& path) { return Model::from_checkpoint(load_checkpoint(path)); },
                  py::arg("path"))
      .def("save", [](const Model& m, const std::string& path) { save_checkpoint(path, m.to_checkpoint()); },
           py::arg("path"))
      .def_property_readonly("config", [](const Model& m) { return m.config().to_header(); })
      .def_property_readonly("parameter_names",
                             [](const Model& m) {
                               std::vector<std::string> n;
                               for (const auto& p : m.params()) n.push_back(p.name);
                               return n;
                             })
      .def("parameter_hash", [](const Model& m) { return parameter_hash(m.params()); })
      .def("describe", &describe, py::arg("clouds"), py::arg("images"), py::arg("precision") = "f64",
           "Eval-mode descriptors for parallel lists of [N,3] clouds and [H,W,3] uint8 images.");

  m.def(
      "pool",
      [](const F64& x, const std::string& method, double p) {
        if (x.ndim() != 2) throw std::invalid_argument("feature map must have shape [N, C]");
        const auto N = static_cast<std::size_t>(x.shape(0)), C = static_cast<std::size_t>(x.shape(1));
        Tape t;
        PoolingConfig cfg;
        cfg.method = parse_pool_method(method);
        Var rows = t.constant({N, C}, std::vector<double>(x.data(), x.data() + x.size()));
        Var out = pool_rows(rows, Segments::single(N), cfg, cfg.method == PoolMethod::gem ? t.scalar(p) : Var{});
        return to_numpy(out.value(), {static_cast<py::ssize_t>(C)});
      },
      py::arg("x"), py::arg("method") = "gem", py::arg("p") = 3.0, "Global pooling of an [N, C] map to [C].");

  m.def(
      "batch_hard_mine",
      [](const F64& desc, const F64& pos) {
        if (desc.ndim() != 2) throw std::invalid_argument("descriptors must have shape [B, D]");
        const auto B = static_cast<std::size_t>(desc.shape(0)), D = static_cast<std::size_t>(desc.shape(1));
        const auto dist = descriptor_distances({desc.data(), B * D}, B, D);
        std::vector<std::tuple<int, int, int>> out;
        for (const auto& t : batch_hard_mine(dist, similarity_masks(positions_from(pos))))
          out.emplace_back(t.anchor, t.positive, t.negative);
        return out;
      },
      py::arg("descriptors"), py::arg("positions"), "(anchor, hardest positive, hardest negative) per eligible anchor.");

  m.def(
      "recall_at_n",
      [](const F64& db, const F64& db_pos, const F64& q, const F64& q_pos, std::size_t n, double radius) {
        return recall_at_n(db_from(db, db_pos, "d"), db_from(q, q_pos, "q"), n, radius);
      },
      py::arg("db"), py::arg("db_positions"), py::arg("queries"), py::arg("query_positions"), py::arg("n") = 1,
      py::arg("radius") = 25.0);
}
