#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "tulip/error.hpp"
#include "tulip/eval.hpp"
#include "tulip/experiment.hpp"
#include "tulip/io.hpp"
#include "tulip/parallel.hpp"
#include "tulip/synthdata.hpp"
#include "tulip/training.hpp"

namespace py = pybind11;
using namespace tulip;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

RangeImage image_from_array(const SensorIntrinsics& intr, const F32Array& a) {
  require(a.ndim() == 2 && a.shape(0) == intr.height && a.shape(1) == intr.width,
          Errc::kShapeMismatch, "array shape does not match intrinsics");
  std::vector<float> px(a.data(), a.data() + a.size());
  return RangeImage(intr, std::move(px));
}

F32Array image_to_array(const RangeImage& img) {
  F32Array out({img.height(), img.width()});
  std::memcpy(out.mutable_data(), img.pixels().data(), img.size() * sizeof(float));
  return out;
}

F64Array cloud_to_array(const PointCloud& pc) {
  F64Array out({static_cast<py::ssize_t>(pc.size()), py::ssize_t{3}});
  double* d = out.mutable_data();
  for (const auto& p : pc.points) {
    *d++ = p.x;
    *d++ = p.y;
    *d++ = p.z;
  }
  return out;
}

PointCloud cloud_from_array(const F64Array& a) {
  require(a.ndim() == 2 && a.shape(1) == 3, Errc::kShapeMismatch, "points must be an (N, 3) array");
  PointCloud pc;
  pc.points.resize(static_cast<std::size_t>(a.shape(0)));
  const double* d = a.data();
  for (auto& p : pc.points) {
    p.x = *d++;
    p.y = *d++;
    p.z = *d++;
  }
  return pc;
}

py::object opt(const std::optional<double>& v) { return v ? py::object(py::float_(*v)) : py::none(); }

py::dict frame_dict(const FrameMetrics& f) {
  py::dict d;
  d["mae"] = f.mae;
  d["chamfer"] = opt(f.chamfer);
  d["iou"] = f.iou;
  py::list bins;
  for (const auto& b : f.bins) {
    py::dict e;
    e["lo"] = b.lo;
    e["hi"] = b.hi;
    e["pixels"] = b.pixels;
    e["mae"] = opt(b.mae);
    e["chamfer"] = opt(b.chamfer);
    e["iou"] = opt(b.iou);
    bins.append(e);
  }
  d["bins"] = bins;
  return d;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["mae"] = r.mae;
  d["chamfer"] = r.chamfer;
  d["iou"] = r.iou;
  d["frames"] = r.frame_count;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "LiDAR range-image upsampling toolkit";

  static py::exception<Error> error(m, "TulipError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(error.ptr(), e.what());
    }
  });

  py::class_<SensorIntrinsics>(m, "SensorIntrinsics")
      .def(py::init<>())
      .def_readwrite("height", &SensorIntrinsics::height)
      .def_readwrite("width", &SensorIntrinsics::width)
      .def_readwrite("theta_min", &SensorIntrinsics::theta_min)
      .def_readwrite("theta_max", &SensorIntrinsics::theta_max)
      .def_readwrite("max_range", &SensorIntrinsics::max_range)
      .def("validate", &SensorIntrinsics::validate)
      .def_static("symmetric", &SensorIntrinsics::symmetric, py::arg("height"), py::arg("width"),
                  py::arg("fov_deg"), py::arg("max_range"))
      .def(py::self == py::self)
      .def("__repr__", [](const SensorIntrinsics& s) {
        return "SensorIntrinsics(" + std::to_string(s.height) + "x" + std::to_string(s.width) +
               ", theta=[" + std::to_string(s.theta_min) + ", " + std::to_string(s.theta_max) +
               "], max_range=" + std::to_string(s.max_range) + ")";
      });

  py::class_<RangeImage>(m, "RangeImage")
      .def(py::init(&image_from_array), py::arg("intrinsics"), py::arg("ranges"))
      .def_property_readonly("intrinsics", &RangeImage::intrinsics)
      .def_property_readonly("height", &RangeImage::height)
      .def_property_readonly("width", &RangeImage::width)
      .def("ranges", &image_to_array, "copy of the pixels as an (H, W) float32 array")
      .def(py::self == py::self);

  m.def("read_rimg", py::overload_cast<const std::filesystem::path&>(&io::read_rimg));
  m.def("write_rimg",
        py::overload_cast<const std::filesystem::path&, const RangeImage&>(&io::write_rimg));
  m.def("read_ply", [](const std::filesystem::path& p) { return cloud_to_array(io::read_ply(p)); });
  m.def("write_ply", [](const std::filesystem::path& p, const F64Array& pts) {
    io::write_ply(p, cloud_from_array(pts));
  });
  m.def("write_png", &io::write_png);

  m.def("range_image_to_pointcloud",
        [](const RangeImage& img) { return cloud_to_array(range_image_to_pointcloud(img)); });
  m.def(
      "pointcloud_to_range_image",
      [](const F64Array& pts, const SensorIntrinsics& intr) {
        auto r = pointcloud_to_range_image(cloud_from_array(pts), intr);
        return py::make_tuple(std::move(r.image), r.dropped);
      },
      "returns (image, dropped point count)");
  m.def("downsample_rows", &downsample_rows, py::arg("image"), py::arg("beta"),
        py::arg("phase") = 0);
  m.def("bilinear_upsample", &bilinear_upsample);
  m.def("nearest_upsample", &nearest_upsample);

  m.def("mae", &mae);
  m.def("chamfer", [](const F64Array& a, const F64Array& b) {
    const PointCloud pa = cloud_from_array(a), pb = cloud_from_array(b);
    py::gil_scoped_release release;
    return chamfer(pa, pb);
  });
  m.def(
      "voxel_iou",
      [](const F64Array& a, const F64Array& b, double vs) {
        return voxel_iou(cloud_from_array(a), cloud_from_array(b), vs);
      },
      py::arg("a"), py::arg("b"), py::arg("voxel_size") = kDefaultVoxelSize);
  m.def(
      "evaluate_frame",
      [](const RangeImage& pred, const RangeImage& gt, std::vector<double> edges, double vs) {
        EvalOptions opts;
        opts.bin_edges = std::move(edges);
        opts.voxel_size = vs;
        return frame_dict(evaluate_frame(pred, gt, opts));
      },
      py::arg("pred"), py::arg("gt"), py::arg("bin_edges") = kDefaultBinEdges,
      py::arg("voxel_size") = kDefaultVoxelSize);

  m.def(
      "generate_dataset",
      [](int frames, const std::filesystem::path& out, std::uint64_t seed, int height, int width,
         double fov_deg, double max_range, double split) {
        SceneTemplate tmpl;
        tmpl.intrinsics = SensorIntrinsics::symmetric(height, width, fov_deg, max_range);
        DatasetManifest man;
        {
          py::gil_scoped_release release;
          man = generate_dataset(frames, tmpl, seed, out, split);
        }
        py::dict d;
        d["train"] = man.paths("train");
        d["test"] = man.paths("test");
        return d;
      },
      py::arg("frames"), py::arg("out"), py::arg("seed") = 0, py::arg("height") = 64,
      py::arg("width") = 256, py::arg("fov_deg") = 30.0, py::arg("max_range") = 80.0,
      py::arg("split") = 0.8);

  py::class_<TulipModel<float>>(m, "Model")
      .def(py::init([](const std::string& config_text, std::uint64_t seed) {
             return TulipModel<float>(NetworkConfig::from_text(config_text), seed);
           }),
           py::arg("config_text") = "", py::arg("seed") = 0)
      .def_static("load", &load_model)
      .def("save", [](const TulipModel<float>& model, const std::filesystem::path& p) {
        save_model(p, model);
      })
      .def_property_readonly("config_text",
                             [](const TulipModel<float>& model) { return model.config().to_text(); })
      .def_property_readonly("parameter_count", &TulipModel<float>::parameter_count)
      .def(
          "infer",
          [](const TulipModel<float>& model, const RangeImage& low, int passes, double threshold,
             std::uint64_t seed, bool mc) {
            InferenceConfig icfg;
            icfg.mc_enabled = mc;
            icfg.mc_passes = passes;
            icfg.mc_threshold = threshold;
            icfg.seed = seed;
            McResult res;
            {
              py::gil_scoped_release release;
              res = mc_dropout_infer(model, low, icfg);
            }
            py::dict d;
            d["mean"] = res.mean_image();
            d["std"] = res.std_image();
            d["filtered"] = res.filtered_image();
            d["valid_count"] = res.valid_count();
            return d;
          },
          py::arg("low"), py::arg("mc_passes") = 8, py::arg("mc_threshold") = 0.5,
          py::arg("seed") = 0, py::arg("mc") = true)
      .def(
          "train",
          [](TulipModel<float>& model, const std::filesystem::path& manifest,
             const std::string& train_text, const std::filesystem::path& checkpoint) {
            // train keys only; the network is already built
            const auto cfg = ExperimentConfig::from_text(train_text + "\n" + model.config().to_text());
            const auto man = DatasetManifest::read(manifest);
            TrainOutputs out;
            out.checkpoint = checkpoint;
            py::gil_scoped_release release;
            return train(model, man, cfg.train, out).losses;
          },
          py::arg("manifest"), py::arg("train_config") = "",
          py::arg("checkpoint") = std::filesystem::path())
      .def("evaluate",
           [](const TulipModel<float>& model, const std::vector<std::filesystem::path>& gt,
              bool mc, int passes, std::uint64_t seed) {
             InferenceConfig icfg;
             icfg.mc_enabled = mc;
             icfg.mc_passes = passes;
             icfg.seed = seed;
             EvalReport r;
             {
               py::gil_scoped_release release;
               r = evaluate_model(model, gt, icfg);
             }
             return report_dict(r);
           },
           py::arg("gt_frames"), py::arg("mc") = false, py::arg("mc_passes") = 8,
           py::arg("seed") = 0);

  m.def("evaluate_bilinear", [](const std::vector<std::filesystem::path>& gt, int beta) {
    return report_dict(evaluate_bilinear(gt, beta));
  });

  m.def("set_thread_count", &set_thread_count, "0 restores the default");
  m.def("thread_count", &thread_count);
}
