#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>

#include "synthkd/config.hpp"
#include "synthkd/data.hpp"
#include "synthkd/diffusion.hpp"
#include "synthkd/digest.hpp"
#include "synthkd/distill.hpp"
#include "synthkd/metrics.hpp"
#include "synthkd/nets.hpp"

namespace py = pybind11;
using namespace synthkd;

namespace {

Array array_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Shape shape;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<int>(a.shape(i)));
  std::vector<double> data(a.data(), a.data() + a.size());
  return Array::from_data(std::move(shape), std::move(data));
}

py::array_t<double> numpy_from_array(const Array& a) {
  std::vector<py::ssize_t> shape(a.shape().begin(), a.shape().end());
  py::array_t<double> out(shape);
  std::copy(a.data().begin(), a.data().end(), out.mutable_data());
  return out;
}

RealDataset real_from_numpy(const py::array_t<double, py::array::c_style>& images,
                            const py::array_t<int, py::array::c_style | py::array::forcecast>&
                                labels,
                            int num_classes, const std::string& split) {
  if (images.ndim() != 4 || images.shape(1) != 1 || images.shape(2) != kImageSize ||
      images.shape(3) != kImageSize) {
    throw ContractError("images must have shape (n, 1, 16, 16)");
  }
  if (labels.ndim() != 1 || labels.shape(0) != images.shape(0)) {
    throw ContractError("labels must be a vector matching the image count");
  }
  RealDataset ds;
  ds.num_classes = num_classes;
  ds.split = split;
  ds.images.assign(images.data(), images.data() + images.size());
  ds.labels.assign(labels.data(), labels.data() + labels.size());
  return ds;
}

py::array_t<double> real_images(const RealDataset& ds) {
  py::array_t<double> out({static_cast<py::ssize_t>(ds.count()), py::ssize_t(1),
                           py::ssize_t(kImageSize), py::ssize_t(kImageSize)});
  std::copy(ds.images.begin(), ds.images.end(), out.mutable_data());
  return out;
}

py::array_t<int> real_labels(const RealDataset& ds) {
  py::array_t<int> out(static_cast<py::ssize_t>(ds.count()));
  std::copy(ds.labels.begin(), ds.labels.end(), out.mutable_data());
  return out;
}

Condition condition_from(std::optional<int> cls) {
  return cls.has_value() ? Condition::cls(*cls) : Condition::null();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "synthkd: conditional-diffusion synthetic data for knowledge distillation";

  py::register_exception<ContractError>(m, "ContractViolation", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigurationError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataFormatError", PyExc_IOError);
  py::register_exception<NumericError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("sha256_hex", [](py::bytes b) {
    std::string s = b;
    return sha256_hex(s);
  });

  // ---- datasets ------------------------------------------------------------
  py::class_<RealDataset>(m, "RealDataset")
      .def_readonly("num_classes", &RealDataset::num_classes)
      .def_readonly("split", &RealDataset::split)
      .def("__len__", &RealDataset::count)
      .def("images", &real_images)
      .def("labels", &real_labels)
      .def("digest", &RealDataset::digest);

  m.def(
      "generate_toy",
      [](int num_classes, int per_class_train, int per_class_test, std::uint64_t seed) {
        ToySpec spec;
        spec.num_classes = num_classes;
        spec.per_class_train = per_class_train;
        spec.per_class_test = per_class_test;
        spec.seed = seed;
        ToyPair pair = generate_toy(spec);
        return py::make_tuple(std::move(pair.train), std::move(pair.test));
      },
      py::arg("num_classes") = 10, py::arg("per_class_train") = 500,
      py::arg("per_class_test") = 100, py::arg("seed") = 1234);

  m.def("real_dataset", &real_from_numpy, py::arg("images"), py::arg("labels"),
        py::arg("num_classes"), py::arg("split") = "custom");

  m.def("load_idx", &load_idx, py::arg("images_path"), py::arg("labels_path"));

  py::class_<SyntheticDataset>(m, "SyntheticDataset")
      .def_readonly("num_classes", &SyntheticDataset::num_classes)
      .def("__len__", &SyntheticDataset::count)
      .def("digest", &SyntheticDataset::digest)
      .def("labels",
           [](const SyntheticDataset& ds) {
             py::array_t<int> out(static_cast<py::ssize_t>(ds.count()));
             for (std::size_t i = 0; i < ds.count(); ++i) {
               out.mutable_data()[i] = ds.labels[i];
             }
             return out;
           })
      .def("images",
           [](const SyntheticDataset& ds) {
             py::array_t<double> out({static_cast<py::ssize_t>(ds.count()), py::ssize_t(1),
                                      py::ssize_t(kImageSize), py::ssize_t(kImageSize)});
             for (std::size_t i = 0; i < ds.count(); ++i) {
               ds.decode_image(i, out.mutable_data() + i * kImagePixels);
             }
             return out;
           })
      .def_property_readonly("s", [](const SyntheticDataset& ds) { return ds.prov.s; })
      .def_property_readonly("t_sample",
                             [](const SyntheticDataset& ds) { return ds.prov.t_sample; })
      .def_property_readonly("seed", [](const SyntheticDataset& ds) { return ds.prov.seed; });

  m.def("save_skds", &save_skds, py::arg("dataset"), py::arg("path"));
  m.def("load_skds", &load_skds, py::arg("path"));

  // ---- schedule and diffusion math ------------------------------------------
  py::class_<NoiseSchedule>(m, "NoiseSchedule")
      .def_readonly("t_train", &NoiseSchedule::t_train)
      .def_property_readonly("beta",
                             [](const NoiseSchedule& s) {
                               return py::array_t<double>(
                                   static_cast<py::ssize_t>(s.beta.size()), s.beta.data());
                             })
      .def_property_readonly("alpha_bar",
                             [](const NoiseSchedule& s) {
                               return py::array_t<double>(
                                   static_cast<py::ssize_t>(s.alpha_bar.size()),
                                   s.alpha_bar.data());
                             })
      .def_property_readonly("sigma",
                             [](const NoiseSchedule& s) {
                               return py::array_t<double>(
                                   static_cast<py::ssize_t>(s.sigma.size()), s.sigma.data());
                             })
      .def("digest", &NoiseSchedule::digest);

  m.def("make_schedule", &make_schedule, py::arg("t_train") = 400,
        py::arg("beta_min") = 2.5e-4, py::arg("beta_max") = 0.05);

  m.def(
      "forward_noise",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x0, int t,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& eps,
         const NoiseSchedule& schedule) {
        return numpy_from_array(forward_noise(array_from_numpy(x0), t, array_from_numpy(eps),
                                              schedule));
      },
      py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

  m.def(
      "guided_noise",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& eps_cond,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& eps_uncond,
         double s) {
        return numpy_from_array(
            guided_noise(array_from_numpy(eps_cond), array_from_numpy(eps_uncond), s));
      },
      py::arg("eps_cond"), py::arg("eps_uncond"), py::arg("s"));

  // ---- losses ---------------------------------------------------------------
  m.def(
      "kd_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& qt,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& qs, double tau) {
        return kd_loss(array_from_numpy(qt), array_from_numpy(qs), tau).item();
      },
      py::arg("teacher_logits"), py::arg("student_logits"), py::arg("tau") = 10.0);

  m.def(
      "hard_label_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& qs,
         const std::vector<int>& labels) {
        return hard_label_loss(array_from_numpy(qs), labels).item();
      },
      py::arg("student_logits"), py::arg("labels"));

  // ---- models ---------------------------------------------------------------
  py::class_<Denoiser>(m, "Denoiser")
      .def(py::init([](int num_classes, int base_width, int emb_dim, std::uint64_t seed) {
             return Denoiser(num_classes, base_width, emb_dim, seed);
           }),
           py::arg("num_classes"), py::arg("base_width") = 12, py::arg("emb_dim") = 32,
           py::arg("seed") = 0)
      .def_property_readonly("num_classes", &Denoiser::num_classes)
      .def_property_readonly("base_width", &Denoiser::base_width)
      .def("parameter_count", &Denoiser::parameter_count)
      .def("digest", [](const Denoiser& d) { return params_digest(d.parameters()); })
      .def(
          "forward",
          [](const Denoiser& model,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& x, int t,
             std::optional<int> cls) {
            return numpy_from_array(model.forward(array_from_numpy(x), t, condition_from(cls)));
          },
          py::arg("x"), py::arg("t"), py::arg("condition") = std::nullopt);

  py::class_<Classifier>(m, "Classifier")
      .def(py::init([](const std::string& tier, int num_classes, std::uint64_t seed) {
             return Classifier(tier_from_string(tier), num_classes, seed);
           }),
           py::arg("tier"), py::arg("num_classes"), py::arg("seed") = 0)
      .def_property_readonly("tier",
                             [](const Classifier& c) { return tier_to_string(c.tier()); })
      .def_property_readonly("num_classes", &Classifier::num_classes)
      .def("parameter_count", &Classifier::parameter_count)
      .def("digest", [](const Classifier& c) { return params_digest(c.parameters()); })
      .def("forward",
           [](const Classifier& model,
              const py::array_t<double, py::array::c_style | py::array::forcecast>& x) {
             return numpy_from_array(model.forward(array_from_numpy(x)));
           });

  m.def("save_denoiser", &save_denoiser, py::arg("model"), py::arg("path"));
  m.def("load_denoiser", [](const std::string& path) { return load_denoiser(path).model; });
  m.def("save_classifier", &save_classifier, py::arg("model"), py::arg("path"),
        py::arg("final_test_accuracy") = -1.0);
  m.def("load_classifier",
        [](const std::string& path) { return load_classifier(path).model; });

  // ---- training and generation -----------------------------------------------
  m.def(
      "train_denoiser",
      [](Denoiser& model, const RealDataset& train, const NoiseSchedule& schedule, int epochs,
         int batch, double lr, double cond_dropout, std::uint64_t seed) {
        DenoiserTrainConfig tc;
        tc.epochs = epochs;
        tc.batch = batch;
        tc.lr = lr;
        tc.cond_dropout = cond_dropout;
        tc.seed = seed;
        DenoiserTrainResult r = train_denoiser(model, train, schedule, tc);
        py::dict out;
        out["initial_loss"] = r.initial_eval;
        out["final_loss"] = r.final_eval;
        out["epoch_loss"] = r.epoch_loss;
        return out;
      },
      py::arg("model"), py::arg("train"), py::arg("schedule"), py::arg("epochs") = 40,
      py::arg("batch") = 64, py::arg("lr") = 1e-3, py::arg("cond_dropout") = 0.1,
      py::arg("seed") = 11);

  m.def(
      "generate_dataset",
      [](const Denoiser& model, const NoiseSchedule& schedule, double s, int steps,
         int per_class, std::uint64_t seed, int workers, int batch) {
        GenConfig gc;
        gc.s = s;
        gc.t_sample = steps;
        gc.per_class = per_class;
        gc.seed = seed;
        gc.workers = workers;
        gc.batch = batch;
        return generate_dataset(model, schedule, gc);
      },
      py::arg("model"), py::arg("schedule"), py::arg("s") = 2.0, py::arg("steps") = 100,
      py::arg("per_class") = 100, py::arg("seed") = 41, py::arg("workers") = 1,
      py::arg("batch") = 32);

  m.def(
      "train_teacher",
      [](Classifier& model, const RealDataset& train, const RealDataset& test, int epochs,
         double lr, std::uint64_t seed) {
        TeacherTrainResult r = train_teacher(model, train, test, epochs, lr, seed);
        return r.final_accuracy;
      },
      py::arg("model"), py::arg("train"), py::arg("test"), py::arg("epochs") = 24,
      py::arg("lr") = 0.05, py::arg("seed") = 21);

  m.def(
      "train_student",
      [](Classifier& student, const Classifier& teacher, const SyntheticDataset& synthetic,
         const RealDataset& real_test, double tau, double soft_weight, double hard_weight,
         int epochs, int batch, double lr, std::uint64_t seed) {
        DistillConfig dc;
        dc.tau = tau;
        dc.soft_weight = soft_weight;
        dc.hard_weight = hard_weight;
        dc.epochs = epochs;
        dc.batch = batch;
        dc.lr = lr;
        dc.seed = seed;
        StudentTrainResult r = train_student(student, teacher, synthetic, real_test, dc);
        py::dict out;
        out["final_accuracy"] = r.final_accuracy;
        out["best_accuracy"] = r.best_accuracy;
        return out;
      },
      py::arg("student"), py::arg("teacher"), py::arg("synthetic"), py::arg("real_test"),
      py::arg("tau") = 10.0, py::arg("soft_weight") = 1.0, py::arg("hard_weight") = 0.0,
      py::arg("epochs") = 30, py::arg("batch") = 64, py::arg("lr") = 0.05, py::arg("seed") = 51);

  // ---- metrics ---------------------------------------------------------------
  m.def("accuracy",
        py::overload_cast<const Classifier&, const RealDataset&>(&accuracy));
  m.def("accuracy_on_synthetic",
        py::overload_cast<const Classifier&, const SyntheticDataset&>(&accuracy));
  m.def("dist_variance",
        py::overload_cast<const Classifier&, const RealDataset&>(&dist_variance));
  m.def("dist_variance_on_synthetic",
        py::overload_cast<const Classifier&, const SyntheticDataset&>(&dist_variance));
  m.def("teacher_eval_on_synthetic", [](const Classifier& teacher, const SyntheticDataset& ds) {
    const TeacherEval te = teacher_eval_on_synthetic(teacher, ds);
    py::dict out;
    out["accuracy"] = te.accuracy;
    out["mean_confidence"] = te.mean_confidence;
    out["dist_variance"] = te.dist_variance;
    return out;
  });

  m.attr("__version__") = "0.1.0";
}
