// Command-line front end for the multi-view descriptor pipeline: synthetic
// dataset generation, training, descriptor extraction, matching, evaluation,
// descriptor colorization, and render debugging.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mvdesc/mvdesc.hpp"

namespace fs = std::filesystem;
using namespace mvdesc;

namespace {

// Fills in normals (toward the recorded sensor) and splat radii when missing.
PointCloud prepare_cloud(const std::string& path) {
  PointCloud cloud = read_ply(path);
  if (!cloud.has_normals()) {
    cloud = estimate_normals(cloud, 16, cloud.sensor_origin.value_or(Vec3(0, 0, 10)));
  }
  if (!cloud.has_radii()) {
    cloud = compute_radii(cloud, AdaptiveRadius{8, 1.0});
  }
  return cloud;
}

std::string fragment_stem(const std::string& path) {
  return fs::path(path).stem().string();
}

struct ExtractSettings {
  std::string checkpoint;
  std::string cloud_path;
  std::string keypoints_path;
  std::string out;
  std::string fusion = "soft";
  std::string render = "hard";
  double sigma = 1e-4;
  double gamma = 1e-4;
  double crop_radius = 1.0;
  double rho_scale = 1.0;
  int precision = 32;
};

template <class T>
void run_extract_typed(const ExtractSettings& s) {
  auto [model, viewpoints] = load_model<T>(s.checkpoint);
  // distance rescaling for scenes larger than the training scale
  for (auto& rho : viewpoints.rho.data()) {
    rho = static_cast<T>(static_cast<double>(rho) * s.rho_scale);
  }
  const PointCloud cloud = prepare_cloud(s.cloud_path);
  const std::vector<int> keypoints = read_keypoint_list(s.keypoints_path);
  check(!keypoints.empty(), "extract: empty keypoint list");
  for (int k : keypoints) {
    check(static_cast<std::size_t>(k) < cloud.size(),
          "extract: keypoint " + std::to_string(k) + " outside cloud of " +
              std::to_string(cloud.size()) + " points");
  }
  const FusionMode mode = fusion_mode_from_string(s.fusion);
  const RenderMode render =
      s.render == "soft" ? RenderMode::kSoft : RenderMode::kHard;
  SoftRenderConfig cfg;
  cfg.sigma = s.sigma;
  cfg.gamma = s.gamma;

  DescriptorFile out_file;
  out_file.dim = static_cast<std::uint32_t>(model.descriptor_dim);
  out_file.rows.resize(keypoints.size());
  out_file.keypoints.resize(keypoints.size());
  parallel_for(keypoints.size(), [&](std::size_t i) {
    ViewpointSet<T> local_views = viewpoints;  // shares parameter storage
    const Tensor<T> desc =
        describe_keypoint<T>(nullptr, cloud, keypoints[i], local_views, model, mode,
                             cfg, s.crop_radius, render);
    out_file.rows[i].assign(desc.data().begin(), desc.data().end());
    out_file.keypoints[i] = static_cast<std::uint32_t>(keypoints[i]);
  });
  write_descriptor_file(out_file, s.out);
  std::cout << "extracted " << out_file.rows.size() << " descriptors (dim "
            << out_file.dim << ") -> " << s.out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view local descriptors for 3D point clouds"};
  app.require_subcommand(1);

  // ---- gen-synthetic -------------------------------------------------------
  auto* gen = app.add_subcommand("gen-synthetic",
                                 "generate a synthetic desk-scene dataset");
  SyntheticConfig gen_cfg;
  std::uint64_t gen_seed = 0;
  bool gen_ascii = false;
  gen->add_option("--out", gen_cfg.out_dir, "output directory")->required();
  gen->add_option("--pairs", gen_cfg.n_pairs, "number of fragment pairs");
  gen->add_option("--points", gen_cfg.points_per_fragment, "points per fragment");
  gen->add_option("--keypoints", gen_cfg.keypoints_per_fragment,
                  "keypoints per fragment");
  gen->add_option("--noise", gen_cfg.noise_sigma, "position noise sigma (m)");
  gen->add_option("--dropout", gen_cfg.dropout, "random point dropout fraction");
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_flag("--ascii", gen_ascii, "write ASCII PLY instead of binary");

  // ---- train ---------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train descriptors on a dataset");
  std::string train_manifest, train_config, train_out = "model.mvdw",
                               train_loss_csv = "loss.csv";
  train_cmd->add_option("--manifest", train_manifest, "dataset manifest")->required();
  train_cmd->add_option("--config", train_config, "key=value training config file");
  train_cmd->add_option("--out", train_out, "checkpoint output path");
  train_cmd->add_option("--loss-csv", train_loss_csv, "per-batch loss history CSV");

  // ---- extract -------------------------------------------------------------
  auto* extract = app.add_subcommand("extract",
                                     "compute descriptors at given keypoints");
  ExtractSettings ex;
  extract->add_option("--checkpoint", ex.checkpoint, "trained weights")->required();
  extract->add_option("--cloud", ex.cloud_path, "fragment PLY")->required();
  extract->add_option("--keypoints", ex.keypoints_path, "keypoint list")->required();
  extract->add_option("--out", ex.out, "descriptor file output")->required();
  extract->add_option("--fusion", ex.fusion, "view fusion: soft|max|avg")
      ->check(CLI::IsMember({"soft", "max", "avg"}));
  extract->add_option("--render", ex.render, "render mode: hard|soft")
      ->check(CLI::IsMember({"hard", "soft"}));
  extract->add_option("--sigma", ex.sigma, "splat sharpness");
  extract->add_option("--gamma", ex.gamma, "aggregation temperature");
  extract->add_option("--crop-radius", ex.crop_radius, "local crop radius (m)");
  extract->add_option("--rho-scale", ex.rho_scale,
                      "multiply learned viewpoint distances (outdoor scenes)");
  extract->add_option("--precision", ex.precision, "32 or 64")
      ->check(CLI::IsMember({32, 64}));

  // ---- match ---------------------------------------------------------------
  auto* match_cmd = app.add_subcommand("match",
                                       "mutual nearest-neighbor descriptor matches");
  std::string match_a, match_b, match_out = "matches.csv";
  match_cmd->add_option("--descs-a", match_a, "descriptor file A")->required();
  match_cmd->add_option("--descs-b", match_b, "descriptor file B")->required();
  match_cmd->add_option("--out", match_out, "match CSV output");

  // ---- evaluate ------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("evaluate",
                                      "match + metric report over a dataset");
  std::string eval_manifest, eval_desc_dir, eval_out = "report.csv";
  double tau1 = 0.10, tau2 = 0.05;
  eval_cmd->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  eval_cmd->add_option("--desc-dir", eval_desc_dir,
                       "directory of <fragment-stem>.mvdf files")
      ->required();
  eval_cmd->add_option("--tau1", tau1, "correspondence distance threshold (m)");
  eval_cmd->add_option("--tau2", tau2, "inlier-fraction pass threshold");
  eval_cmd->add_option("--out", eval_out, "report CSV output");

  // ---- colorize ------------------------------------------------------------
  auto* color_cmd = app.add_subcommand("colorize",
                                       "PCA-colorized keypoint cloud from descriptors");
  std::string color_descs, color_cloud, color_out = "colored.ply";
  bool color_ascii = false;
  color_cmd->add_option("--descs", color_descs, "descriptor file")->required();
  color_cmd->add_option("--cloud", color_cloud, "fragment PLY")->required();
  color_cmd->add_option("--out", color_out, "colored PLY output");
  color_cmd->add_flag("--ascii", color_ascii, "write ASCII PLY instead of binary");

  // ---- render-debug --------------------------------------------------------
  auto* render_cmd = app.add_subcommand("render-debug",
                                        "dump rendered view patches for one keypoint");
  std::string rd_cloud, rd_out_dir = ".", rd_checkpoint, rd_mode = "hard";
  int rd_keypoint = 0, rd_views = 4;
  double rd_sigma = 1e-4, rd_gamma = 1e-4, rd_crop = 1.0;
  render_cmd->add_option("--cloud", rd_cloud, "fragment PLY")->required();
  render_cmd->add_option("--keypoint", rd_keypoint, "keypoint index")->required();
  render_cmd->add_option("--out-dir", rd_out_dir, "PGM output directory");
  render_cmd->add_option("--checkpoint", rd_checkpoint,
                         "use this checkpoint's viewpoints (default: orbit)");
  render_cmd->add_option("--views", rd_views, "viewpoint count without checkpoint");
  render_cmd->add_option("--render", rd_mode, "render mode: hard|soft")
      ->check(CLI::IsMember({"hard", "soft"}));
  render_cmd->add_option("--sigma", rd_sigma, "splat sharpness");
  render_cmd->add_option("--gamma", rd_gamma, "aggregation temperature");
  render_cmd->add_option("--crop-radius", rd_crop, "local crop radius (m)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      gen_cfg.format = gen_ascii ? PlyFormat::kAscii : PlyFormat::kBinaryLE;
      const DatasetManifest manifest = gen_synthetic(gen_seed, gen_cfg);
      std::cout << "wrote " << manifest.entries.size() << " fragment pairs to "
                << gen_cfg.out_dir << "\n";
    }

    if (train_cmd->parsed()) {
      TrainConfig cfg;
      if (!train_config.empty()) cfg = TrainConfig::from_file(train_config);
      const DatasetManifest manifest = read_manifest(train_manifest);
      check(!manifest.entries.empty(), "train: manifest has no pairs");
      std::vector<FragmentPair> dataset;
      dataset.reserve(manifest.entries.size());
      for (const auto& entry : manifest.entries) dataset.push_back(load_pair(entry));
      std::cout << "training on " << dataset.size() << " pairs, " << cfg.epochs
                << " epochs, precision " << cfg.precision << "\n";
      std::vector<LossRecord> history;
      if (cfg.precision == 64) {
        TrainResult<double> result = train<double>(dataset, cfg);
        history = result.history;
        save_model(train_out, result.model, result.viewpoints);
      } else {
        TrainResult<float> result = train<float>(dataset, cfg);
        history = result.history;
        save_model(train_out, result.model, result.viewpoints);
      }
      write_loss_csv(history, train_loss_csv);
      double first = 0.0, last = 0.0;
      int nf = 0, nl = 0;
      for (const auto& r : history) {
        if (r.epoch == 0) {
          first += r.total;
          ++nf;
        }
        if (r.epoch == history.back().epoch) {
          last += r.total;
          ++nl;
        }
      }
      std::cout << "mean loss: first epoch " << first / nf << ", final epoch "
                << last / nl << "\n";
      std::cout << "checkpoint -> " << train_out << ", history -> "
                << train_loss_csv << "\n";
    }

    if (extract->parsed()) {
      if (ex.precision == 64) {
        run_extract_typed<double>(ex);
      } else {
        run_extract_typed<float>(ex);
      }
    }

    if (match_cmd->parsed()) {
      const DescriptorFile a = read_descriptor_file(match_a);
      const DescriptorFile b = read_descriptor_file(match_b);
      const MatchSet matches =
          mutual_nn_matches(descriptor_rows_as_double(a), descriptor_rows_as_double(b));
      std::ofstream out(match_out);
      check(out.good(), "match: cannot open " + match_out);
      out << "keypoint_a,keypoint_b\n";
      for (const auto& [ia, ib] : matches.pairs) {
        out << a.keypoints[static_cast<std::size_t>(ia)] << ','
            << b.keypoints[static_cast<std::size_t>(ib)] << '\n';
      }
      check(out.good(), "match: write failed for " + match_out);
      std::cout << matches.pairs.size() << " mutual matches -> " << match_out << "\n";
    }

    if (eval_cmd->parsed()) {
      const DatasetManifest manifest = read_manifest(eval_manifest);
      check(!manifest.entries.empty(), "evaluate: manifest has no pairs");
      std::vector<PairReport> reports;
      for (const auto& entry : manifest.entries) {
        const std::string stem_a = fragment_stem(entry.fragment_a);
        const std::string stem_b = fragment_stem(entry.fragment_b);
        const DescriptorFile da = read_descriptor_file(
            (fs::path(eval_desc_dir) / (stem_a + ".mvdf")).string());
        const DescriptorFile db = read_descriptor_file(
            (fs::path(eval_desc_dir) / (stem_b + ".mvdf")).string());
        const PointCloud cloud_a = read_ply(entry.fragment_a);
        const PointCloud cloud_b = read_ply(entry.fragment_b);
        std::vector<Vec3> kp_a, kp_b;
        for (std::uint32_t k : da.keypoints) {
          check(k < cloud_a.size(), "evaluate: keypoint outside fragment " + stem_a);
          kp_a.push_back(cloud_a.points[k]);
        }
        for (std::uint32_t k : db.keypoints) {
          check(k < cloud_b.size(), "evaluate: keypoint outside fragment " + stem_b);
          kp_b.push_back(cloud_b.points[k]);
        }
        const MatchSet matches = mutual_nn_matches(descriptor_rows_as_double(da),
                                                   descriptor_rows_as_double(db));
        PairReport report;
        report.pair_id = stem_a + "-" + stem_b;
        report.n_matches = static_cast<int>(matches.pairs.size());
        report.n_correct =
            count_correct(matches, kp_a, kp_b, entry.transform_gt, tau1);
        report.inlier_frac =
            inlier_fraction(matches, kp_a, kp_b, entry.transform_gt, tau1);
        reports.push_back(std::move(report));
      }
      write_evaluation_csv(reports, tau2, eval_out);
      double mean_correct = 0.0;
      for (const auto& r : reports) mean_correct += r.n_correct;
      mean_correct /= static_cast<double>(reports.size());
      std::cout << "recall=" << recall(reports, tau2)
                << " mean_correct=" << mean_correct << " (tau1=" << tau1
                << ", tau2=" << tau2 << ") -> " << eval_out << "\n";
    }

    if (color_cmd->parsed()) {
      const DescriptorFile descs = read_descriptor_file(color_descs);
      check(descs.rows.size() >= 2, "colorize: need at least 2 descriptors");
      const PointCloud cloud = read_ply(color_cloud);
      PointCloud keypoint_cloud;
      for (std::uint32_t k : descs.keypoints) {
        check(k < cloud.size(), "colorize: keypoint outside cloud");
        keypoint_cloud.points.push_back(cloud.points[k]);
        if (cloud.has_normals()) {
          keypoint_cloud.normals.push_back(cloud.normals[k]);
        }
      }
      const auto colors = pca_colorize(descriptor_rows_as_double(descs));
      write_ply(keypoint_cloud, color_out,
                color_ascii ? PlyFormat::kAscii : PlyFormat::kBinaryLE, colors);
      std::cout << "colorized " << keypoint_cloud.size() << " keypoints -> "
                << color_out << "\n";
    }

    if (render_cmd->parsed()) {
      const PointCloud cloud = prepare_cloud(rd_cloud);
      SoftRenderConfig cfg;
      cfg.sigma = rd_sigma;
      cfg.gamma = rd_gamma;
      std::vector<ViewPatch> patches;
      const RenderMode mode =
          rd_mode == "soft" ? RenderMode::kSoft : RenderMode::kHard;
      if (!rd_checkpoint.empty()) {
        auto [model, viewpoints] = load_model<float>(rd_checkpoint);
        patches = render_keypoint(cloud, rd_keypoint, viewpoints, cfg, rd_crop, mode);
      } else {
        const auto viewpoints = ViewpointSet<float>::orbited_init(rd_views);
        patches = render_keypoint(cloud, rd_keypoint, viewpoints, cfg, rd_crop, mode);
      }
      fs::create_directories(rd_out_dir);
      for (const auto& patch : patches) {
        char name[64];
        std::snprintf(name, sizeof(name), "kp%05d_view%02d_rot%d.pgm", rd_keypoint,
                      patch.view_index, patch.rotation_index);
        write_pgm((fs::path(rd_out_dir) / name).string(), patch);
      }
      std::cout << "wrote " << patches.size() << " patches to " << rd_out_dir << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
