#include "multiad/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "multiad/image_io.hpp"

namespace multiad {

namespace fs = std::filesystem;

const char* defect_name(DefectKind kind) {
  switch (kind) {
    case DefectKind::kBlob:
      return "blob";
    case DefectKind::kScratch:
      return "scratch";
    case DefectKind::kPatchSwap:
      return "patch_swap";
  }
  return "unknown";
}

namespace {

struct Grating {
  double kx, ky;  // radians per pixel
  double amplitude;
};

struct TextureFamily {
  std::vector<Grating> gratings;
  double value_noise = 0.06;
  double pixel_noise = 0.01;
};

TextureFamily make_family(Rng& rng, Index extent) {
  TextureFamily f;
  const auto count = static_cast<std::size_t>(3 + rng.below(4));
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double cycles = rng.uniform(2.0, 8.0);
    const double angle = rng.uniform(0.0, M_PI);
    const double k = 2.0 * M_PI * cycles / static_cast<double>(extent);
    const double a = rng.uniform(0.5, 1.0);
    f.gratings.push_back({k * std::cos(angle), k * std::sin(angle), a});
    total += a;
  }
  for (Grating& g : f.gratings) g.amplitude *= 0.32 / total;
  return f;
}

// Bilinearly interpolated random lattice with `cells` cells per side.
MatrixX<double> value_noise(Rng& rng, Index extent, Index cells) {
  MatrixX<double> lattice(cells + 1, cells + 1);
  for (Index i = 0; i < lattice.size(); ++i) lattice.data()[i] = rng.uniform(-1.0, 1.0);
  MatrixX<double> out(extent, extent);
  const double step = static_cast<double>(cells) / static_cast<double>(extent);
  for (Index y = 0; y < extent; ++y) {
    for (Index x = 0; x < extent; ++x) {
      const double fy = (static_cast<double>(y) + 0.5) * step, fx = (static_cast<double>(x) + 0.5) * step;
      const Index y0 = std::min<Index>(static_cast<Index>(fy), cells - 1);
      const Index x0 = std::min<Index>(static_cast<Index>(fx), cells - 1);
      const double ty = fy - static_cast<double>(y0), tx = fx - static_cast<double>(x0);
      out(y, x) = (1 - ty) * ((1 - tx) * lattice(y0, x0) + tx * lattice(y0, x0 + 1)) +
                  ty * ((1 - tx) * lattice(y0 + 1, x0) + tx * lattice(y0 + 1, x0 + 1));
    }
  }
  return out;
}

MatrixX<double> render_texture(const TextureFamily& family, Rng& rng, Index extent) {
  std::vector<double> phases;
  for (std::size_t i = 0; i < family.gratings.size(); ++i) phases.push_back(rng.uniform(0.0, 2.0 * M_PI));
  const MatrixX<double> noise = value_noise(rng, extent, 8);
  MatrixX<double> img(extent, extent);
  for (Index y = 0; y < extent; ++y) {
    for (Index x = 0; x < extent; ++x) {
      double v = 0.5;
      for (std::size_t i = 0; i < family.gratings.size(); ++i) {
        const Grating& g = family.gratings[i];
        v += g.amplitude * std::sin(g.kx * static_cast<double>(x) + g.ky * static_cast<double>(y) + phases[i]);
      }
      v += family.value_noise * noise(y, x) + family.pixel_noise * rng.normal();
      img(y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

void add_blob(MatrixX<double>& img, Map2<std::uint8_t>& mask, Rng& rng, double scale) {
  const Index n = img.rows();
  const double a = rng.uniform(3.0, 8.0) * scale, b = rng.uniform(3.0, 8.0) * scale;
  const double r = std::max(a, b) + 1.0;
  const double cy = rng.uniform(r, static_cast<double>(n) - r), cx = rng.uniform(r, static_cast<double>(n) - r);
  const double theta = rng.uniform(0.0, M_PI);
  const double delta = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.25, 0.4);
  const double c = std::cos(theta), s = std::sin(theta);
  for (Index y = 0; y < n; ++y) {
    for (Index x = 0; x < n; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
      if (u * u + v * v <= 1.0) {
        img(y, x) = std::clamp(img(y, x) + delta, 0.0, 1.0);
        mask(y, x) = 1;
      }
    }
  }
}

void add_scratch(MatrixX<double>& img, Map2<std::uint8_t>& mask, Rng& rng, double scale) {
  const Index n = img.rows();
  const double len = rng.uniform(14.0, 30.0) * scale;
  const double half_width = rng.uniform(0.5, 1.0) * scale;
  const double theta = rng.uniform(0.0, M_PI);
  const double hx = 0.5 * len * std::cos(theta), hy = 0.5 * len * std::sin(theta);
  const double margin = 0.5 * len + 2.0;
  const double cx = rng.uniform(margin, static_cast<double>(n) - margin);
  const double cy = rng.uniform(margin, static_cast<double>(n) - margin);
  const double x0 = cx - hx, y0 = cy - hy, ex = 2.0 * hx, ey = 2.0 * hy;
  const double target = rng.below(2) ? 0.95 : 0.05;
  for (Index y = 0; y < n; ++y) {
    for (Index x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5 - x0, py = static_cast<double>(y) + 0.5 - y0;
      const double t = std::clamp((px * ex + py * ey) / (ex * ex + ey * ey), 0.0, 1.0);
      const double dist = std::hypot(px - t * ex, py - t * ey);
      const double coverage = std::clamp(half_width + 0.5 - dist, 0.0, 1.0);
      if (coverage > 0.0) {
        img(y, x) = (1.0 - coverage) * img(y, x) + coverage * target;
        mask(y, x) = 1;
      }
    }
  }
}

void add_patch_swap(MatrixX<double>& img, Map2<std::uint8_t>& mask, Rng& rng, double scale) {
  const Index n = img.rows();
  const auto ph = static_cast<Index>(std::lround(rng.uniform(8.0, 16.0) * scale));
  const auto pw = static_cast<Index>(std::lround(rng.uniform(8.0, 16.0) * scale));
  const auto y0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - ph + 1)));
  const auto x0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - pw + 1)));
  const TextureFamily foreign = make_family(rng, n);
  const MatrixX<double> other = render_texture(foreign, rng, n);
  img.block(y0, x0, ph, pw) = other.block(y0, x0, ph, pw);
  mask.block(y0, x0, ph, pw).setOnes();
}

LabeledSample to_sample(const MatrixX<double>& img, Map2<std::uint8_t> mask, std::string category, bool anomalous) {
  const Index n = img.rows();
  LabeledSample s;
  s.category = std::move(category);
  s.anomalous = anomalous;
  s.image = Tensor<float>({1, n, n});
  // Quantize like an 8-bit file so in-memory and on-disk datasets agree.
  for (Index i = 0; i < img.size(); ++i) s.image[i] = static_cast<float>(std::lround(img.data()[i] * 255.0)) / 255.0f;
  s.mask = std::move(mask);
  return s;
}

std::string stem_for(std::size_t i) {
  std::string s = std::to_string(i);
  return s.size() < 3 ? std::string(3 - s.size(), '0') + s : s;
}

}  // namespace

DatasetSplits generate_synthetic_dataset(const SyntheticOptions& options) {
  if (options.n_normal < 2) throw ValueError("generate_synthetic_dataset: n_normal must be at least 2");
  if (options.n_anomalous < 0) throw ValueError("generate_synthetic_dataset: n_anomalous must be non-negative");
  if (options.extent < 16 || options.extent % 4 != 0) {
    throw ValueError("generate_synthetic_dataset: extent must be a multiple of 4 and at least 16");
  }
  const Index n_eval_normal = options.n_eval_normal >= 0 ? options.n_eval_normal
                                                         : std::max<Index>(1, options.n_normal / 4);
  const Index e = options.extent;
  const double scale = static_cast<double>(e) / 64.0;
  Rng family_rng(derive_seed(options.seed, 0));
  const TextureFamily family = make_family(family_rng, e);

  DatasetSplits out;
  for (Index i = 0; i < options.n_normal; ++i) {
    Rng rng(derive_seed(options.seed, 1000 + static_cast<std::uint64_t>(i)));
    out.train.push_back(to_sample(render_texture(family, rng, e), Map2<std::uint8_t>::Zero(e, e), "good", false));
    out.train.back().name = stem_for(static_cast<std::size_t>(i));
  }
  for (Index i = 0; i < n_eval_normal; ++i) {
    Rng rng(derive_seed(options.seed, 2'000'000 + static_cast<std::uint64_t>(i)));
    out.eval.push_back(to_sample(render_texture(family, rng, e), Map2<std::uint8_t>::Zero(e, e), "good", false));
    out.eval.back().name = stem_for(static_cast<std::size_t>(i));
  }
  std::array<std::size_t, 3> per_kind{};
  const Index max_positive = e * e / 4;
  for (Index i = 0; i < options.n_anomalous; ++i) {
    Rng rng(derive_seed(options.seed, 4'000'000 + static_cast<std::uint64_t>(i)));
    const auto kind = static_cast<DefectKind>(rng.below(3));
    MatrixX<double> img;
    Map2<std::uint8_t> mask;
    Index positives = 0;
    do {
      img = render_texture(family, rng, e);
      mask = Map2<std::uint8_t>::Zero(e, e);
      switch (kind) {
        case DefectKind::kBlob:
          add_blob(img, mask, rng, scale);
          break;
        case DefectKind::kScratch:
          add_scratch(img, mask, rng, scale);
          break;
        case DefectKind::kPatchSwap:
          add_patch_swap(img, mask, rng, scale);
          break;
      }
      positives = mask.cast<Index>().sum();
    } while (positives < 1 || positives >= max_positive);
    out.eval.push_back(to_sample(img, std::move(mask), defect_name(kind), true));
    out.eval.back().name = stem_for(per_kind[static_cast<std::size_t>(kind)]++);
  }
  std::stable_sort(out.eval.begin(), out.eval.end(), [](const LabeledSample& a, const LabeledSample& b) {
    return a.category != b.category ? a.category < b.category : a.name < b.name;
  });
  return out;
}

namespace {

Image mask_image(const Map2<std::uint8_t>& mask) {
  Image img{mask.cols(), mask.rows(), 1, {}};
  img.pixels.resize(static_cast<std::size_t>(mask.size()));
  for (Index i = 0; i < mask.size(); ++i) img.pixels[static_cast<std::size_t>(i)] = mask.data()[i] ? 255 : 0;
  return img;
}

void write_sample(const LabeledSample& s, const fs::path& dir) {
  fs::create_directories(dir);
  write_pnm(dir / (s.name + (s.image.dim(0) == 3 ? ".ppm" : ".pgm")), tensor_to_image(s.image));
}

}  // namespace

void write_dataset_dir(const DatasetSplits& splits, const fs::path& root) {
  for (const LabeledSample& s : splits.train) write_sample(s, root / "train" / "good");
  for (const LabeledSample& s : splits.eval) {
    write_sample(s, root / "test" / s.category);
    if (s.anomalous) {
      fs::create_directories(root / "ground_truth" / s.category);
      write_pnm(root / "ground_truth" / s.category / (s.name + "_mask.pgm"), mask_image(s.mask));
    }
  }
}

namespace {

bool is_image_file(const fs::path& p) {
  const std::string ext = p.extension().string();
  return fs::is_regular_file(p) && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm");
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : is_image_file(entry.path())) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Tensor<float> convert_channels(const Tensor<float>& chw, Index channels, const fs::path& file) {
  const Index c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (c == channels) return chw;
  Tensor<float> out({channels, h, w});
  if (c == 1 && channels == 3) {
    for (Index k = 0; k < 3; ++k) out.data().segment(k * h * w, h * w) = chw.data();
  } else if (c == 3 && channels == 1) {
    out.data() = 0.299f * chw.data().segment(0, h * w) + 0.587f * chw.data().segment(h * w, h * w) +
                 0.114f * chw.data().segment(2 * h * w, h * w);
  } else {
    throw FormatError(file.string() + ": cannot convert " + std::to_string(c) + " channels to " +
                      std::to_string(channels));
  }
  return out;
}

Tensor<float> resized(Tensor<float> chw, Index extent) {
  if (chw.dim(1) == extent && chw.dim(2) == extent) return chw;
  const Index c = chw.dim(0);
  Tensor<float> batch = chw.reshaped({1, c, chw.dim(1), chw.dim(2)});
  return resize_bilinear(batch, extent, extent).reshaped({c, extent, extent});
}

LabeledSample load_sample(const fs::path& file, const std::string& category, Index extent, Index channels,
                          Index& raw_h, Index& raw_w) {
  const Image img = read_pnm(file);
  raw_h = img.height;
  raw_w = img.width;
  LabeledSample s;
  s.name = file.stem().string();
  s.category = category;
  s.anomalous = category != "good";
  s.image = resized(convert_channels(image_to_tensor(img), channels, file), extent);
  s.mask = Map2<std::uint8_t>::Zero(extent, extent);
  return s;
}

fs::path find_mask(const fs::path& root, const std::string& category, const std::string& stem) {
  for (const char* ext : {".pgm", ".pnm", ".ppm"}) {
    fs::path p = root / "ground_truth" / category / (stem + "_mask" + ext);
    if (fs::is_regular_file(p)) return p;
  }
  throw IoError((root / "ground_truth" / category / (stem + "_mask.pgm")).string() + ": mask not found");
}

}  // namespace

DatasetSplits load_dataset_dir(const fs::path& root, Index extent, Index channels) {
  if (!fs::is_directory(root)) throw IoError(root.string() + ": dataset directory not found");
  if (!fs::is_directory(root / "train" / "good") && !fs::is_directory(root / "test")) {
    throw IoError(root.string() + ": neither train/good nor test split directory exists");
  }
  if (channels != 1 && channels != 3) throw ValueError("load_dataset_dir: channels must be 1 or 3");
  DatasetSplits out;
  Index raw_h = 0, raw_w = 0;
  for (const fs::path& f : sorted_entries(root / "train" / "good", false)) {
    out.train.push_back(load_sample(f, "good", extent, channels, raw_h, raw_w));
  }
  for (const fs::path& dir : sorted_entries(root / "test", true)) {
    const std::string category = dir.filename().string();
    for (const fs::path& f : sorted_entries(dir, false)) {
      LabeledSample s = load_sample(f, category, extent, channels, raw_h, raw_w);
      if (s.anomalous) {
        const fs::path mask_file = find_mask(root, category, s.name);
        const Image mask = read_pnm(mask_file);
        if (mask.height != raw_h || mask.width != raw_w) {
          throw FormatError(mask_file.string() + ": mask is " + std::to_string(mask.width) + "x" +
                            std::to_string(mask.height) + " but its image is " + std::to_string(raw_w) + "x" +
                            std::to_string(raw_h));
        }
        const Tensor<float> m = resized(convert_channels(image_to_tensor(mask), 1, mask_file), extent);
        for (Index i = 0; i < m.size(); ++i) s.mask.data()[i] = m[i] >= 0.5f ? 1 : 0;
        if (s.mask.cast<Index>().sum() == 0) throw FormatError(mask_file.string() + ": mask has no positive pixel");
      }
      out.eval.push_back(std::move(s));
    }
  }
  return out;
}

Tensor<float> stack_images(std::span<const LabeledSample* const> samples) {
  if (samples.empty()) throw ValueError("stack_images: empty batch");
  const Shape& s = samples[0]->image.shape();
  const Index per = samples[0]->image.size();
  Tensor<float> out({static_cast<Index>(samples.size()), s[0], s[1], s[2]});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->image.shape() != s) throw ShapeError("stack_images: images differ in shape");
    out.data().segment(static_cast<Index>(i) * per, per) = samples[i]->image.data();
  }
  return out;
}

}  // namespace multiad
