#include "privlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "privlab/binary_io.hpp"
#include "privlab/error.hpp"
#include "privlab/random.hpp"

namespace privlab {

std::size_t Dataset::classes() const {
  if (labels.empty()) return 0;
  return static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.name = name;
  const std::size_t dim = input_dim();
  out.samples = Tensor::matrix(indices.size(), dim);
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= size()) throw ValidationError("subset index out of range");
    std::copy_n(samples.values().begin() + static_cast<std::ptrdiff_t>(i * dim), dim,
                out.samples.values().begin() + static_cast<std::ptrdiff_t>(r * dim));
    out.labels.push_back(labels[i]);
  }
  return out;
}

void Dataset::validate() const {
  if (samples.rows() != labels.size()) {
    throw ValidationError("dataset has " + std::to_string(samples.rows()) + " samples but " +
                          std::to_string(labels.size()) + " labels");
  }
  for (double v : samples.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("pixel value outside [0, 1]");
  }
}

void Partition::validate(std::size_t dataset_size) const {
  std::vector<char> seen(dataset_size, 0);
  for (std::size_t c = 0; c < assignments.size(); ++c) {
    if (assignments[c].empty()) throw ValidationError("client " + std::to_string(c) + " is empty");
    for (std::size_t i : assignments[c]) {
      if (i >= dataset_size) throw ValidationError("partition index out of range");
      if (seen[i]) throw ValidationError("partition assigns sample " + std::to_string(i) + " twice");
      seen[i] = 1;
    }
  }
}

Dataset read_idx(std::istream& images, std::istream& labels) {
  io::Reader ri(images);
  const auto magic = ri.be<std::uint32_t>("image magic");
  if (magic != 0x00000803u) throw FormatError("images file has bad IDX magic", 0);
  const auto n = ri.be<std::uint32_t>("image count");
  const auto rows = ri.be<std::uint32_t>("image rows");
  const auto cols = ri.be<std::uint32_t>("image cols");

  io::Reader rl(labels);
  const auto lmagic = rl.be<std::uint32_t>("label magic");
  if (lmagic != 0x00000801u) throw FormatError("labels file has bad IDX magic", 0);
  const auto ln = rl.be<std::uint32_t>("label count");
  if (ln != n) throw FormatError("label count differs from image count", 4);

  const std::size_t dim = std::size_t{rows} * cols;
  Dataset ds;
  ds.name = "idx";
  ds.samples = Tensor::matrix(n, dim);
  std::vector<unsigned char> buf(dim);
  for (std::size_t i = 0; i < n; ++i) {
    ri.raw(buf.data(), dim, "pixels");
    for (std::size_t j = 0; j < dim; ++j) ds.samples.at(i, j) = buf[j] / 255.0;
  }
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char y;
    rl.raw(&y, 1, "labels");
    ds.labels[i] = y;
  }
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw Error("cannot open " + images_path);
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw Error("cannot open " + labels_path);
  Dataset ds = read_idx(images, labels);
  ds.name = images_path;
  return ds;
}

void write_idx(const Dataset& ds, std::size_t image_rows, std::size_t image_cols,
               std::ostream& images, std::ostream& labels) {
  if (image_rows * image_cols != ds.input_dim()) {
    throw DimensionError("image geometry does not match the dataset input dimension");
  }
  io::write_be<std::uint32_t>(images, 0x00000803u);
  io::write_be<std::uint32_t>(images, static_cast<std::uint32_t>(ds.size()));
  io::write_be<std::uint32_t>(images, static_cast<std::uint32_t>(image_rows));
  io::write_be<std::uint32_t>(images, static_cast<std::uint32_t>(image_cols));
  for (double v : ds.samples.values()) {
    const double clamped = std::clamp(v, 0.0, 1.0);
    images.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  io::write_be<std::uint32_t>(labels, 0x00000801u);
  io::write_be<std::uint32_t>(labels, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) {
    if (y < 0 || y > 255) throw ValidationError("IDX labels must fit in one byte");
    labels.put(static_cast<char>(static_cast<unsigned char>(y)));
  }
}

Dataset read_csv_dataset(std::istream& in, const std::string& name) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw FormatError("empty CSV dataset", 0);
  if (line.rfind("label", 0) != 0) throw FormatError("CSV header must start with 'label'", line_no);
  const auto dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<double> values;
  Dataset ds;
  ds.name = name;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(row, cell, ',')) {
      try {
        std::size_t used = 0;
        if (col == 0) {
          ds.labels.push_back(std::stoi(cell, &used));
        } else {
          values.push_back(std::stod(cell, &used));
        }
        if (used != cell.size() && cell.find_first_not_of(" \r", used) != std::string::npos) {
          throw FormatError("trailing characters in CSV cell", line_no);
        }
      } catch (const std::logic_error&) {
        throw FormatError("malformed CSV cell '" + cell + "'", line_no);
      }
      ++col;
    }
    if (col != dim + 1) throw FormatError("CSV row has the wrong number of columns", line_no);
  }
  ds.samples = Tensor({ds.labels.size(), dim}, std::move(values));
  return ds;
}

void write_csv_dataset(std::ostream& out, const Dataset& ds) {
  out << "label";
  for (std::size_t j = 0; j < ds.input_dim(); ++j) out << ",p" << j;
  out << "\n";
  std::ostringstream cell;
  cell.precision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (std::size_t j = 0; j < ds.input_dim(); ++j) {
      cell.str("");
      cell << ds.samples.at(i, j);
      out << "," << cell.str();
    }
    out << "\n";
  }
}

namespace {

// A stroke template: a few thick line segments, lightly blurred.
std::vector<double> make_template(Rng& rng, std::size_t side) {
  std::vector<double> img(side * side, 0.0);
  std::uniform_real_distribution<double> coord(0.0, static_cast<double>(side - 1));
  std::uniform_int_distribution<int> strokes(2, 3);
  const int n = strokes(rng);
  for (int s = 0; s < n; ++s) {
    const double x0 = coord(rng), y0 = coord(rng), x1 = coord(rng), y1 = coord(rng);
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        // distance from pixel centre to the segment
        const double px = static_cast<double>(c), py = static_cast<double>(r);
        const double dx = x1 - x0, dy = y1 - y0;
        const double len2 = dx * dx + dy * dy;
        double t = len2 > 0 ? ((px - x0) * dx + (py - y0) * dy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double ex = x0 + t * dx - px, ey = y0 + t * dy - py;
        const double dist = std::sqrt(ex * ex + ey * ey);
        const double ink = std::exp(-dist * dist / 1.2);
        img[r * side + c] = std::max(img[r * side + c], ink);
      }
    }
  }
  return img;
}

}  // namespace

Dataset synth_digits(std::uint64_t seed, std::size_t per_class, std::size_t side,
                     std::size_t classes) {
  if (side < 4) throw ValidationError("synth_digits needs side >= 4");
  if (classes < 2) throw ValidationError("synth_digits needs at least 2 classes");
  const std::size_t dim = side * side;
  std::vector<std::vector<double>> templates;
  for (std::size_t k = 0; k < classes; ++k) {
    Rng trng(derive_seed(seed, {0x7e3, k}));
    templates.push_back(make_template(trng, side));
  }
  Dataset ds;
  ds.name = "synth-digits";
  ds.samples = Tensor::matrix(per_class * classes, dim);
  ds.labels.resize(per_class * classes);
  Rng rng(derive_seed(seed, {0x5a3}));
  std::normal_distribution<double> noise(0.0, 0.12);
  std::uniform_real_distribution<double> gain(0.75, 1.0);
  std::uniform_real_distribution<double> offset(0.0, 0.15);
  // Interleave classes so any prefix is roughly balanced.
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t k = 0; k < classes; ++k) {
      const std::size_t row = i * classes + k;
      const double g = gain(rng), o = offset(rng);
      for (std::size_t j = 0; j < dim; ++j) {
        ds.samples.at(row, j) = std::clamp(o + g * templates[k][j] + noise(rng), 0.0, 1.0);
      }
      ds.labels[row] = static_cast<int>(k);
    }
  }
  return ds;
}

Partition partition_dirichlet(const Dataset& ds, std::size_t clients, double concentration,
                              std::uint64_t seed) {
  if (clients == 0) throw ValidationError("partition needs at least one client");
  if (!(concentration > 0.0)) throw ValidationError("Dirichlet concentration must be positive");
  if (clients > ds.size()) {
    throw ValidationError("infeasible partition: " + std::to_string(clients) + " clients for " +
                          std::to_string(ds.size()) + " samples");
  }
  Partition part;
  part.concentration = concentration;
  part.assignments.resize(clients);
  Rng rng(derive_seed(seed, {0xd1c}));
  std::gamma_distribution<double> gamma(concentration, 1.0);

  const std::size_t classes = ds.classes();
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.labels[i] == static_cast<int>(k)) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<double> q(clients);
    double total = 0.0;
    for (auto& v : q) total += (v = gamma(rng));
    if (total <= 0.0) {
      // Every draw underflowed; fall back to one client per class.
      std::fill(q.begin(), q.end(), 0.0);
      q[k % clients] = 1.0;
      total = 1.0;
    }
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t c = 0; c < clients; ++c) {
      cum += q[c] / total;
      const std::size_t end = c + 1 == clients
                                  ? idx.size()
                                  : std::min(idx.size(), static_cast<std::size_t>(std::floor(
                                                             cum * static_cast<double>(idx.size()))));
      for (std::size_t i = start; i < std::max(start, end); ++i) part.assignments[c].push_back(idx[i]);
      start = std::max(start, end);
    }
  }
  // Every client must hold at least one sample: move one from the largest shard.
  for (auto& shard : part.assignments) {
    if (!shard.empty()) continue;
    auto largest = std::max_element(part.assignments.begin(), part.assignments.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    shard.push_back(largest->back());
    largest->pop_back();
  }
  for (auto& shard : part.assignments) std::sort(shard.begin(), shard.end());
  part.validate(ds.size());
  return part;
}

}  // namespace privlab
