#include "gvq/sources.hpp"

#include <cmath>
#include <cstring>

#include "gvq/rng.hpp"

namespace gvq {

// ---------------------------------------------------------------------------
// SyntheticSource

namespace {

MatXd seeded_gaussian(Index rows, Index cols, Rng& rng) {
  MatXd m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = rng.normal();
  return m;
}

constexpr std::uint64_t kTagBasis = 0xb1;
constexpr std::uint64_t kTagLatent = 0x2a;
constexpr std::uint64_t kTagNoise = 0x7e;
constexpr std::uint64_t kTagFiller = 0xf1;

}  // namespace

SyntheticSource::SyntheticSource(SyntheticSpec spec) : spec_(std::move(spec)) {
  if (spec_.nodes < 1) throw ConfigError("SyntheticSource: nodes must be >= 1");
  if (spec_.latent_rank < 1)
    throw ConfigError("SyntheticSource: latent rank must be >= 1");
  if (spec_.noise_sigma < 0)
    throw ConfigError("SyntheticSource: noise sigma must be >= 0");
  slices_ = make_slices(spec_.layout, spec_.slice_len);
  models_.resize(slices_.size());
  for (std::size_t i = 0; i < slices_.size(); ++i) {
    const SliceSpec& s = slices_[i];
    if (!s.compressible) continue;
    const Index k = s.length;
    const Index r = std::min(spec_.latent_rank, k);
    Rng rng(mix_seed(spec_.seed, kTagBasis, s.id));
    SliceModel& m = models_[i];
    // Orthonormal basis from a QR factorization of a Gaussian draw.
    Eigen::HouseholderQR<MatXd> qr(seeded_gaussian(k, r, rng));
    m.basis = qr.householderQ() * MatXd::Identity(k, r);
    m.offset = seeded_gaussian(k, 1, rng);
    if (r < k) {
      // Rotation plane: first basis direction into a direction orthogonal
      // to the span, so drift actually moves the subspace.
      m.rot_from = m.basis.col(0);
      VecXd v = seeded_gaussian(k, 1, rng);
      v -= m.basis * (m.basis.transpose() * v);
      const double norm = v.norm();
      if (norm > 1e-12) {
        m.rot_to = v / norm;
        m.can_drift = true;
      }
    }
  }
}

VecXd SyntheticSource::next(long t, int node) const {
  if (node < 0 || node >= spec_.nodes)
    throw Error("SyntheticSource: node out of range");
  VecXd out(spec_.layout.total);
  const double inv_n = 1.0 / static_cast<double>(spec_.nodes);
  for (std::size_t i = 0; i < slices_.size(); ++i) {
    const SliceSpec& s = slices_[i];
    if (!s.compressible) {
      Rng rng(mix_seed(spec_.seed, kTagFiller, s.id, static_cast<std::uint64_t>(t),
                       static_cast<std::uint64_t>(node)));
      for (Index j = 0; j < s.length; ++j)
        out[s.start + j] = inv_n * rng.normal();
      continue;
    }
    const SliceModel& m = models_[i];
    const Index r = m.basis.cols();
    Rng zrng(mix_seed(spec_.seed, kTagLatent, s.id, static_cast<std::uint64_t>(t),
                      static_cast<std::uint64_t>(node)));
    VecXd z(r);
    for (Index j = 0; j < r; ++j) z[j] = zrng.normal();

    VecXd signal = m.basis * z;
    if (m.can_drift && spec_.drift_rate != 0.0) {
      // Only the first basis column rotates; equivalent to applying the
      // plane rotation to the whole basis since rot_to is orthogonal to it.
      const double theta = spec_.drift_rate * static_cast<double>(t);
      const VecXd rotated_col =
          m.rot_from * std::cos(theta) + m.rot_to * std::sin(theta);
      signal += (rotated_col - m.rot_from) * z[0];
    }
    VecXd slice_values = (signal + m.offset) * inv_n;
    if (spec_.noise_sigma > 0) {
      Rng nrng(mix_seed(spec_.seed, kTagNoise, s.id,
                        static_cast<std::uint64_t>(t),
                        static_cast<std::uint64_t>(node)));
      for (Index j = 0; j < s.length; ++j)
        slice_values[j] += spec_.noise_sigma * nrng.normal();
    }
    out.segment(s.start, s.length) = slice_values;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dump writer / reader

namespace {
constexpr char kDumpMagic[4] = {'G', 'V', 'Q', '1'};

std::uint64_t dump_header_bytes(const DumpHeader& h) {
  return 4 + 4 + 4 + 16ull * h.layers.size() + 4 + 4;
}
}  // namespace

DumpWriter::DumpWriter(const std::string& path, const DumpHeader& header)
    : out_(path, std::ios::binary), header_(header), path_(path) {
  if (!out_) throw IoError("DumpWriter: cannot open " + path);
  if (header.layers.empty()) throw IoError("DumpWriter: no layers");
  out_.write(kDumpMagic, 4);
  auto put32 = [&](std::uint32_t v) {
    out_.write(reinterpret_cast<const char*>(&v), 4);
  };
  put32(header.version);
  put32(static_cast<std::uint32_t>(header.layers.size()));
  for (const auto& l : header.layers) {
    put32(static_cast<std::uint32_t>(l.height));
    put32(static_cast<std::uint32_t>(l.width));
    put32(static_cast<std::uint32_t>(l.depth));
    put32(static_cast<std::uint32_t>(l.filters));
  }
  put32(header.nodes);
  put32(header.iterations);
  if (!out_) throw IoError("DumpWriter: header write failed");
}

DumpWriter::~DumpWriter() {
  try {
    close();
  } catch (...) {
  }
}

void DumpWriter::append(const VecXd& flat_gradient) {
  const Index m = header_.elements_per_gradient();
  if (flat_gradient.size() != m)
    throw IoError("DumpWriter: gradient has " +
                  std::to_string(flat_gradient.size()) + " values, expected " +
                  std::to_string(m));
  const std::uint64_t expected =
      static_cast<std::uint64_t>(header_.nodes) * header_.iterations;
  if (written_ >= expected) throw IoError("DumpWriter: dump already complete");
  std::vector<float> row(m);
  for (Index i = 0; i < m; ++i) row[i] = static_cast<float>(flat_gradient[i]);
  out_.write(reinterpret_cast<const char*>(row.data()), 4 * m);
  if (!out_) throw IoError("DumpWriter: write failed");
  ++written_;
}

void DumpWriter::close() {
  if (!out_.is_open()) return;
  out_.close();
}

DumpReader::DumpReader(const std::string& path)
    : in_(path, std::ios::binary), path_(path) {
  if (!in_) throw IoError("DumpReader: cannot open " + path);
  char magic[4];
  in_.read(magic, 4);
  if (!in_ || std::memcmp(magic, kDumpMagic, 4) != 0)
    throw IoError("DumpReader: bad magic in " + path);
  auto get32 = [&]() {
    std::uint32_t v = 0;
    in_.read(reinterpret_cast<char*>(&v), 4);
    if (!in_)
      throw IoError("DumpReader: truncated header at offset " +
                    std::to_string(in_.gcount()));
    return v;
  };
  header_.version = get32();
  if (header_.version != kDumpVersion)
    throw IoError("DumpReader: unsupported version " +
                  std::to_string(header_.version));
  const std::uint32_t layer_count = get32();
  if (layer_count == 0 || layer_count > 1u << 16)
    throw IoError("DumpReader: implausible layer count");
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    LayerShape l;
    l.height = get32();
    l.width = get32();
    l.depth = get32();
    l.filters = get32();
    if (!l.valid()) throw IoError("DumpReader: invalid layer shape");
    header_.layers.push_back(l);
  }
  header_.nodes = get32();
  header_.iterations = get32();
  data_offset_ = dump_header_bytes(header_);
  elements_ = header_.elements_per_gradient();
}

FlatLayout DumpReader::layout() const {
  std::vector<std::pair<LayerShape, LayerKind>> layers;
  for (const auto& l : header_.layers) layers.emplace_back(l, LayerKind::Conv);
  return make_layout(layers);
}

VecXd DumpReader::gradient(long t, int node) {
  if (t < 0 || t >= static_cast<long>(header_.iterations))
    throw IoError("DumpReader: iteration " + std::to_string(t) +
                  " not in dump (have " + std::to_string(header_.iterations) +
                  ")");
  if (node < 0 || node >= static_cast<int>(header_.nodes))
    throw IoError("DumpReader: node " + std::to_string(node) + " not in dump");
  const std::uint64_t offset =
      data_offset_ +
      (static_cast<std::uint64_t>(t) * header_.nodes + node) * 4ull * elements_;
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(offset));
  std::vector<float> row(elements_);
  in_.read(reinterpret_cast<char*>(row.data()), 4 * elements_);
  if (!in_)
    throw IoError("DumpReader: truncated dump " + path_ + " at offset " +
                  std::to_string(offset) + " (wanted " +
                  std::to_string(4 * elements_) + " bytes)");
  VecXd out(elements_);
  for (Index i = 0; i < elements_; ++i) out[i] = row[i];
  return out;
}

// ---------------------------------------------------------------------------
// Toy model

ToyModel::ToyModel(const ToyTaskConfig& cfg, std::uint64_t weight_seed)
    : cfg_(cfg) {
  if (!cfg.conv.valid()) throw ConfigError("ToyModel: invalid conv shape");
  if (cfg.image_h < cfg.conv.height || cfg.image_w < cfg.conv.width)
    throw ConfigError("ToyModel: image smaller than the filter");
  if (cfg.classes < 2) throw ConfigError("ToyModel: need at least 2 classes");
  const Index conv_n = cfg.conv.size();
  const Index dense_n = feature_count() * cfg.classes;
  params_.resize(conv_n + dense_n);
  Rng rng(mix_seed(weight_seed, 0x71a5));
  const double conv_scale =
      1.0 / std::sqrt(static_cast<double>(cfg.conv.height * cfg.conv.width *
                                          cfg.conv.depth));
  const double dense_scale = 1.0 / std::sqrt(static_cast<double>(feature_count()));
  for (Index i = 0; i < conv_n; ++i) params_[i] = conv_scale * rng.normal();
  for (Index i = 0; i < dense_n; ++i)
    params_[conv_n + i] = dense_scale * rng.normal();
}

FlatLayout ToyModel::layout() const {
  return make_layout(
      {{cfg_.conv, LayerKind::Conv},
       {LayerShape{1, 1, feature_count(), cfg_.classes}, LayerKind::Passthrough}});
}

void ToyModel::set_parameters(VecXd params) {
  if (params.size() != params_.size())
    throw Error("ToyModel: parameter length mismatch");
  params_ = std::move(params);
}

std::pair<double, VecXd> ToyModel::forward_backward(const ToyBatch& batch) const {
  if (batch.images.empty()) throw Error("forward_backward: empty minibatch");
  const LayerShape& c = cfg_.conv;
  const Index oh_n = out_h(), ow_n = out_w();
  const Index feat_n = feature_count();
  const Index conv_n = c.size();
  const int classes = cfg_.classes;
  const Index img_c = c.depth;

  VecXd grad = VecXd::Zero(params_.size());
  double loss = 0.0;

  VecXd pre(feat_n), act(feat_n), dpre(feat_n), dfeat(feat_n);
  VecXd logits(classes), prob(classes), dlogit(classes);

  for (std::size_t b = 0; b < batch.images.size(); ++b) {
    const VecXd& x = batch.images[b];
    if (x.size() != cfg_.image_h * cfg_.image_w * img_c)
      throw Error("forward_backward: image size mismatch");
    const int label = batch.labels[b];
    if (label < 0 || label >= classes)
      throw Error("forward_backward: label out of range");

    auto xat = [&](Index h, Index w, Index d) {
      return x[(h * cfg_.image_w + w) * img_c + d];
    };

    // Convolution (valid padding), tanh activation.
    for (Index oh = 0; oh < oh_n; ++oh)
      for (Index ow = 0; ow < ow_n; ++ow)
        for (Index f = 0; f < c.filters; ++f) {
          double acc = 0.0;
          for (Index kh = 0; kh < c.height; ++kh)
            for (Index kw = 0; kw < c.width; ++kw)
              for (Index d = 0; d < img_c; ++d)
                acc += xat(oh + kh, ow + kw, d) *
                       params_[flat_index(c, kh, kw, d, f)];
          pre[(oh * ow_n + ow) * c.filters + f] = acc;
        }
    act = pre.array().tanh();

    // Dense logits, softmax cross-entropy.
    for (int k = 0; k < classes; ++k) {
      double acc = 0.0;
      for (Index j = 0; j < feat_n; ++j)
        acc += act[j] * params_[conv_n + j * classes + k];
      logits[k] = acc;
    }
    const double zmax = logits.maxCoeff();
    prob = (logits.array() - zmax).exp();
    prob /= prob.sum();
    loss += -std::log(std::max(prob[label], 1e-300));

    for (int k = 0; k < classes; ++k)
      dlogit[k] = prob[k] - (k == label ? 1.0 : 0.0);

    for (Index j = 0; j < feat_n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < classes; ++k) {
        grad[conv_n + j * classes + k] += act[j] * dlogit[k];
        acc += params_[conv_n + j * classes + k] * dlogit[k];
      }
      dfeat[j] = acc;
    }
    dpre = dfeat.array() * (1.0 - act.array().square());

    for (Index kh = 0; kh < c.height; ++kh)
      for (Index kw = 0; kw < c.width; ++kw)
        for (Index d = 0; d < img_c; ++d)
          for (Index f = 0; f < c.filters; ++f) {
            double acc = 0.0;
            for (Index oh = 0; oh < oh_n; ++oh)
              for (Index ow = 0; ow < ow_n; ++ow)
                acc += xat(oh + kh, ow + kw, d) *
                       dpre[(oh * ow_n + ow) * c.filters + f];
            grad[flat_index(c, kh, kw, d, f)] += acc;
          }
  }

  const double inv_b = 1.0 / static_cast<double>(batch.images.size());
  return {loss * inv_b, grad * inv_b};
}

void ToyModel::apply_update(const VecXd& aggregated_gradient, double eta) {
  gvq::apply_update(params_, aggregated_gradient, eta);
}

void apply_update(VecXd& weights, const VecXd& aggregated_gradient, double eta) {
  if (weights.size() != aggregated_gradient.size())
    throw Error("apply_update: dimension mismatch");
  weights -= eta * aggregated_gradient;
}

// ---------------------------------------------------------------------------
// Toy task data

namespace {
constexpr std::uint64_t kTagTemplate = 0x7c;
constexpr std::uint64_t kTagLabel = 0x1b;
constexpr std::uint64_t kTagImage = 0x9d;
}  // namespace

ToyTask::ToyTask(ToyTaskConfig cfg) : cfg_(cfg) {
  const Index pixels = cfg_.image_h * cfg_.image_w * cfg_.conv.depth;
  for (int c = 0; c < cfg_.classes; ++c) {
    Rng rng(mix_seed(cfg_.seed, kTagTemplate, static_cast<std::uint64_t>(c)));
    VecXd tmpl(pixels);
    for (Index i = 0; i < pixels; ++i)
      tmpl[i] = cfg_.template_scale * rng.normal();
    templates_.push_back(std::move(tmpl));
  }
}

VecXd ToyTask::sample_image(std::uint64_t index, int label) const {
  Rng rng(mix_seed(cfg_.seed, kTagImage, index));
  VecXd img = templates_[label];
  for (Index i = 0; i < img.size(); ++i) img[i] += cfg_.data_noise * rng.normal();
  return img;
}

ToyBatch ToyTask::minibatch(long t, int node, int nodes) const {
  if (node < 0 || node >= nodes) throw Error("minibatch: node out of range");
  ToyBatch batch;
  for (int j = 0; j < cfg_.minibatch; ++j) {
    // Global sample stream; node n owns every N-th sample.
    const std::uint64_t global =
        (static_cast<std::uint64_t>(t) * cfg_.minibatch + j) *
            static_cast<std::uint64_t>(nodes) +
        static_cast<std::uint64_t>(node);
    const int label = static_cast<int>(
        mix_seed(cfg_.seed, kTagLabel, global) % cfg_.classes);
    batch.labels.push_back(label);
    batch.images.push_back(sample_image(global, label));
  }
  return batch;
}

}  // namespace gvq
