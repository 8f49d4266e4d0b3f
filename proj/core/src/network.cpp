#include "vdet/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "vdet/error.hpp"
#include "vdet/rng.hpp"

namespace vdet::diff {

std::string_view segment_name(SegmentId id) noexcept {
  switch (id) {
    case SegmentId::backbone: return "backbone";
    case SegmentId::neck: return "neck";
    case SegmentId::head: return "head";
  }
  return "?";
}

SegmentId parse_segment(std::string_view name) {
  for (SegmentId id : kAllSegments) {
    if (segment_name(id) == name) return id;
  }
  throw ConfigError("unknown segment '" + std::string(name) +
                    "' (valid: backbone, neck, head)");
}

SegmentSet parse_segment_set(std::string_view text) {
  SegmentSet out;
  std::string token;
  auto flush = [&] {
    // trim
    const auto b = token.find_first_not_of(" \t");
    const auto e = token.find_last_not_of(" \t");
    const std::string t = b == std::string::npos ? "" : token.substr(b, e - b + 1);
    if (!t.empty() && t != "none") out.insert(parse_segment(t));
    token.clear();
  };
  for (char c : text) {
    if (c == ',' || c == '+') {
      flush();
    } else {
      token.push_back(c);
    }
  }
  flush();
  return out;
}

std::string format_segment_set(const SegmentSet& set) {
  if (set.empty()) return "none";
  std::string out;
  for (SegmentId id : set) {
    if (!out.empty()) out += ',';
    out += segment_name(id);
  }
  return out;
}

void NetConfig::validate() const {
  if (input_size <= 0 || input_size % 8 != 0) {
    throw ConfigError("input_size must be a positive multiple of 8, got " +
                      std::to_string(input_size));
  }
  for (int c : backbone_channels) {
    if (c <= 0) throw ConfigError("backbone channel counts must be positive");
  }
  if (neck_channels <= 0) throw ConfigError("neck_channels must be positive");
  if (boxes_per_cell <= 0) throw ConfigError("boxes_per_cell must be positive");
  if (num_classes <= 0) throw ConfigError("num_classes must be positive");
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must be in [0,1)");
}

template <typename T>
DetectorNet<T>::DetectorNet(NetConfig config) : config_(config) {
  config_.validate();
  build();
}

template <typename T>
DetectorNet<T>::DetectorNet(NetConfig config, std::uint64_t seed) : DetectorNet(config) {
  for (SegmentId id : kAllSegments) {
    initialize(id, derive_seed(seed, static_cast<std::uint64_t>(id)));
  }
}

template <typename T>
void DetectorNet<T>::build() {
  const auto conv = [](std::string name, std::size_t k, std::size_t cin, std::size_t cout) {
    return std::vector<Parameter<T>>{
        {name + ".weight", BasicTensor<T>({k, k, cin, cout}), {}},
        {name + ".bias", BasicTensor<T>({cout}), {}},
    };
  };
  const auto c1 = static_cast<std::size_t>(config_.backbone_channels[0]);
  const auto c2 = static_cast<std::size_t>(config_.backbone_channels[1]);
  const auto c3 = static_cast<std::size_t>(config_.backbone_channels[2]);
  const auto cn = static_cast<std::size_t>(config_.neck_channels);
  const auto co = static_cast<std::size_t>(config_.output_channels());

  auto& backbone = segments_[0];
  backbone.id = SegmentId::backbone;
  for (auto&& [name, cin, cout] :
       {std::tuple{"conv1", std::size_t{3}, c1}, std::tuple{"conv2", c1, c2},
        std::tuple{"conv3", c2, c3}}) {
    auto p = conv(name, 3, cin, cout);
    backbone.params.insert(backbone.params.end(), p.begin(), p.end());
  }

  auto& neck = segments_[1];
  neck.id = SegmentId::neck;
  auto top = conv("top", 1, c3, cn);
  auto lateral = conv("lateral", 1, c2, cn);
  neck.params.insert(neck.params.end(), top.begin(), top.end());
  neck.params.insert(neck.params.end(), lateral.begin(), lateral.end());

  auto& head = segments_[2];
  head.id = SegmentId::head;
  head.params = conv("out", 1, cn, co);

  for (auto& seg : segments_) {
    for (auto& p : seg.params) p.velocity.assign(p.value.size(), T{0});
  }
}

template <typename T>
void DetectorNet<T>::initialize(SegmentId id, std::uint64_t seed) {
  SplitMix64 rng(seed);
  auto& seg = segment(id);
  // Parameters come in (weight, bias) pairs; both use the weight's fan-in.
  for (std::size_t i = 0; i < seg.params.size(); i += 2) {
    auto& w = seg.params[i].value;
    const double fan_in = static_cast<double>(w.dim(0) * w.dim(1) * w.dim(2));
    const double bound = std::sqrt(1.0 / fan_in);
    for (T& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    for (T& v : seg.params[i + 1].value.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  for (auto& p : seg.params) {
    std::fill(p.velocity.begin(), p.velocity.end(), T{0});
    p.value.drop_grad();
  }
}

template <typename T>
Var<T> DetectorNet<T>::param(SegmentId seg, std::size_t index, bool track_grad) {
  auto& s = segment(seg);
  return Var<T>::leaf(s.params[index].value, track_grad && !s.frozen);
}

template <typename T>
Var<T> DetectorNet<T>::forward_logits(const BasicTensor<T>& image, bool track_grad) {
  const auto n = static_cast<std::size_t>(config_.input_size);
  if (image.shape() != Shape{n, n, 3}) {
    throw ConfigError("input shape " + shape_to_string(image.shape()) + " does not match " +
                      shape_to_string({n, n, 3}));
  }
  const T slope = static_cast<T>(config_.leaky_slope);
  const auto p = [&](SegmentId seg, std::size_t i) { return param(seg, i, track_grad); };
  constexpr auto kB = SegmentId::backbone;
  constexpr auto kN = SegmentId::neck;
  constexpr auto kH = SegmentId::head;

  auto x = Var<T>::constant(image);
  auto f1 = leaky_relu(conv2d(x, p(kB, 0), p(kB, 1), 2, 1), slope);
  auto f2 = leaky_relu(conv2d(f1, p(kB, 2), p(kB, 3), 2, 1), slope);
  auto f3 = leaky_relu(conv2d(f2, p(kB, 4), p(kB, 5), 2, 1), slope);
  // Lateral merge: the stride-2 1x1 projection of the 16x16 stage joins the 8x8 stage.
  auto top = conv2d(f3, p(kN, 0), p(kN, 1), 1, 0);
  auto lateral = conv2d(f2, p(kN, 2), p(kN, 3), 2, 0);
  auto merged = leaky_relu(add(top, lateral), slope);
  auto out = conv2d(merged, p(kH, 0), p(kH, 1), 1, 0);
  if (!out.value().finite()) throw NumericError("non-finite value in detector output");
  if (track_grad) ++forward_count_;
  return out;
}

template <typename T>
Var<T> DetectorNet<T>::forward(const BasicTensor<T>& image, bool track_grad) {
  return sigmoid(forward_logits(image, track_grad));
}

template <typename T>
void DetectorNet<T>::backward(Var<T>& loss) {
  if (forward_count_ == 0 || !loss.defined()) {
    throw StateError("backward called before forward");
  }
  loss.backward();
}

template <typename T>
void DetectorNet<T>::sgd_step(double lr, double momentum) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
  const T lr_t = static_cast<T>(lr);
  const T m_t = static_cast<T>(momentum);
  for (auto& seg : segments_) {
    for (auto& p : seg.params) {
      if (seg.frozen || !p.value.has_grad()) {
        p.value.zero_grad();
        continue;
      }
      auto g = p.value.grad();
      auto w = p.value.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (!std::isfinite(g[i])) throw NumericError("non-finite gradient in " + p.name);
        p.velocity[i] = m_t * p.velocity[i] + g[i];
        w[i] -= lr_t * p.velocity[i];
      }
      p.value.zero_grad();
    }
  }
}

template <typename T>
void DetectorNet<T>::set_frozen(const SegmentSet& segments, bool frozen) {
  for (SegmentId id : segments) {
    segment(id).frozen = frozen;
    if (frozen) {
      for (auto& p : segment(id).params) p.value.zero_grad();
    }
  }
}

template <typename T>
void DetectorNet<T>::set_frozen(const std::vector<std::string>& names, bool frozen) {
  SegmentSet ids;
  for (const auto& n : names) ids.insert(parse_segment(n));
  set_frozen(ids, frozen);
}

template <typename T>
void DetectorNet<T>::zero_grad() {
  for (auto& seg : segments_) {
    for (auto& p : seg.params) p.value.zero_grad();
  }
}

template <typename T>
void DetectorNet<T>::scale_grad(double factor) {
  const T f = static_cast<T>(factor);
  for (auto& seg : segments_) {
    for (auto& p : seg.params) {
      if (!p.value.has_grad()) continue;
      for (T& g : p.value.grad()) g *= f;
    }
  }
}

template <typename T>
double DetectorNet<T>::clip_grad_norm(double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("max_norm must be positive");
  double sq = 0.0;
  for (const auto& seg : segments_) {
    if (seg.frozen) continue;
    for (const auto& p : seg.params) {
      if (!p.value.has_grad()) continue;
      for (T g : p.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) scale_grad(max_norm / norm);
  return norm;
}

template <typename T>
void DetectorNet<T>::reset_momentum() {
  for (auto& seg : segments_) {
    for (auto& p : seg.params) std::fill(p.velocity.begin(), p.velocity.end(), T{0});
  }
}

template <typename T>
std::size_t DetectorNet<T>::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& seg : segments_) {
    for (const auto& p : seg.params) n += p.value.size();
  }
  return n;
}

template class DetectorNet<float>;
template class DetectorNet<double>;

// ---------------------------------------------------------------------------
// Weight file

namespace {

static_assert(std::endian::native == std::endian::little,
              "weight I/O assumes a little-endian host");

constexpr char kMagic[4] = {'S', 'D', 'W', '1'};

struct StoredParam {
  Shape shape;
  std::vector<float> data;
};

struct StoredSegment {
  std::string name;
  std::vector<StoredParam> params;
};

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

class Reader {
 public:
  Reader(std::istream& is, std::string context) : is_(is), context_(std::move(context)) {}

  template <typename V>
  V get(const char* what) {
    V v{};
    if (!is_.read(reinterpret_cast<char*>(&v), sizeof(V))) {
      throw FormatError(context_ + ": truncated while reading " + what);
    }
    return v;
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    if (!is_.read(dst, static_cast<std::streamsize>(n))) {
      throw FormatError(context_ + ": truncated while reading " + what);
    }
  }

  const std::string& context() const { return context_; }
  void set_context(std::string c) { context_ = std::move(c); }

 private:
  std::istream& is_;
  std::string context_;
};

std::vector<StoredSegment> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight file " + path.string());
  const std::string base = "weight file " + path.string();
  Reader r(in, base);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError(base + ": bad magic/version (expected SDW1)");
  }
  const auto count = r.get<std::uint32_t>("segment count");
  if (count > 64) throw FormatError(base + ": implausible segment count " + std::to_string(count));
  std::vector<StoredSegment> out;
  for (std::uint32_t s = 0; s < count; ++s) {
    StoredSegment seg;
    const auto len = r.get<std::uint8_t>("segment name length");
    seg.name.resize(len);
    r.bytes(seg.name.data(), len, "segment name");
    r.set_context(base + " segment '" + seg.name + "'");
    const auto nparams = r.get<std::uint32_t>("parameter count");
    if (nparams > 1024) throw FormatError(r.context() + ": implausible parameter count");
    for (std::uint32_t p = 0; p < nparams; ++p) {
      StoredParam sp;
      const auto rank = r.get<std::uint32_t>("rank");
      if (rank > 8) throw FormatError(r.context() + ": implausible rank " + std::to_string(rank));
      for (std::uint32_t d = 0; d < rank; ++d) sp.shape.push_back(r.get<std::uint32_t>("dimension"));
      const std::size_t n = shape_size(sp.shape);
      if (n > (std::size_t{1} << 28)) throw FormatError(r.context() + ": implausible tensor size");
      sp.data.resize(n);
      r.bytes(reinterpret_cast<char*>(sp.data.data()), n * sizeof(float), "tensor data");
      seg.params.push_back(std::move(sp));
    }
    out.push_back(std::move(seg));
    r.set_context(base);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError(base + ": trailing bytes after last segment");
  }
  return out;
}

void apply_segment(Segment<float>& dst, const StoredSegment& src) {
  const std::string name(segment_name(dst.id));
  if (src.params.size() != dst.params.size()) {
    throw FormatError("segment '" + name + "': parameter count " + std::to_string(src.params.size()) +
                      " does not match expected " + std::to_string(dst.params.size()));
  }
  for (std::size_t i = 0; i < src.params.size(); ++i) {
    if (src.params[i].shape != dst.params[i].value.shape()) {
      throw FormatError("segment '" + name + "': parameter " + dst.params[i].name + " has shape " +
                        shape_to_string(src.params[i].shape) + ", expected " +
                        shape_to_string(dst.params[i].value.shape()));
    }
  }
  for (std::size_t i = 0; i < src.params.size(); ++i) {
    auto& p = dst.params[i];
    std::copy(src.params[i].data.begin(), src.params[i].data.end(), p.value.data().begin());
    p.value.drop_grad();
    std::fill(p.velocity.begin(), p.velocity.end(), 0.0f);
  }
}

const StoredSegment& find_segment(const std::vector<StoredSegment>& stored, SegmentId id,
                                  const std::filesystem::path& path) {
  for (const auto& s : stored) {
    if (s.name == segment_name(id)) return s;
  }
  throw FormatError("weight file " + path.string() + " has no segment '" +
                    std::string(segment_name(id)) + "'");
}

}  // namespace

void save_weights(const Detector& net, const std::filesystem::path& path) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, 4);
  put<std::uint32_t>(os, 3);
  for (const auto& seg : net.segments()) {
    const auto name = segment_name(seg.id);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(seg.params.size()));
    for (const auto& p : seg.params) {
      put<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.shape().size()));
      for (std::size_t d : p.value.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
      os.write(reinterpret_cast<const char*>(p.value.data().data()),
               static_cast<std::streamsize>(p.value.size() * sizeof(float)));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = os.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void load_weights(Detector& net, const std::filesystem::path& path) {
  transfer_weights(net, path, {kAllSegments.begin(), kAllSegments.end()});
}

void transfer_weights(Detector& dst, const std::filesystem::path& src_file,
                      const SegmentSet& segments) {
  const auto stored = read_file(src_file);
  // Validate everything before mutating so a failure leaves dst untouched.
  Detector staged = dst;
  for (SegmentId id : segments) apply_segment(staged.segment(id), find_segment(stored, id, src_file));
  for (SegmentId id : segments) {
    dst.segment(id).params = std::move(staged.segment(id).params);
  }
}

NetConfig config_from_weights(const std::filesystem::path& path, int boxes_per_cell,
                              int input_size) {
  const auto stored = read_file(path);
  const auto& backbone = find_segment(stored, SegmentId::backbone, path);
  const auto& neck = find_segment(stored, SegmentId::neck, path);
  const auto& head = find_segment(stored, SegmentId::head, path);
  if (backbone.params.size() != 6 || neck.params.size() != 4 || head.params.size() != 2) {
    throw FormatError("weight file " + path.string() + " does not describe a detector");
  }
  NetConfig cfg;
  cfg.input_size = input_size;
  cfg.boxes_per_cell = boxes_per_cell;
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& w = backbone.params[2 * i].shape;
    if (w.size() != 4) throw FormatError("segment 'backbone': malformed convolution weight");
    cfg.backbone_channels[i] = static_cast<int>(w[3]);
  }
  if (neck.params[0].shape.size() != 4) throw FormatError("segment 'neck': malformed weight");
  cfg.neck_channels = static_cast<int>(neck.params[0].shape[3]);
  if (head.params[0].shape.size() != 4) throw FormatError("segment 'head': malformed weight");
  const int out_channels = static_cast<int>(head.params[0].shape[3]);
  if (out_channels % boxes_per_cell != 0 || out_channels / boxes_per_cell <= 5) {
    throw FormatError("segment 'head': " + std::to_string(out_channels) +
                      " output channels incompatible with " + std::to_string(boxes_per_cell) +
                      " boxes per cell");
  }
  cfg.num_classes = out_channels / boxes_per_cell - 5;
  cfg.validate();
  return cfg;
}

}  // namespace vdet::diff
