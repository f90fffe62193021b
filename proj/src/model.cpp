#include "csks/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "csks/error.hpp"
#include "csks/losses.hpp"
#include "csks/optim.hpp"

namespace csks {

std::string to_string(Architecture a) { return a == Architecture::residual_conv ? "residual_conv" : "conv_recurrent"; }
std::string to_string(RecurrentCell c) { return c == RecurrentCell::lstm ? "lstm" : "gru"; }

Architecture architecture_from_string(const std::string& name) {
  if (name == "conv_recurrent") return Architecture::conv_recurrent;
  if (name == "residual_conv") return Architecture::residual_conv;
  throw UsageError("unknown architecture '" + name + "'");
}

RecurrentCell recurrent_cell_from_string(const std::string& name) {
  if (name == "gru") return RecurrentCell::gru;
  if (name == "lstm") return RecurrentCell::lstm;
  throw UsageError("unknown recurrent cell '" + name + "'");
}

void ModelConfig::validate() const {
  if (embedding_dim < 2) throw UsageError("embedding_dim must be at least 2");
  if (feature_dim == 0) throw UsageError("feature_dim must be positive");
  if (!(input_scale > 0.0)) throw UsageError("input_scale must be positive");
  if (architecture == Architecture::conv_recurrent) {
    if (conv_layers.empty()) throw UsageError("conv_recurrent needs at least one conv layer");
    for (const auto& c : conv_layers) {
      if (c.channels == 0 || c.kernel_h == 0 || c.kernel_w == 0 || c.stride_h == 0 || c.stride_w == 0) {
        throw UsageError("conv layer sizes must be positive");
      }
    }
    if (recurrent_width == 0 || recurrent_layers == 0) throw UsageError("recurrent sizes must be positive");
    // Frequency extent must survive every convolution.
    std::size_t w = feature_dim;
    for (const auto& c : conv_layers) {
      if (w < c.kernel_w) throw UsageError("conv kernel wider than the remaining frequency axis");
      w = (w - c.kernel_w) / c.stride_w + 1;
    }
  } else {
    if (residual_channels == 0 || pool_h == 0 || pool_w == 0) throw UsageError("residual sizes must be positive");
    if (feature_dim < pool_w) throw UsageError("pool wider than the feature axis");
  }
}

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'S', 'K', 'S', 'C', 'K', 'P', 'T'};

std::size_t conv_output_width(const ModelConfig& c) {
  std::size_t w = c.feature_dim;
  for (const auto& l : c.conv_layers) w = (w - l.kernel_w) / l.stride_w + 1;
  return w;
}

std::size_t gate_count(RecurrentCell cell) { return cell == RecurrentCell::lstm ? 4 : 3; }

const char* const kGruGates[] = {"z", "r", "n"};
const char* const kLstmGates[] = {"i", "f", "g", "o"};

std::span<const char* const> gate_names(RecurrentCell cell) {
  if (cell == RecurrentCell::lstm) return kLstmGates;
  return kGruGates;
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["architecture"] = to_string(c.architecture);
  j["feature_kind"] = to_string(c.feature_kind);
  j["feature_dim"] = c.feature_dim;
  j["embedding_dim"] = c.embedding_dim;
  j["n_classes"] = c.n_classes;
  nlohmann::json convs = nlohmann::json::array();
  for (const auto& l : c.conv_layers) {
    convs.push_back({{"channels", l.channels},
                     {"kernel_h", l.kernel_h},
                     {"kernel_w", l.kernel_w},
                     {"stride_h", l.stride_h},
                     {"stride_w", l.stride_w}});
  }
  j["conv_layers"] = convs;
  j["cell"] = to_string(c.cell);
  j["recurrent_width"] = c.recurrent_width;
  j["recurrent_layers"] = c.recurrent_layers;
  j["residual_channels"] = c.residual_channels;
  j["residual_blocks"] = c.residual_blocks;
  j["pool_h"] = c.pool_h;
  j["pool_w"] = c.pool_w;
  j["input_offset"] = c.input_offset;
  j["input_scale"] = c.input_scale;
  j["precision"] = c.precision == Precision::f64 ? "f64" : "f32";
  j["pretrained_checkpoint"] = c.pretrained_checkpoint;
  j["frozen_prefix"] = c.frozen_prefix;
  return j;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v & 0xFFFFFFFFu));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | (hi << 32);
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError(origin_ + ": truncated checkpoint");
  }
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

struct Record {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct CheckpointContents {
  ModelConfig config;
  std::string metadata;
  std::vector<Record> records;
};

CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());
  if (r.text(8) != std::string(kCheckpointMagic, 8)) throw FormatError(path.string() + ": bad checkpoint magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) + " is not supported");
  }
  const std::uint64_t digest = r.u64();
  const std::string json = r.text(r.u32());
  CheckpointContents out;
  try {
    out.config = config_from_json(json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed configuration block: " + e.what());
  }
  if (config_digest(out.config) != digest) throw FormatError(path.string() + ": configuration digest mismatch");
  out.metadata = r.text(r.u32());
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    rec.name = r.text(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError(path.string() + ": implausible tensor rank");
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(r.u32());
    rec.values.resize(element_count(rec.shape));
    for (double& v : rec.values) v = std::bit_cast<float>(r.u32());
    out.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after checkpoint records");
  return out;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

std::string config_to_json(const ModelConfig& config) { return to_json(config).dump(); }

ModelConfig config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.architecture = architecture_from_string(j.value("architecture", to_string(c.architecture)));
  c.feature_kind = feature_kind_from_string(j.value("feature_kind", to_string(c.feature_kind)));
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.n_classes = j.value("n_classes", c.n_classes);
  if (j.contains("conv_layers")) {
    c.conv_layers.clear();
    for (const auto& l : j.at("conv_layers")) {
      c.conv_layers.push_back({l.at("channels").get<std::size_t>(), l.at("kernel_h").get<std::size_t>(),
                               l.at("kernel_w").get<std::size_t>(), l.at("stride_h").get<std::size_t>(),
                               l.at("stride_w").get<std::size_t>()});
    }
  }
  c.cell = recurrent_cell_from_string(j.value("cell", to_string(c.cell)));
  c.recurrent_width = j.value("recurrent_width", c.recurrent_width);
  c.recurrent_layers = j.value("recurrent_layers", c.recurrent_layers);
  c.residual_channels = j.value("residual_channels", c.residual_channels);
  c.residual_blocks = j.value("residual_blocks", c.residual_blocks);
  c.pool_h = j.value("pool_h", c.pool_h);
  c.pool_w = j.value("pool_w", c.pool_w);
  c.input_offset = j.value("input_offset", c.input_offset);
  c.input_scale = j.value("input_scale", c.input_scale);
  const std::string precision = j.value("precision", std::string("f32"));
  if (precision != "f32" && precision != "f64") throw UsageError("precision must be f32 or f64");
  c.precision = precision == "f64" ? Precision::f64 : Precision::f32;
  c.pretrained_checkpoint = j.value("pretrained_checkpoint", c.pretrained_checkpoint);
  c.frozen_prefix = j.value("frozen_prefix", c.frozen_prefix);
  return c;
}

std::uint64_t config_digest(const ModelConfig& config) { return fnv1a(config_to_json(config)); }

std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t e = c.embedding_dim;
  std::size_t total = 0;
  std::size_t last_width;
  if (c.architecture == Architecture::conv_recurrent) {
    std::size_t in_ch = 1;
    for (const auto& l : c.conv_layers) {
      total += l.channels * in_ch * l.kernel_h * l.kernel_w + l.channels;
      in_ch = l.channels;
    }
    std::size_t in = in_ch * conv_output_width(c);
    const std::size_t h = c.recurrent_width;
    for (std::size_t r = 0; r < c.recurrent_layers; ++r) {
      total += gate_count(c.cell) * (in * h + h * h + h);
      in = h;
    }
    last_width = h;
  } else {
    const std::size_t ch = c.residual_channels;
    total += ch * 9 + ch;
    total += c.residual_blocks * 2 * (ch * ch * 9 + ch);
    last_width = ch;
  }
  total += last_width * e + e;
  if (c.n_classes > 0) total += e * c.n_classes + c.n_classes;
  return total;
}

Model::Model(const Model& other)
    : config_(other.config_), layers_(other.layers_), index_(other.index_) {
  params_.reserve(other.params_.size());
  for (const Parameter& p : other.params_) {
    ag::Var v = ag::parameter(p.var->value);
    v->requires_grad = p.var->requires_grad;
    params_.push_back({p.name, p.layer, v});
  }
}

Model& Model::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Model::add_parameter(const std::string& layer, const std::string& tensor, Shape shape, double bound,
                          std::uint64_t& stream) {
  if (layers_.empty() || layers_.back() != layer) layers_.push_back(layer);
  Tensor t(std::move(shape));
  if (bound > 0.0) {
    std::mt19937_64 rng(stream++);
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.values()) v = dist(rng);
  }
  const std::string name = layer + "." + tensor;
  index_[name] = params_.size();
  params_.push_back({name, layers_.size() - 1, ag::parameter(std::move(t))});
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  // One deterministic sub-stream per tensor, in construction order.
  std::uint64_t stream = seed * 0x9E3779B97F4A7C15ull + 1;
  auto fan_in_bound = [](std::size_t fan_in) { return std::sqrt(3.0 / static_cast<double>(fan_in)); };

  std::size_t last_width;
  if (config.architecture == Architecture::conv_recurrent) {
    std::size_t in_ch = 1;
    for (std::size_t i = 0; i < config.conv_layers.size(); ++i) {
      const auto& l = config.conv_layers[i];
      const std::string name = "conv" + std::to_string(i);
      const std::size_t fan_in = in_ch * l.kernel_h * l.kernel_w;
      m.add_parameter(name, "weight", {l.channels, in_ch, l.kernel_h, l.kernel_w}, std::sqrt(2.0) * fan_in_bound(fan_in), stream);
      m.add_parameter(name, "bias", {l.channels}, 0.0, stream);
      in_ch = l.channels;
    }
    std::size_t in = in_ch * conv_output_width(config);
    const std::size_t h = config.recurrent_width;
    for (std::size_t r = 0; r < config.recurrent_layers; ++r) {
      const std::string name = "rnn" + std::to_string(r);
      for (const char* g : gate_names(config.cell)) m.add_parameter(name, std::string("w_") + g, {in, h}, fan_in_bound(in), stream);
      for (const char* g : gate_names(config.cell)) m.add_parameter(name, std::string("u_") + g, {h, h}, fan_in_bound(h), stream);
      for (const char* g : gate_names(config.cell)) m.add_parameter(name, std::string("b_") + g, {h}, 0.0, stream);
      if (config.cell == RecurrentCell::lstm) m.param(name + ".b_f")->value.fill(1.0);
      in = h;
    }
    last_width = h;
  } else {
    const std::size_t ch = config.residual_channels;
    m.add_parameter("stem", "weight", {ch, 1, 3, 3}, std::sqrt(2.0) * fan_in_bound(9), stream);
    m.add_parameter("stem", "bias", {ch}, 0.0, stream);
    for (std::size_t b = 0; b < config.residual_blocks; ++b) {
      const std::string name = "block" + std::to_string(b);
      m.add_parameter(name, "conv_a.weight", {ch, ch, 3, 3}, std::sqrt(2.0) * fan_in_bound(ch * 9), stream);
      m.add_parameter(name, "conv_a.bias", {ch}, 0.0, stream);
      // Residual branches start small so the identity path dominates early on.
      m.add_parameter(name, "conv_b.weight", {ch, ch, 3, 3}, 0.1 * fan_in_bound(ch * 9), stream);
      m.add_parameter(name, "conv_b.bias", {ch}, 0.0, stream);
    }
    last_width = ch;
  }
  m.add_parameter("embed", "weight", {last_width, config.embedding_dim}, fan_in_bound(last_width), stream);
  m.add_parameter("embed", "bias", {config.embedding_dim}, 0.0, stream);
  if (config.n_classes > 0) {
    m.add_parameter("head", "weight", {config.embedding_dim, config.n_classes}, fan_in_bound(config.embedding_dim), stream);
    m.add_parameter("head", "bias", {config.n_classes}, 0.0, stream);
  }
  m.set_frozen_prefix(config.frozen_prefix);
  m.apply_precision();
  return m;
}

const ag::Var& Model::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("model has no parameter '" + name + "'");
  return params_[it->second].var;
}

void Model::set_frozen_prefix(std::size_t count) {
  config_.frozen_prefix = count;
  for (Parameter& p : params_) p.var->requires_grad = p.layer >= count;
}

void Model::apply_precision() {
  if (config_.precision != Precision::f32) return;
  for (Parameter& p : params_) {
    for (double& v : p.var->value.values()) v = static_cast<double>(static_cast<float>(v));
  }
}

ParameterSet Model::parameter_values() const {
  ParameterSet out;
  for (const Parameter& p : params_) out.emplace(p.name, p.var->value);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter& p : params_) n += p.var->value.size();
  return n;
}

ag::Var Model::input_tensor(std::span<const FeatureMatrix* const> batch) const {
  if (batch.empty()) throw UsageError("empty input batch");
  const std::size_t rows = batch.front()->rows;
  const std::size_t cols = batch.front()->cols;
  for (const FeatureMatrix* f : batch) {
    if (f->kind != config_.feature_kind) {
      throw UsageError("feature kind " + to_string(f->kind) + " does not match the model's " + to_string(config_.feature_kind));
    }
    if (f->cols != config_.feature_dim) {
      throw UsageError("feature width " + std::to_string(f->cols) + " does not match the model's " +
                       std::to_string(config_.feature_dim));
    }
    if (f->rows != rows) throw UsageError("inputs in one batch must have equal frame counts");
  }
  Tensor x({batch.size(), 1, rows, cols});
  const double inv = 1.0 / config_.input_scale;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& v = batch[b]->values;
    double* dst = x.data() + b * rows * cols;
    for (std::size_t i = 0; i < rows * cols; ++i) dst[i] = (v[i] - config_.input_offset) * inv;
  }
  return ag::constant(std::move(x));
}

ag::Var Model::recurrent_layer(const ag::Var& sequence, std::size_t index) const {
  const std::size_t batch = sequence->value.dim(0);
  const std::size_t steps = sequence->value.dim(1);
  const std::size_t width = sequence->value.dim(2);
  const std::size_t h = config_.recurrent_width;
  const std::string name = "rnn" + std::to_string(index);
  const ag::Var flat = ag::reshape(sequence, {batch * steps, width});

  // Input projections for all time steps at once, one per gate.
  std::map<std::string, ag::Var> projected;
  std::map<std::string, const ag::Var*> recurrent;
  for (const char* g : gate_names(config_.cell)) {
    const std::string gate(g);
    projected[gate] = ag::reshape(ag::add_row_bias(ag::matmul(flat, param(name + ".w_" + gate)), param(name + ".b_" + gate)),
                                  {batch, steps, h});
    recurrent[gate] = &param(name + ".u_" + gate);
  }

  ag::Var state = ag::constant(Tensor({batch, h}));
  ag::Var cell = ag::constant(Tensor({batch, h}));
  std::vector<ag::Var> outputs;
  outputs.reserve(steps);
  auto pre = [&](const std::string& gate, std::size_t t) {
    return ag::add(ag::time_step(projected[gate], t), ag::matmul(state, *recurrent[gate]));
  };
  for (std::size_t t = 0; t < steps; ++t) {
    if (config_.cell == RecurrentCell::gru) {
      const ag::Var z = ag::sigmoid(pre("z", t));
      const ag::Var r = ag::sigmoid(pre("r", t));
      const ag::Var n = ag::tanh(ag::add(ag::time_step(projected["n"], t), ag::mul(r, ag::matmul(state, *recurrent["n"]))));
      state = ag::add(ag::mul(ag::one_minus(z), n), ag::mul(z, state));
    } else {
      const ag::Var i = ag::sigmoid(pre("i", t));
      const ag::Var f = ag::sigmoid(pre("f", t));
      const ag::Var g = ag::tanh(pre("g", t));
      const ag::Var o = ag::sigmoid(pre("o", t));
      cell = ag::add(ag::mul(f, cell), ag::mul(i, g));
      state = ag::mul(o, ag::tanh(cell));
    }
    outputs.push_back(state);
  }
  return ag::stack_steps(outputs);
}

ag::Var Model::embed(std::span<const FeatureMatrix* const> batch) const {
  ag::Var x = input_tensor(batch);
  ag::Var pooled;
  if (config_.architecture == Architecture::conv_recurrent) {
    for (std::size_t i = 0; i < config_.conv_layers.size(); ++i) {
      const auto& l = config_.conv_layers[i];
      const std::string name = "conv" + std::to_string(i);
      ag::Conv2dOptions opt;
      opt.stride_h = l.stride_h;
      opt.stride_w = l.stride_w;
      if (x->value.dim(2) < l.kernel_h) throw UsageError("input has too few frames for the conv stack");
      x = ag::relu(ag::conv2d(x, param(name + ".weight"), param(name + ".bias"), opt));
    }
    ag::Var seq = ag::conv_to_sequence(x);
    for (std::size_t r = 0; r < config_.recurrent_layers; ++r) seq = recurrent_layer(seq, r);
    pooled = ag::mean_time(seq);
  } else {
    ag::Conv2dOptions same;
    same.pad_h = 1;
    same.pad_w = 1;
    x = ag::relu(ag::conv2d(x, param("stem.weight"), param("stem.bias"), same));
    x = ag::avg_pool2d(x, config_.pool_h, config_.pool_w);
    for (std::size_t b = 0; b < config_.residual_blocks; ++b) {
      const std::string name = "block" + std::to_string(b);
      const ag::Var inner = ag::relu(ag::conv2d(x, param(name + ".conv_a.weight"), param(name + ".conv_a.bias"), same));
      x = ag::relu(ag::add(x, ag::conv2d(inner, param(name + ".conv_b.weight"), param(name + ".conv_b.bias"), same)));
    }
    pooled = ag::global_avg_pool(x);
  }
  return ag::add_row_bias(ag::matmul(pooled, param("embed.weight")), param("embed.bias"));
}

ag::Var Model::logits(const ag::Var& embeddings) const {
  if (!has_head()) throw UsageError("model has no classification head");
  return ag::add_row_bias(ag::matmul(embeddings, param("head.weight")), param("head.bias"));
}

std::vector<double> Model::forward_embedding(const FeatureMatrix& features) const {
  ag::NoGradGuard guard;
  const FeatureMatrix* one[] = {&features};
  const ag::Var e = embed(one);
  return {e->value.values().begin(), e->value.values().end()};
}

std::vector<double> Model::forward_logits(const FeatureMatrix& features) const {
  ag::NoGradGuard guard;
  const FeatureMatrix* one[] = {&features};
  const ag::Var l = logits(embed(one));
  return {l->value.values().begin(), l->value.values().end()};
}

namespace {

template <typename F>
Tensor batched_rows(std::span<const FeatureMatrix* const> inputs, std::size_t chunk, std::size_t width, F run) {
  Tensor out({inputs.size(), width});
  if (chunk == 0) chunk = 1;
  for (std::size_t start = 0; start < inputs.size(); start += chunk) {
    const std::size_t n = std::min(chunk, inputs.size() - start);
    const ag::Var rows = run(inputs.subspan(start, n));
    std::copy(rows->value.values().begin(), rows->value.values().end(), out.data() + start * width);
  }
  return out;
}

}  // namespace

Tensor Model::embed_all(std::span<const FeatureMatrix* const> inputs, std::size_t chunk) const {
  ag::NoGradGuard guard;
  return batched_rows(inputs, chunk, config_.embedding_dim, [this](auto part) { return embed(part); });
}

Tensor Model::logits_all(std::span<const FeatureMatrix* const> inputs, std::size_t chunk) const {
  ag::NoGradGuard guard;
  return batched_rows(inputs, chunk, config_.n_classes, [this](auto part) { return logits(embed(part)); });
}

void Model::zero_grad() {
  for (Parameter& p : params_) p.var->clear_grad();
}

ParameterSet Model::backward(const ag::Var& loss) {
  zero_grad();
  ag::backward(loss);
  ParameterSet grads;
  for (Parameter& p : params_) {
    if (is_frozen(p) || !p.var->has_grad()) {
      grads.emplace(p.name, Tensor(p.var->shape()));
    } else {
      grads.emplace(p.name, p.var->grad());
    }
  }
  return grads;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const std::string& metadata) {
  std::string out(kCheckpointMagic, 8);
  put_u32(out, kCheckpointVersion);
  put_u64(out, config_digest(model.config()));
  const std::string json = config_to_json(model.config());
  put_u32(out, static_cast<std::uint32_t>(json.size()));
  out += json;
  put_u32(out, static_cast<std::uint32_t>(metadata.size()));
  out += metadata;
  put_u32(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const Parameter& p : model.parameters()) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_u32(out, static_cast<std::uint32_t>(p.var->value.rank()));
    for (std::size_t d : p.var->shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.var->value.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot write checkpoint " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw DataError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  CheckpointContents contents = read_checkpoint(path);
  Model model = Model::build(contents.config, 0);
  std::map<std::string, const Record*> by_name;
  for (const Record& r : contents.records) by_name[r.name] = &r;
  for (Parameter& p : model.parameters()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw FormatError(path.string() + ": missing tensor '" + p.name + "'");
    if (it->second->shape != p.var->shape()) throw FormatError(path.string() + ": shape mismatch for '" + p.name + "'");
    p.var->value = Tensor(it->second->shape, it->second->values);
  }
  return model;
}

std::string checkpoint_metadata(const std::filesystem::path& path) { return read_checkpoint(path).metadata; }

std::vector<std::string> load_parameters(Model& model, const std::filesystem::path& path, LoadMode mode,
                                         const std::function<bool(const std::string&)>& include) {
  const CheckpointContents contents = read_checkpoint(path);
  std::map<std::string, const Record*> by_name;
  for (const Record& r : contents.records) by_name[r.name] = &r;
  std::vector<std::string> loaded;
  for (Parameter& p : model.parameters()) {
    if (include && !include(p.name)) continue;
    auto it = by_name.find(p.name);
    const bool present = it != by_name.end();
    const bool same_shape = present && it->second->shape == p.var->shape();
    if (mode == LoadMode::strict && !same_shape) {
      throw FormatError(path.string() + (present ? ": shape mismatch for '" : ": missing tensor '") + p.name + "'");
    }
    if (!same_shape) continue;
    p.var->value = Tensor(it->second->shape, it->second->values);
    loaded.push_back(p.name);
  }
  model.apply_precision();
  return loaded;
}

std::vector<std::string> transfer_parameters(const Model& source, Model& target,
                                             const std::function<bool(const std::string&)>& include) {
  std::map<std::string, const Parameter*> by_name;
  for (const Parameter& p : source.parameters()) by_name[p.name] = &p;
  std::vector<std::string> copied;
  for (Parameter& p : target.parameters()) {
    if (include && !include(p.name)) continue;
    auto it = by_name.find(p.name);
    if (it == by_name.end() || it->second->var->shape() != p.var->shape()) continue;
    p.var->value = it->second->var->value;
    copied.push_back(p.name);
  }
  target.apply_precision();
  return copied;
}

PretrainReport pretrain_auxiliary(Model& model, std::span<const LabeledFeatures> aux_dataset,
                                  const PretrainOptions& options) {
  PretrainReport report;
  if (options.epochs == 0) return report;
  if (aux_dataset.empty()) throw UsageError("auxiliary dataset is empty");
  if (!model.has_head()) throw UsageError("auxiliary pretraining needs a classification head");
  for (const auto& ex : aux_dataset) {
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= model.config().n_classes) {
      throw UsageError("auxiliary label out of range for the model head");
    }
  }
  OptimizerConfig opt;
  opt.learning_rate = options.learning_rate;
  opt.momentum = options.momentum;
  opt.clip_norm = 5.0;
  OptimizerState state;
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(aux_dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t n = std::min(batch, order.size() - start);
      std::vector<const FeatureMatrix*> inputs;
      std::vector<std::size_t> targets;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& ex = aux_dataset[order[start + i]];
        inputs.push_back(&ex.features);
        targets.push_back(static_cast<std::size_t>(ex.label));
      }
      const ag::Var logits = model.logits(model.embed(inputs));
      const ag::Var loss = losses::cross_entropy(logits, targets);
      const double value = ag::scalar(loss);
      if (!std::isfinite(value)) throw NumericError("auxiliary pretraining diverged (non-finite loss)");
      const std::size_t c = logits->value.dim(1);
      for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits->value.data() + i * c;
        if (static_cast<std::size_t>(std::max_element(row, row + c) - row) == targets[i]) ++correct;
      }
      loss_sum += value * static_cast<double>(n);
      model.backward(loss);
      optimizer_step(model, state, opt);
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
    report.epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(order.size()));
  }
  return report;
}

}  // namespace csks
