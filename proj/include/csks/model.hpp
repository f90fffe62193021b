#pragma once

// Embedding and classification networks on top of the gradient engine.
//
// conv_recurrent: 2D convolutions over (time, frequency) -> recurrent stack
// over time -> temporal mean -> dense embedding [-> dense classification head].
// residual_conv: conv stem -> average pool -> residual blocks with a fixed
// channel count -> global average pool -> dense embedding [-> head].

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "csks/autograd.hpp"
#include "csks/dsp.hpp"
#include "csks/tensor.hpp"

namespace csks {

enum class Architecture { conv_recurrent, residual_conv };
enum class RecurrentCell { gru, lstm };
enum class Precision { f32, f64 };

std::string to_string(Architecture a);
std::string to_string(RecurrentCell c);
Architecture architecture_from_string(const std::string& name);
RecurrentCell recurrent_cell_from_string(const std::string& name);

struct ConvLayerSpec {
  std::size_t channels = 8;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride_h = 2;
  std::size_t stride_w = 2;
  friend bool operator==(const ConvLayerSpec&, const ConvLayerSpec&) = default;
};

struct ModelConfig {
  Architecture architecture = Architecture::conv_recurrent;
  FeatureKind feature_kind = FeatureKind::spectrogram;
  // Columns of the input feature matrix (241 for the 480-point spectrogram, 40 for MFCC).
  std::size_t feature_dim = 241;
  std::size_t embedding_dim = 32;
  // Width of the classification head; 0 builds an embedding-only network.
  std::size_t n_classes = 21;

  std::vector<ConvLayerSpec> conv_layers{{4, 3, 5, 2, 4}, {8, 3, 3, 2, 2}};
  RecurrentCell cell = RecurrentCell::gru;
  std::size_t recurrent_width = 64;
  std::size_t recurrent_layers = 1;

  std::size_t residual_channels = 16;
  std::size_t residual_blocks = 3;
  std::size_t pool_h = 4;
  std::size_t pool_w = 3;

  // Fixed affine input scaling (x - offset) / scale; identical for every utterance.
  double input_offset = -6.0;
  double input_scale = 6.0;

  Precision precision = Precision::f32;
  std::string pretrained_checkpoint;
  std::size_t frozen_prefix = 0;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Named tensors keyed by "<layer>.<tensor>".
using ParameterSet = std::map<std::string, Tensor>;

struct Parameter {
  std::string name;
  std::size_t layer = 0;
  ag::Var var;
};

struct LabeledFeatures {
  FeatureMatrix features;
  int label = 0;
};

class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);

  Model() = default;
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  bool has_head() const { return config_.n_classes > 0; }

  // Graph-building forward passes over a batch of equally sized inputs.
  ag::Var embed(std::span<const FeatureMatrix* const> batch) const;
  ag::Var logits(const ag::Var& embeddings) const;

  // Inference on single inputs and batches (no graph recorded).
  std::vector<double> forward_embedding(const FeatureMatrix& features) const;
  std::vector<double> forward_logits(const FeatureMatrix& features) const;
  // Row i is the embedding (or logits) of inputs[i]; evaluated in chunks.
  Tensor embed_all(std::span<const FeatureMatrix* const> inputs, std::size_t chunk = 32) const;
  Tensor logits_all(std::span<const FeatureMatrix* const> inputs, std::size_t chunk = 32) const;

  // Clears gradients, back-propagates `loss`, and returns the gradient of every
  // parameter (zeros for frozen ones).
  ParameterSet backward(const ag::Var& loss);
  void zero_grad();

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  ParameterSet parameter_values() const;
  std::size_t parameter_count() const;
  const std::vector<std::string>& layer_names() const { return layers_; }

  // Freezes the first `count` layers in layer_names() order.
  void set_frozen_prefix(std::size_t count);
  bool is_frozen(const Parameter& p) const { return p.layer < config_.frozen_prefix; }

  // Rounds every parameter to float when the precision is f32.
  void apply_precision();

 private:
  void add_parameter(const std::string& layer, const std::string& tensor, Shape shape, double bound,
                     std::uint64_t& stream);
  const ag::Var& param(const std::string& name) const;
  ag::Var input_tensor(std::span<const FeatureMatrix* const> batch) const;
  ag::Var recurrent_layer(const ag::Var& sequence, std::size_t index) const;

  ModelConfig config_;
  std::vector<std::string> layers_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// Closed-form parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

// Checkpoint container: "CSKSCKPT", u32 version, u64 config digest, u32 config
// JSON length + bytes, u32 metadata length + bytes (free-form provenance),
// u32 record count, then per record u32 name length + name, u32 rank, u32 dims,
// and row-major little-endian f32 values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path, const std::string& metadata = "");
Model load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_metadata(const std::filesystem::path& path);

enum class LoadMode { strict, partial };
// Copies stored tensors into `model`. Partial mode loads only records whose
// name and shape match and that pass `include`; strict mode requires every
// model parameter to be present with a matching shape. Returns loaded names.
std::vector<std::string> load_parameters(Model& model, const std::filesystem::path& path, LoadMode mode,
                                         const std::function<bool(const std::string&)>& include = {});
// In-memory partial transfer by name and shape; returns the names copied.
std::vector<std::string> transfer_parameters(const Model& source, Model& target,
                                             const std::function<bool(const std::string&)>& include = {});

// Configuration digest (FNV-1a over the canonical JSON form).
std::uint64_t config_digest(const ModelConfig& config);
std::string config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const std::string& json);

struct PretrainOptions {
  std::size_t epochs = 0;
  std::size_t batch_size = 16;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 1;
};

struct PretrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

// Cross-entropy training on an auxiliary task whose labels index the model's
// head. Throws NumericError on a non-finite loss.
PretrainReport pretrain_auxiliary(Model& model, std::span<const LabeledFeatures> aux_dataset,
                                  const PretrainOptions& options);

}  // namespace csks
