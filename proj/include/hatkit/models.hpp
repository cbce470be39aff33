#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "hatkit/graph.hpp"
#include "hatkit/tensor.hpp"

namespace hatkit::models {

struct ViTConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int embed_dim = 128;
  int depth = 6;
  int heads = 4;
  double mlp_ratio = 4.0;
  int num_classes = 10;
  enum class Pooling { ClassToken, Mean } pooling = Pooling::Mean;

  void validate() const;
  int tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
  int seq_len() const { return tokens() + (pooling == Pooling::ClassToken ? 1 : 0); }
  int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
};

struct CnnConfig {
  int image_size = 32;
  int channels = 3;
  std::vector<int> stage_widths{24, 48, 96};
  int blocks_per_stage = 1;
  int num_classes = 10;

  void validate() const;
};

// Ordered name -> tensor map. Order is the serialization and optimizer
// traversal order, so it must be deterministic.
template <class T>
struct ModelParams {
  std::vector<std::pair<std::string, Tensor<T>>> entries;
  std::unordered_map<std::string, size_t> index;

  void add(const std::string& name, Tensor<T> t);
  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  bool has(const std::string& name) const { return index.count(name) > 0; }
  size_t size() const { return entries.size(); }
  int64_t total_elements() const;

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [name, t] : entries) out.add(name, t.template cast<U>());
    return out;
  }
};

// Non-overlapping row-major patches, flattened channel-last within the patch.
template <class T>
Tensor<T> patchify(const Tensor<T>& images, int patch_size);

// Standalone attention used by tests: q,k,v are (N, heads, T, d).
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

template <class T>
ModelParams<T> init_vit_params(const ViTConfig& cfg, uint64_t seed);

template <class T>
ModelParams<T> init_cnn_params(const CnnConfig& cfg, uint64_t seed);

// Per-block attention matrices captured during a forward pass.
template <class T>
struct VitDiagnostics {
  std::vector<Tensor<T>> attention;  // depth x (N, heads, T, T)
};

// Both forwards take the parameters as already-bound graph leaves so the same
// code path serves training (leaves require grad) and inference.
template <class T>
struct BoundParams {
  std::vector<typename Graph<T>::Id> ids;  // aligned with ModelParams order
  const ModelParams<T>* source = nullptr;

  typename Graph<T>::Id at(const std::string& name) const;
};

template <class T>
BoundParams<T> bind_params(Graph<T>& g, const ModelParams<T>& params, bool requires_grad);

template <class T>
typename Graph<T>::Id vit_forward(Graph<T>& g, const BoundParams<T>& p, const ViTConfig& cfg,
                                  typename Graph<T>::Id images,
                                  VitDiagnostics<T>* diag = nullptr);

template <class T>
typename Graph<T>::Id cnn_forward(Graph<T>& g, const BoundParams<T>& p, const CnnConfig& cfg,
                                  typename Graph<T>::Id images);

// Model bundle: architecture tag + config + parameters.
enum class ModelKind { Vit, Cnn };

template <class T>
struct Model {
  ModelKind kind = ModelKind::Vit;
  ViTConfig vit;
  CnnConfig cnn;
  ModelParams<T> params;

  int num_classes() const { return kind == ModelKind::Vit ? vit.num_classes : cnn.num_classes; }
  typename Graph<T>::Id forward(Graph<T>& g, const BoundParams<T>& p,
                                typename Graph<T>::Id images) const {
    return kind == ModelKind::Vit ? vit_forward(g, p, vit, images)
                                  : cnn_forward(g, p, cnn, images);
  }
};

template <class T>
Model<T> make_model(ModelKind kind, const ViTConfig& vit, const CnnConfig& cnn, uint64_t seed);

// Plain (no-grad) forward convenience: logits for a batch.
template <class T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& images);

// Checkpoint container. Little-endian: magic "SHAT", u32 version=1,
// u32 tensor count, then per tensor u32 name length, name bytes, u32 rank,
// rank x u32 dims, raw f32 data; trailing u32 CRC-32 of all preceding bytes.
void save_checkpoint(const ModelParams<float>& params, const std::string& path);
ModelParams<float> load_checkpoint(const std::string& path);

}  // namespace hatkit::models
