#include "hatkit/models.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <zlib.h>

#include "hatkit/errors.hpp"
#include "hatkit/rng.hpp"

namespace hatkit::models {

void ViTConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 || depth <= 0 ||
      heads <= 0 || num_classes <= 0 || mlp_ratio <= 0.0)
    throw ValueError("vit config: all extents must be positive");
  if (image_size % patch_size != 0)
    throw ValueError("vit config: image size " + std::to_string(image_size) +
                     " not divisible by patch size " + std::to_string(patch_size));
  if (embed_dim % heads != 0)
    throw ValueError("vit config: embed dim " + std::to_string(embed_dim) +
                     " not divisible by heads " + std::to_string(heads));
}

void CnnConfig::validate() const {
  if (image_size <= 0 || channels <= 0 || num_classes <= 0 || blocks_per_stage <= 0 ||
      stage_widths.empty())
    throw ValueError("cnn config: all extents must be positive");
  for (int w : stage_widths)
    if (w <= 0) throw ValueError("cnn config: stage widths must be positive");
}

template <class T>
void ModelParams<T>::add(const std::string& name, Tensor<T> t) {
  if (index.count(name)) throw ValueError("duplicate parameter name: " + name);
  index[name] = entries.size();
  entries.emplace_back(name, std::move(t));
}

template <class T>
Tensor<T>& ModelParams<T>::at(const std::string& name) {
  auto it = index.find(name);
  if (it == index.end()) throw ValueError("unknown parameter: " + name);
  return entries[it->second].second;
}

template <class T>
const Tensor<T>& ModelParams<T>::at(const std::string& name) const {
  auto it = index.find(name);
  if (it == index.end()) throw ValueError("unknown parameter: " + name);
  return entries[it->second].second;
}

template <class T>
int64_t ModelParams<T>::total_elements() const {
  int64_t n = 0;
  for (const auto& [_, t] : entries) n += t.numel();
  return n;
}

template struct ModelParams<float>;
template struct ModelParams<double>;

template <class T>
Tensor<T> patchify(const Tensor<T>& images, int patch_size) {
  if (images.rank() != 4) throw ShapeError("patchify: expected (N,C,H,W)");
  const int64_t n = images.shape[0], c = images.shape[1], h = images.shape[2], w = images.shape[3];
  if (patch_size <= 0 || h % patch_size != 0 || w % patch_size != 0)
    throw ValueError("patchify: extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by patch size " + std::to_string(patch_size));
  const int64_t p = patch_size;
  const int64_t th = h / p, tw = w / p;
  Tensor<T> out = Tensor<T>::zeros({n, th * tw, p * p * c});
  for (int64_t img = 0; img < n; ++img) {
    for (int64_t ti = 0; ti < th; ++ti) {
      for (int64_t tj = 0; tj < tw; ++tj) {
        T* tok = out.data.data() + ((img * th * tw) + ti * tw + tj) * p * p * c;
        for (int64_t pi = 0; pi < p; ++pi)
          for (int64_t pj = 0; pj < p; ++pj)
            for (int64_t ch = 0; ch < c; ++ch)
              tok[(pi * p + pj) * c + ch] =
                  images.data[static_cast<size_t>(((img * c + ch) * h + ti * p + pi) * w +
                                                  tj * p + pj)];
      }
    }
  }
  return out;
}

template Tensor<float> patchify<float>(const Tensor<float>&, int);
template Tensor<double> patchify<double>(const Tensor<double>&, int);

template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.rank() != 4 || !same_shape(q.shape, k.shape) || !same_shape(q.shape, v.shape))
    throw ShapeError("attention: q,k,v must share an (N,heads,T,d) shape");
  Graph<T> g;
  auto qi = g.leaf(q);
  auto ki = g.leaf(k);
  auto vi = g.leaf(v);
  const double d = static_cast<double>(q.shape[3]);
  auto scores = g.scale(g.matmul(qi, ki, false, true), static_cast<T>(1.0 / std::sqrt(d)));
  auto attn = g.softmax(scores, -1);
  auto out = g.matmul(attn, vi);
  return g.value(out);
}

template Tensor<float> attention<float>(const Tensor<float>&, const Tensor<float>&,
                                        const Tensor<float>&);
template Tensor<double> attention<double>(const Tensor<double>&, const Tensor<double>&,
                                          const Tensor<double>&);

namespace {

constexpr double kInitStd = 0.02;

template <class T>
void add_linear(ModelParams<T>& p, Rng& rng, const std::string& name, int64_t in, int64_t out) {
  p.add(name + ".weight", truncated_normal<T>({in, out}, rng, kInitStd));
  p.add(name + ".bias", Tensor<T>::zeros({out}));
}

template <class T>
void add_norm(ModelParams<T>& p, const std::string& name, int64_t d) {
  p.add(name + ".gamma", Tensor<T>::full({d}, T(1)));
  p.add(name + ".beta", Tensor<T>::zeros({d}));
}

}  // namespace

template <class T>
ModelParams<T> init_vit_params(const ViTConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(mix64(seed ^ fnv1a64("vit-init")));
  ModelParams<T> p;
  const int64_t d = cfg.embed_dim;
  const int64_t patch_dim = static_cast<int64_t>(cfg.patch_size) * cfg.patch_size * cfg.channels;
  add_linear(p, rng, "patch_embed", patch_dim, d);
  p.add("pos_embed", truncated_normal<T>({cfg.seq_len(), d}, rng, kInitStd));
  if (cfg.pooling == ViTConfig::Pooling::ClassToken)
    p.add("cls_token", truncated_normal<T>({d}, rng, kInitStd));
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string blk = "block" + std::to_string(b);
    add_norm(p, blk + ".ln1", d);
    add_linear(p, rng, blk + ".attn.qkv", d, 3 * d);
    add_linear(p, rng, blk + ".attn.proj", d, d);
    add_norm(p, blk + ".ln2", d);
    add_linear(p, rng, blk + ".mlp.fc1", d, cfg.mlp_hidden());
    add_linear(p, rng, blk + ".mlp.fc2", cfg.mlp_hidden(), d);
  }
  add_norm(p, "final_ln", d);
  add_linear(p, rng, "head", d, cfg.num_classes);
  return p;
}

template ModelParams<float> init_vit_params<float>(const ViTConfig&, uint64_t);
template ModelParams<double> init_vit_params<double>(const ViTConfig&, uint64_t);

template <class T>
ModelParams<T> init_cnn_params(const CnnConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(mix64(seed ^ fnv1a64("cnn-init")));
  ModelParams<T> p;
  const int w0 = cfg.stage_widths[0];
  p.add("stem.weight", truncated_normal<T>({w0, cfg.channels, 3, 3}, rng, kInitStd));
  add_norm(p, "stem.norm", w0);
  for (size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s);
    const int width = cfg.stage_widths[s];
    if (s > 0) {
      p.add(stage + ".down.weight",
            truncated_normal<T>({width, cfg.stage_widths[s - 1], 3, 3}, rng, kInitStd));
      add_norm(p, stage + ".down.norm", width);
    }
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string blk = stage + ".block" + std::to_string(b);
      p.add(blk + ".conv1.weight", truncated_normal<T>({width, width, 3, 3}, rng, kInitStd));
      add_norm(p, blk + ".norm1", width);
      p.add(blk + ".conv2.weight", truncated_normal<T>({width, width, 3, 3}, rng, kInitStd));
      add_norm(p, blk + ".norm2", width);
    }
  }
  add_linear(p, rng, "head", cfg.stage_widths.back(), cfg.num_classes);
  return p;
}

template ModelParams<float> init_cnn_params<float>(const CnnConfig&, uint64_t);
template ModelParams<double> init_cnn_params<double>(const CnnConfig&, uint64_t);

template <class T>
typename Graph<T>::Id BoundParams<T>::at(const std::string& name) const {
  if (!source) throw Error("bound params not initialized");
  auto it = source->index.find(name);
  if (it == source->index.end()) throw ValueError("unknown parameter: " + name);
  return ids[it->second];
}

template struct BoundParams<float>;
template struct BoundParams<double>;

template <class T>
BoundParams<T> bind_params(Graph<T>& g, const ModelParams<T>& params, bool requires_grad) {
  BoundParams<T> bound;
  bound.source = &params;
  bound.ids.reserve(params.entries.size());
  for (const auto& [name, t] : params.entries) bound.ids.push_back(g.leaf(t.with_grad(requires_grad)));
  return bound;
}

template BoundParams<float> bind_params<float>(Graph<float>&, const ModelParams<float>&, bool);
template BoundParams<double> bind_params<double>(Graph<double>&, const ModelParams<double>&, bool);

namespace {

constexpr double kLnEps = 1e-6;

// x: (rows, in) @ weight (in, out) + bias.
template <class T>
typename Graph<T>::Id linear(Graph<T>& g, const BoundParams<T>& p, const std::string& name,
                             typename Graph<T>::Id x) {
  auto y = g.matmul(x, p.at(name + ".weight"));
  return g.add_broadcast(y, p.at(name + ".bias"));
}

template <class T>
typename Graph<T>::Id norm(Graph<T>& g, const BoundParams<T>& p, const std::string& name,
                           typename Graph<T>::Id x) {
  return g.layer_norm(x, p.at(name + ".gamma"), p.at(name + ".beta"), kLnEps);
}

}  // namespace

template <class T>
typename Graph<T>::Id vit_forward(Graph<T>& g, const BoundParams<T>& p, const ViTConfig& cfg,
                                  typename Graph<T>::Id images, VitDiagnostics<T>* diag) {
  cfg.validate();
  const Shape& is = g.value(images).shape;
  if (is.size() != 4 || is[1] != cfg.channels || is[2] != cfg.image_size || is[3] != cfg.image_size)
    throw ShapeError("vit_forward: batch shape " + shape_str(is) + " does not match config");
  const int64_t n = is[0];
  const int64_t p_sz = cfg.patch_size;
  const int64_t grid = cfg.image_size / cfg.patch_size;
  const int64_t t_img = grid * grid;
  const int64_t d = cfg.embed_dim;
  const int64_t heads = cfg.heads;
  const int64_t dh = d / heads;

  // patchify: (N,C,H,W) -> (N, T, P*P*C), channel-last within the patch
  auto x = g.reshape(images, {n, cfg.channels, grid, p_sz, grid, p_sz});
  x = g.permute(x, {0, 2, 4, 3, 5, 1});
  x = g.reshape(x, {n * t_img, p_sz * p_sz * cfg.channels});
  x = linear(g, p, "patch_embed", x);  // (N*T, D)

  int64_t t_seq = t_img;
  if (cfg.pooling == ViTConfig::Pooling::ClassToken) {
    t_seq = t_img + 1;
    // broadcast the class token across the batch by adding it to zeros
    auto zeros = g.leaf(Tensor<T>::zeros({n, 1, d}));
    auto cls_rows = g.add_broadcast(zeros, p.at("cls_token"));
    x = g.concat(cls_rows, g.reshape(x, {n, t_img, d}), 1);
    x = g.reshape(x, {n * t_seq, d});
  }
  x = g.reshape(x, {n, t_seq, d});
  x = g.add_broadcast(x, p.at("pos_embed"));

  for (int b = 0; b < cfg.depth; ++b) {
    const std::string blk = "block" + std::to_string(b);
    // pre-norm MHSA
    auto h = norm(g, p, blk + ".ln1", x);
    auto qkv = linear(g, p, blk + ".attn.qkv", g.reshape(h, {n * t_seq, d}));
    qkv = g.reshape(qkv, {n, t_seq, 3, heads, dh});
    qkv = g.permute(qkv, {2, 0, 3, 1, 4});  // (3, N, heads, T, dh)
    auto q = g.reshape(g.narrow(qkv, 0, 0, 1), {n, heads, t_seq, dh});
    auto k = g.reshape(g.narrow(qkv, 0, 1, 1), {n, heads, t_seq, dh});
    auto v = g.reshape(g.narrow(qkv, 0, 2, 1), {n, heads, t_seq, dh});
    auto scores = g.scale(g.matmul(q, k, false, true),
                          static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto attn = g.softmax(scores, -1);
    if (diag) diag->attention.push_back(g.value(attn));
    auto ctx = g.matmul(attn, v);                 // (N, heads, T, dh)
    ctx = g.permute(ctx, {0, 2, 1, 3});           // (N, T, heads, dh)
    ctx = g.reshape(ctx, {n * t_seq, d});
    auto proj = linear(g, p, blk + ".attn.proj", ctx);
    x = g.add(x, g.reshape(proj, {n, t_seq, d}));
    // pre-norm MLP
    auto h2 = norm(g, p, blk + ".ln2", x);
    auto f1 = linear(g, p, blk + ".mlp.fc1", g.reshape(h2, {n * t_seq, d}));
    auto f2 = linear(g, p, blk + ".mlp.fc2", g.gelu(f1));
    x = g.add(x, g.reshape(f2, {n, t_seq, d}));
  }

  x = norm(g, p, "final_ln", x);
  typename Graph<T>::Id pooled;
  if (cfg.pooling == ViTConfig::Pooling::ClassToken) {
    pooled = g.reshape(g.narrow(x, 1, 0, 1), {n, d});
  } else {
    pooled = g.mean_axis(x, 1);
  }
  return linear(g, p, "head", pooled);
}

template typename Graph<float>::Id vit_forward<float>(Graph<float>&, const BoundParams<float>&,
                                                      const ViTConfig&, Graph<float>::Id,
                                                      VitDiagnostics<float>*);
template typename Graph<double>::Id vit_forward<double>(Graph<double>&, const BoundParams<double>&,
                                                        const ViTConfig&, Graph<double>::Id,
                                                        VitDiagnostics<double>*);

namespace {

// per-channel spatial normalization keeps the conv stack shift-equivariant
template <class T>
typename Graph<T>::Id channel_norm(Graph<T>& g, const BoundParams<T>& p, const std::string& name,
                                   typename Graph<T>::Id x) {
  return g.instance_norm(x, p.at(name + ".gamma"), p.at(name + ".beta"), kLnEps);
}

}  // namespace

template <class T>
typename Graph<T>::Id cnn_forward(Graph<T>& g, const BoundParams<T>& p, const CnnConfig& cfg,
                                  typename Graph<T>::Id images) {
  cfg.validate();
  const Shape& is = g.value(images).shape;
  if (is.size() != 4 || is[1] != cfg.channels || is[2] != cfg.image_size || is[3] != cfg.image_size)
    throw ShapeError("cnn_forward: batch shape " + shape_str(is) + " does not match config");
  const int64_t n = is[0];
  auto x = g.conv2d(images, p.at("stem.weight"), 1, 1);
  x = g.relu(channel_norm(g, p, "stem.norm", x));
  for (size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    const std::string stage = "stage" + std::to_string(s);
    if (s > 0) {
      x = g.conv2d(x, p.at(stage + ".down.weight"), 2, 1);
      x = g.relu(channel_norm(g, p, stage + ".down.norm", x));
    }
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string blk = stage + ".block" + std::to_string(b);
      auto h = g.conv2d(x, p.at(blk + ".conv1.weight"), 1, 1);
      h = g.relu(channel_norm(g, p, blk + ".norm1", h));
      h = g.conv2d(h, p.at(blk + ".conv2.weight"), 1, 1);
      h = channel_norm(g, p, blk + ".norm2", h);
      x = g.relu(g.add(x, h));
    }
  }
  auto pooled = g.mean_axis(g.mean_axis(x, 3), 2);  // (N, C)
  auto y = g.matmul(pooled, p.at("head.weight"));
  (void)n;
  return g.add_broadcast(y, p.at("head.bias"));
}

template typename Graph<float>::Id cnn_forward<float>(Graph<float>&, const BoundParams<float>&,
                                                      const CnnConfig&, Graph<float>::Id);
template typename Graph<double>::Id cnn_forward<double>(Graph<double>&, const BoundParams<double>&,
                                                        const CnnConfig&, Graph<double>::Id);

template <class T>
Model<T> make_model(ModelKind kind, const ViTConfig& vit, const CnnConfig& cnn, uint64_t seed) {
  Model<T> m;
  m.kind = kind;
  m.vit = vit;
  m.cnn = cnn;
  m.params = (kind == ModelKind::Vit) ? init_vit_params<T>(vit, seed) : init_cnn_params<T>(cnn, seed);
  return m;
}

template Model<float> make_model<float>(ModelKind, const ViTConfig&, const CnnConfig&, uint64_t);
template Model<double> make_model<double>(ModelKind, const ViTConfig&, const CnnConfig&, uint64_t);

template <class T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& images) {
  Graph<T> g;
  auto bound = bind_params(g, model.params, /*requires_grad=*/false);
  auto in = g.leaf(images.with_grad(false));
  auto logits = model.forward(g, bound, in);
  return g.value(logits);
}

template Tensor<float> forward_logits<float>(const Model<float>&, const Tensor<float>&);
template Tensor<double> forward_logits<double>(const Model<double>&, const Tensor<double>&);

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[4] = {'S', 'H', 'A', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
               static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  buf.append(b, 4);
}

uint32_t get_u32(const std::string& buf, size_t& pos, const char* what) {
  if (pos + 4 > buf.size())
    throw FormatError(FormatError::Kind::Truncated,
                      std::string("checkpoint truncated while reading ") + what);
  uint32_t v = static_cast<uint8_t>(buf[pos]) | (static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + 1])) << 8) |
               (static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + 2])) << 16) |
               (static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + 3])) << 24);
  pos += 4;
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams<float>& params, const std::string& path) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<uint32_t>(params.entries.size()));
  for (const auto& [name, t] : params.entries) {
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf.append(name);
    put_u32(buf, static_cast<uint32_t>(t.rank()));
    for (int64_t dmn : t.shape) put_u32(buf, static_cast<uint32_t>(dmn));
    static_assert(sizeof(float) == 4);
    // x86 is little-endian; serialize floats bytewise to keep the format fixed
    for (float v : t.data) {
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(buf, bits);
    }
  }
  uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put_u32(buf, crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw Error("short write to checkpoint: " + path);
}

ModelParams<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw FormatError(FormatError::Kind::BadMagic, "checkpoint has bad magic bytes");
  if (buf.size() < 12 + 4)
    throw FormatError(FormatError::Kind::Truncated, "checkpoint shorter than its header");
  uint32_t stored_crc;
  {
    size_t tail = buf.size() - 4;
    stored_crc = static_cast<uint8_t>(buf[tail]) |
                 (static_cast<uint32_t>(static_cast<uint8_t>(buf[tail + 1])) << 8) |
                 (static_cast<uint32_t>(static_cast<uint8_t>(buf[tail + 2])) << 16) |
                 (static_cast<uint32_t>(static_cast<uint8_t>(buf[tail + 3])) << 24);
  }
  uint32_t actual_crc = static_cast<uint32_t>(crc32(
      0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
  if (stored_crc != actual_crc)
    throw FormatError(FormatError::Kind::CrcMismatch, "checkpoint CRC-32 mismatch");

  size_t pos = 4;
  uint32_t version = get_u32(buf, pos, "version");
  if (version != kVersion)
    throw FormatError(FormatError::Kind::BadVersion,
                      "unsupported checkpoint version " + std::to_string(version));
  uint32_t count = get_u32(buf, pos, "tensor count");
  const size_t payload_end = buf.size() - 4;
  ModelParams<float> params;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = get_u32(buf, pos, "name length");
    if (pos + name_len > payload_end)
      throw FormatError(FormatError::Kind::Truncated, "checkpoint truncated inside a name");
    std::string name = buf.substr(pos, name_len);
    pos += name_len;
    uint32_t rank = get_u32(buf, pos, "rank");
    if (rank > 8) throw FormatError(FormatError::Kind::Malformed, "implausible tensor rank");
    Shape shape;
    uint64_t numel = 1;
    for (uint32_t r = 0; r < rank; ++r) {
      uint32_t dmn = get_u32(buf, pos, "dimension");
      if (dmn == 0) throw FormatError(FormatError::Kind::Malformed, "zero extent in checkpoint");
      shape.push_back(static_cast<int64_t>(dmn));
      numel *= dmn;
      if (numel > (1ULL << 32))
        throw FormatError(FormatError::Kind::Malformed, "implausible tensor size");
    }
    if (pos + numel * 4 > payload_end)
      throw FormatError(FormatError::Kind::Truncated,
                        "declared tensor length exceeds the file size");
    std::vector<float> data(numel);
    for (uint64_t e = 0; e < numel; ++e) {
      uint32_t bits = get_u32(buf, pos, "tensor data");
      float v;
      std::memcpy(&v, &bits, 4);
      data[e] = v;
    }
    if (params.has(name))
      throw FormatError(FormatError::Kind::DuplicateName,
                        "duplicate tensor name in checkpoint: " + name);
    params.add(name, Tensor<float>(std::move(shape), std::move(data)));
  }
  if (pos != payload_end)
    throw FormatError(FormatError::Kind::Malformed, "trailing bytes after the last tensor");
  return params;
}

}  // namespace hatkit::models
