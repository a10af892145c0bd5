#pragma once

// Toy model families with hand-written forward and reverse passes.
//
//   mlp    : x -> tanh(x W0 + b0) -> ... -> h W_L + b_L          (class logits)
//   tinylm : token + position embedding, pre-norm causal transformer blocks
//            (LN -> multi-head attention -> residual, LN -> GELU MLP -> residual),
//            final LN and an untied output head                  (next-token logits)
//
// Parameters live in one flat double vector; the layout (names, shapes,
// offsets) is a pure function of the ModelConfig.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ilu/error.hpp"
#include "ilu/numcore.hpp"

namespace ilu {

enum class ModelFamily { kMlp, kTinyLm };

inline std::string to_string(ModelFamily f) { return f == ModelFamily::kMlp ? "mlp" : "tinylm"; }

inline ModelFamily parse_model_family(const std::string& s) {
  if (s == "mlp") return ModelFamily::kMlp;
  if (s == "tinylm") return ModelFamily::kTinyLm;
  throw ArgumentError("unknown model family '" + s + "'");
}

struct ModelConfig {
  ModelFamily family = ModelFamily::kTinyLm;
  std::size_t input_dim = 64;  // vocabulary size for tinylm, feature count for mlp
  std::size_t hidden_dim = 32;
  std::size_t layers = 2;      // transformer blocks (tinylm) or hidden layers (mlp)
  std::size_t heads = 4;       // tinylm only
  std::size_t context = 32;    // tinylm only
  std::size_t classes = 4;     // mlp only

  bool is_lm() const noexcept { return family == ModelFamily::kTinyLm; }
  std::size_t output_dim() const noexcept { return is_lm() ? input_dim : classes; }
  std::size_t head_dim() const noexcept { return hidden_dim / heads; }

  void validate() const {
    ILU_REQUIRE(input_dim >= 1 && hidden_dim >= 1, "model dims must be >= 1");
    if (is_lm()) {
      ILU_REQUIRE(input_dim >= 2, "tinylm vocabulary must have at least 2 tokens");
      ILU_REQUIRE(layers >= 1, "tinylm needs at least one block");
      ILU_REQUIRE(heads >= 1 && context >= 1, "tinylm heads and context must be >= 1");
      ILU_REQUIRE(hidden_dim % heads == 0, "hidden dim must be divisible by head count");
    } else {
      // layers == 0 is a plain linear classifier.
      ILU_REQUIRE(classes >= 2, "mlp needs at least two classes");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"family", to_string(c.family)}, {"input_dim", c.input_dim},
                     {"hidden_dim", c.hidden_dim},    {"layers", c.layers},
                     {"heads", c.heads},              {"context", c.context},
                     {"classes", c.classes}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.family = parse_model_family(j.at("family").get<std::string>());
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.context = j.at("context").get<std::size_t>();
  c.classes = j.at("classes").get<std::size_t>();
}

struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::size_t fan_in = 0;  // 0 for gains/biases (not randomly initialized)
  double init_value = 0.0;
};

struct ParamLayout {
  ModelConfig config;
  std::vector<ParamSpec> specs;
  std::size_t total = 0;

  const ParamSpec& find(const std::string& name) const {
    for (const auto& s : specs)
      if (s.name == name) return s;
    throw ArgumentError("no parameter named '" + name + "'");
  }
};

namespace detail {

inline void add_param(ParamLayout& layout, std::string name, std::vector<std::size_t> shape,
                      std::size_t fan_in, double init_value = 0.0) {
  ParamSpec s;
  s.name = std::move(name);
  s.shape = std::move(shape);
  s.size = 1;
  for (auto d : s.shape) s.size *= d;
  s.offset = layout.total;
  s.fan_in = fan_in;
  s.init_value = init_value;
  layout.total += s.size;
  layout.specs.push_back(std::move(s));
}

// Fixed positions of tinylm tensors within ParamLayout::specs.
namespace lm {
inline constexpr std::size_t kTokEmb = 0, kPosEmb = 1, kFirstBlock = 2, kPerBlock = 12;
enum BlockParam : std::size_t {
  kLn1Gain, kLn1Bias, kQkvW, kQkvB, kAttnOutW, kAttnOutB,
  kLn2Gain, kLn2Bias, kFcW, kFcB, kProjW, kProjB
};
inline std::size_t block(std::size_t layer, BlockParam p) { return kFirstBlock + layer * kPerBlock + p; }
inline std::size_t final_index(std::size_t layers, std::size_t k) {
  return kFirstBlock + layers * kPerBlock + k;  // 0 lnf gain, 1 lnf bias, 2 head W, 3 head b
}
}  // namespace lm

}  // namespace detail

inline std::shared_ptr<const ParamLayout> make_layout(const ModelConfig& config) {
  config.validate();
  auto layout = std::make_shared<ParamLayout>();
  layout->config = config;
  const std::size_t d = config.hidden_dim;
  if (config.is_lm()) {
    const std::size_t v = config.input_dim;
    detail::add_param(*layout, "tok_emb", {v, d}, v);
    detail::add_param(*layout, "pos_emb", {config.context, d}, config.context);
    for (std::size_t l = 0; l < config.layers; ++l) {
      const std::string p = "blocks." + std::to_string(l) + ".";
      detail::add_param(*layout, p + "ln1.gain", {d}, 0, 1.0);
      detail::add_param(*layout, p + "ln1.bias", {d}, 0);
      detail::add_param(*layout, p + "attn.qkv.weight", {d, 3 * d}, d);
      detail::add_param(*layout, p + "attn.qkv.bias", {3 * d}, 0);
      detail::add_param(*layout, p + "attn.out.weight", {d, d}, d);
      detail::add_param(*layout, p + "attn.out.bias", {d}, 0);
      detail::add_param(*layout, p + "ln2.gain", {d}, 0, 1.0);
      detail::add_param(*layout, p + "ln2.bias", {d}, 0);
      detail::add_param(*layout, p + "mlp.fc.weight", {d, 4 * d}, d);
      detail::add_param(*layout, p + "mlp.fc.bias", {4 * d}, 0);
      detail::add_param(*layout, p + "mlp.proj.weight", {4 * d, d}, 4 * d);
      detail::add_param(*layout, p + "mlp.proj.bias", {d}, 0);
    }
    detail::add_param(*layout, "lnf.gain", {d}, 0, 1.0);
    detail::add_param(*layout, "lnf.bias", {d}, 0);
    detail::add_param(*layout, "head.weight", {d, v}, d);
    detail::add_param(*layout, "head.bias", {v}, 0);
  } else {
    std::size_t in = config.input_dim;
    for (std::size_t l = 0; l <= config.layers; ++l) {
      const std::size_t out = l == config.layers ? config.classes : d;
      detail::add_param(*layout, "linear." + std::to_string(l) + ".weight", {in, out}, in);
      detail::add_param(*layout, "linear." + std::to_string(l) + ".bias", {out}, 0);
      in = out;
    }
  }
  return layout;
}

/// Closed-form tinylm parameter count:
/// V d + T d + L (12 d^2 + 13 d) + 2 d + d V + V.
inline std::size_t tinylm_parameter_count(std::size_t vocab, std::size_t hidden,
                                          std::size_t layers, std::size_t context) {
  return vocab * hidden + context * hidden + layers * (12 * hidden * hidden + 13 * hidden) +
         2 * hidden + hidden * vocab + vocab;
}

// Flat parameter set (also used for gradients, which share the layout).
class ParameterVector {
 public:
  ParameterVector() = default;
  explicit ParameterVector(std::shared_ptr<const ParamLayout> layout)
      : layout_(std::move(layout)), values_(layout_->total, 0.0) {}
  ParameterVector(std::shared_ptr<const ParamLayout> layout, std::span<const double> values)
      : layout_(std::move(layout)), values_(values.begin(), values.end()) {
    if (values_.size() != layout_->total) {
      throw ArgumentError("flat vector length " + std::to_string(values_.size()) +
                          " does not match parameter count " + std::to_string(layout_->total));
    }
  }

  const ParamLayout& layout() const { return *layout_; }
  const std::shared_ptr<const ParamLayout>& layout_ptr() const noexcept { return layout_; }
  const ModelConfig& config() const { return layout_->config; }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  std::span<double> tensor(std::size_t index) {
    const auto& s = layout_->specs.at(index);
    return {values_.data() + s.offset, s.size};
  }
  std::span<const double> tensor(std::size_t index) const {
    const auto& s = layout_->specs.at(index);
    return {values_.data() + s.offset, s.size};
  }
  std::span<const double> tensor(const std::string& name) const {
    const auto& s = layout_->find(name);
    return {values_.data() + s.offset, s.size};
  }
  std::span<double> tensor(const std::string& name) {
    const auto& s = layout_->find(name);
    return {values_.data() + s.offset, s.size};
  }

  std::vector<double> flatten() const { return {values_.begin(), values_.end()}; }

  ParameterVector zeros_like() const { return ParameterVector(layout_); }

  bool same_layout(const ParameterVector& other) const {
    return layout_ && other.layout_ && layout_->config == other.layout_->config;
  }

  ParameterVector& operator+=(const ParameterVector& other) {
    require_same(other);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
    return *this;
  }
  ParameterVector& add_scaled(const ParameterVector& other, double scale) {
    require_same(other);
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
    return *this;
  }
  ParameterVector& operator*=(double scale) {
    for (double& v : values_) v *= scale;
    return *this;
  }

  friend bool operator==(const ParameterVector& a, const ParameterVector& b) {
    return a.same_layout(b) && a.values_ == b.values_;
  }

 private:
  void require_same(const ParameterVector& other) const {
    if (!same_layout(other)) throw ArgumentError("parameter layouts differ");
  }

  std::shared_ptr<const ParamLayout> layout_;
  DoubleBuffer values_;
};

inline ParameterVector unflatten(const ModelConfig& config, std::span<const double> flat) {
  return ParameterVector(make_layout(config), flat);
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; biases zero, gains one.
inline ParameterVector init_model(const ModelConfig& config, RngStream rng) {
  ParameterVector params(make_layout(config));
  for (std::size_t i = 0; i < params.layout().specs.size(); ++i) {
    const auto& spec = params.layout().specs[i];
    auto t = params.tensor(i);
    if (spec.fan_in == 0) {
      std::fill(t.begin(), t.end(), spec.init_value);
    } else {
      const double a = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (double& v : t) v = rng.uniform(-a, a);
    }
  }
  return params;
}

// A batch is `examples` rows of `seq_len` positions (seq_len == 1 for mlp).
// Logits and targets are laid out with one row per position.
struct Batch {
  std::size_t examples = 0;
  std::size_t seq_len = 1;
  std::vector<std::int32_t> tokens;  // tinylm: examples * seq_len ids
  Tensor features;                   // mlp: [examples x input_dim]
  std::vector<std::int32_t> targets; // examples * seq_len, kIgnoreTarget where unsupervised

  std::size_t rows() const noexcept { return examples * seq_len; }
};

/// Hidden states by layer index, each [rows x hidden_dim]. For tinylm layer l
/// is the residual stream after block l; for mlp it is hidden layer l after tanh.
struct ActivationTrace {
  std::map<std::size_t, Tensor> layers;
};

using TraceGrad = std::map<std::size_t, Tensor>;

struct ForwardOutput {
  Tensor logits;
  std::optional<ActivationTrace> trace;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMat = Eigen::Map<const RowMat>;
using MMat = Eigen::Map<RowMat>;
using CRow = Eigen::Map<const Eigen::RowVectorXd>;
using MRow = Eigen::Map<Eigen::RowVectorXd>;

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)

inline CMat cmat(const ParameterVector& p, std::size_t index) {
  const auto& s = p.layout().specs[index];
  return CMat(p.values().data() + s.offset, static_cast<Eigen::Index>(s.shape[0]),
              static_cast<Eigen::Index>(s.shape[1]));
}
inline CRow crow(const ParameterVector& p, std::size_t index) {
  const auto& s = p.layout().specs[index];
  return CRow(p.values().data() + s.offset, static_cast<Eigen::Index>(s.size));
}
inline MMat mmat(ParameterVector& p, std::size_t index) {
  const auto& s = p.layout().specs[index];
  return MMat(p.values().data() + s.offset, static_cast<Eigen::Index>(s.shape[0]),
              static_cast<Eigen::Index>(s.shape[1]));
}
inline MRow mrow(ParameterVector& p, std::size_t index) {
  const auto& s = p.layout().specs[index];
  return MRow(p.values().data() + s.offset, static_cast<Eigen::Index>(s.size));
}

struct LayerNormCache {
  RowMat xhat;
  Eigen::VectorXd rstd;
};

inline RowMat layer_norm(const RowMat& x, const CRow& gain, const CRow& bias,
                         LayerNormCache& cache) {
  const Eigen::VectorXd mean = x.rowwise().mean();
  RowMat centered = x.colwise() - mean;
  cache.rstd = (centered.array().square().rowwise().mean() + kLayerNormEps).rsqrt().matrix();
  cache.xhat = (centered.array().colwise() * cache.rstd.array()).matrix();
  RowMat y = cache.xhat.array().rowwise() * gain.array();
  y.array().rowwise() += bias.array();
  return y;
}

inline RowMat layer_norm_backward(const RowMat& dy, const CRow& gain, const LayerNormCache& cache,
                                  MRow dgain, MRow dbias) {
  dgain += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const RowMat dxhat = dy.array().rowwise() * gain.array();
  const Eigen::VectorXd m1 = dxhat.rowwise().mean();
  const Eigen::VectorXd m2 = (dxhat.array() * cache.xhat.array()).rowwise().mean();
  RowMat dx = (dxhat.array().colwise() - m1.array()) - cache.xhat.array().colwise() * m2.array();
  dx.array().colwise() *= cache.rstd.array();
  return dx;
}

// tanh-approximated GELU. Returns the activation and stores the inner tanh,
// which the reverse pass reuses. tanh(u) = 1 - 2 / (exp(2u) + 1) keeps the
// evaluation on Eigen's vectorized exp.
inline RowMat gelu(const RowMat& x, RowMat& tanh_out) {
  const auto u = kGeluK * (x.array() + 0.044715 * x.array().cube());
  tanh_out = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
  return (0.5 * x.array() * (1.0 + tanh_out.array())).matrix();
}
inline RowMat gelu_grad(const RowMat& x, const RowMat& t) {
  return (0.5 * (1.0 + t.array()) + 0.5 * x.array() * (1.0 - t.array().square()) * kGeluK *
                                        (1.0 + 3.0 * 0.044715 * x.array().square()))
      .matrix();
}

struct LmBlockTape {
  RowMat x_in, ln1, qkv, attn_cat, x_mid, ln2, fc, fc_tanh, act, x_out;
  LayerNormCache ln1_cache, ln2_cache;
  std::vector<double> probs;  // [example][head][T][T], zero above the diagonal
};

}  // namespace detail

// Everything recorded by a forward pass that the reverse pass needs.
struct Tape {
  ModelConfig config;
  std::size_t examples = 0;
  std::size_t seq_len = 1;
  std::vector<std::int32_t> tokens;
  detail::RowMat input;                 // mlp input
  std::vector<detail::RowMat> hidden;   // mlp post-activation per hidden layer
  std::vector<detail::LmBlockTape> blocks;
  detail::RowMat lnf;
  detail::LayerNormCache lnf_cache;
  Tensor logits;

  std::size_t rows() const noexcept { return examples * seq_len; }
  const detail::RowMat& hidden_state(std::size_t layer) const {
    return config.is_lm() ? blocks.at(layer).x_out : hidden.at(layer);
  }
};

namespace detail {

inline Tensor to_tensor(const RowMat& m) {
  Tensor t = Tensor::matrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  MMat(t.data().data(), m.rows(), m.cols()) = m;
  return t;
}

inline void check_batch(const ModelConfig& c, const Batch& batch) {
  ILU_REQUIRE(batch.examples > 0, "empty batch");
  if (c.is_lm()) {
    ILU_REQUIRE(batch.seq_len >= 1 && batch.seq_len <= c.context,
                "sequence length " + std::to_string(batch.seq_len) + " exceeds context " +
                    std::to_string(c.context));
    ILU_REQUIRE(batch.tokens.size() == batch.rows(), "token count does not match batch shape");
    for (auto t : batch.tokens) {
      ILU_REQUIRE(t >= 0 && static_cast<std::size_t>(t) < c.input_dim,
                  "token id " + std::to_string(t) + " outside vocabulary");
    }
  } else {
    ILU_REQUIRE(batch.seq_len == 1, "mlp batches have seq_len 1");
    ILU_REQUIRE(batch.features.rank() == 2 && batch.features.rows() == batch.examples &&
                    batch.features.cols() == c.input_dim,
                "mlp feature tensor must be [examples x input_dim]");
  }
}

inline void record_mlp(const ParameterVector& p, const Batch& batch, Tape& tape) {
  const auto& c = p.config();
  const auto n = static_cast<Eigen::Index>(batch.examples);
  tape.input = CMat(batch.features.data().data(), n, static_cast<Eigen::Index>(c.input_dim));
  const RowMat* x = &tape.input;
  tape.hidden.resize(c.layers);
  for (std::size_t l = 0; l < c.layers; ++l) {
    RowMat z = (*x) * cmat(p, 2 * l);
    z.rowwise() += crow(p, 2 * l + 1);
    tape.hidden[l] = z.array().tanh();
    x = &tape.hidden[l];
  }
  RowMat logits = (*x) * cmat(p, 2 * c.layers);
  logits.rowwise() += crow(p, 2 * c.layers + 1);
  tape.logits = to_tensor(logits);
}

inline void record_lm(const ParameterVector& p, const Batch& batch, Tape& tape) {
  namespace L = detail::lm;
  const auto& c = p.config();
  const auto B = static_cast<Eigen::Index>(batch.examples);
  const auto T = static_cast<Eigen::Index>(batch.seq_len);
  const auto N = B * T;
  const auto d = static_cast<Eigen::Index>(c.hidden_dim);
  const auto H = static_cast<Eigen::Index>(c.heads);
  const auto dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  tape.tokens = batch.tokens;

  const CMat tok = cmat(p, L::kTokEmb);
  const CMat pos = cmat(p, L::kPosEmb);
  RowMat x(N, d);
  for (Eigen::Index i = 0; i < N; ++i) x.row(i) = tok.row(batch.tokens[i]) + pos.row(i % T);

  tape.blocks.resize(c.layers);
  for (std::size_t l = 0; l < c.layers; ++l) {
    auto& bt = tape.blocks[l];
    bt.x_in = std::move(x);
    bt.ln1 = layer_norm(bt.x_in, crow(p, L::block(l, L::kLn1Gain)), crow(p, L::block(l, L::kLn1Bias)),
                        bt.ln1_cache);
    bt.qkv = bt.ln1 * cmat(p, L::block(l, L::kQkvW));
    bt.qkv.rowwise() += crow(p, L::block(l, L::kQkvB));
    bt.attn_cat.setZero(N, d);
    bt.probs.assign(static_cast<std::size_t>(B * H * T * T), 0.0);
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index h = 0; h < H; ++h) {
        const double* qkv = bt.qkv.data() + b * T * 3 * d;
        double* prob = bt.probs.data() + (b * H + h) * T * T;
        double* out = bt.attn_cat.data() + b * T * d + h * dh;
        for (Eigen::Index i = 0; i < T; ++i) {
          const double* q = qkv + i * 3 * d + h * dh;
          double* row = prob + i * T;
          double m = -std::numeric_limits<double>::infinity();
          for (Eigen::Index j = 0; j <= i; ++j) {
            const double* k = qkv + j * 3 * d + d + h * dh;
            double acc = 0.0;
            for (Eigen::Index e = 0; e < dh; ++e) acc += q[e] * k[e];
            row[j] = acc * scale;
            m = std::max(m, row[j]);
          }
          double sum = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            row[j] = std::exp(row[j] - m);
            sum += row[j];
          }
          const double inv = 1.0 / sum;
          double* o = out + i * d;
          for (Eigen::Index j = 0; j <= i; ++j) {
            row[j] *= inv;
            const double* v = qkv + j * 3 * d + 2 * d + h * dh;
            for (Eigen::Index e = 0; e < dh; ++e) o[e] += row[j] * v[e];
          }
        }
      }
    }
    RowMat attn_out = bt.attn_cat * cmat(p, L::block(l, L::kAttnOutW));
    attn_out.rowwise() += crow(p, L::block(l, L::kAttnOutB));
    bt.x_mid = bt.x_in + attn_out;
    bt.ln2 = layer_norm(bt.x_mid, crow(p, L::block(l, L::kLn2Gain)), crow(p, L::block(l, L::kLn2Bias)),
                        bt.ln2_cache);
    bt.fc = bt.ln2 * cmat(p, L::block(l, L::kFcW));
    bt.fc.rowwise() += crow(p, L::block(l, L::kFcB));
    bt.act = gelu(bt.fc, bt.fc_tanh);
    RowMat mlp_out = bt.act * cmat(p, L::block(l, L::kProjW));
    mlp_out.rowwise() += crow(p, L::block(l, L::kProjB));
    bt.x_out = bt.x_mid + mlp_out;
    x = bt.x_out;
  }
  const std::size_t nl = c.layers;
  tape.lnf = layer_norm(x, crow(p, L::final_index(nl, 0)), crow(p, L::final_index(nl, 1)),
                        tape.lnf_cache);
  RowMat logits = tape.lnf * cmat(p, L::final_index(nl, 2));
  logits.rowwise() += crow(p, L::final_index(nl, 3));
  tape.logits = to_tensor(logits);
}

inline void backward_mlp(const ParameterVector& p, const Tape& tape, const RowMat* dlogits,
                         const TraceGrad& trace_grad, ParameterVector& grad) {
  const auto& c = p.config();
  const auto n = static_cast<Eigen::Index>(tape.examples);
  RowMat dh;
  if (dlogits) {
    const RowMat& top = c.layers == 0 ? tape.input : tape.hidden.back();
    mmat(grad, 2 * c.layers).noalias() += top.transpose() * (*dlogits);
    mrow(grad, 2 * c.layers + 1) += dlogits->colwise().sum();
    if (c.layers > 0) dh = (*dlogits) * cmat(p, 2 * c.layers).transpose();
  }
  for (std::size_t li = c.layers; li-- > 0;) {
    if (auto it = trace_grad.find(li); it != trace_grad.end()) {
      const CMat tg(it->second.data().data(), n, static_cast<Eigen::Index>(c.hidden_dim));
      if (dh.size() == 0) dh = tg;
      else dh += tg;
    }
    if (dh.size() == 0) continue;
    RowMat dz = dh.array() * (1.0 - tape.hidden[li].array().square());
    const RowMat& in = li == 0 ? tape.input : tape.hidden[li - 1];
    mmat(grad, 2 * li).noalias() += in.transpose() * dz;
    mrow(grad, 2 * li + 1) += dz.colwise().sum();
    if (li > 0) dh = dz * cmat(p, 2 * li).transpose();
  }
}

inline void backward_lm(const ParameterVector& p, const Tape& tape, const RowMat* dlogits,
                        const TraceGrad& trace_grad, ParameterVector& grad) {
  namespace L = detail::lm;
  const auto& c = p.config();
  const auto B = static_cast<Eigen::Index>(tape.examples);
  const auto T = static_cast<Eigen::Index>(tape.seq_len);
  const auto N = B * T;
  const auto d = static_cast<Eigen::Index>(c.hidden_dim);
  const auto H = static_cast<Eigen::Index>(c.heads);
  const auto dh = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t nl = c.layers;

  // Highest layer that receives any gradient; blocks above it are skipped.
  RowMat dx;
  std::size_t top = 0;
  bool any = false;
  if (dlogits) {
    mmat(grad, L::final_index(nl, 2)).noalias() += tape.lnf.transpose() * (*dlogits);
    mrow(grad, L::final_index(nl, 3)) += dlogits->colwise().sum();
    RowMat dlnf = (*dlogits) * cmat(p, L::final_index(nl, 2)).transpose();
    dx = layer_norm_backward(dlnf, crow(p, L::final_index(nl, 0)), tape.lnf_cache,
                             mrow(grad, L::final_index(nl, 0)), mrow(grad, L::final_index(nl, 1)));
    top = nl;
    any = true;
  }
  for (const auto& [layer, g] : trace_grad) {
    top = std::max(top, layer + 1);
    any = true;
  }
  if (!any) return;
  if (dx.size() == 0) dx.setZero(N, d);

  for (std::size_t l = top; l-- > 0;) {
    const auto& bt = tape.blocks[l];
    if (auto it = trace_grad.find(l); it != trace_grad.end()) {
      dx += CMat(it->second.data().data(), N, d);
    }
    // MLP sublayer: x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
    mmat(grad, L::block(l, L::kProjW)).noalias() += bt.act.transpose() * dx;
    mrow(grad, L::block(l, L::kProjB)) += dx.colwise().sum();
    RowMat dact = dx * cmat(p, L::block(l, L::kProjW)).transpose();
    RowMat dfc = dact.array() * gelu_grad(bt.fc, bt.fc_tanh).array();
    mmat(grad, L::block(l, L::kFcW)).noalias() += bt.ln2.transpose() * dfc;
    mrow(grad, L::block(l, L::kFcB)) += dfc.colwise().sum();
    RowMat dln2 = dfc * cmat(p, L::block(l, L::kFcW)).transpose();
    RowMat dmid = dx + layer_norm_backward(dln2, crow(p, L::block(l, L::kLn2Gain)), bt.ln2_cache,
                                           mrow(grad, L::block(l, L::kLn2Gain)),
                                           mrow(grad, L::block(l, L::kLn2Bias)));
    // Attention sublayer: x_mid = x_in + out(attn(ln1(x_in)))
    mmat(grad, L::block(l, L::kAttnOutW)).noalias() += bt.attn_cat.transpose() * dmid;
    mrow(grad, L::block(l, L::kAttnOutB)) += dmid.colwise().sum();
    RowMat dcat = dmid * cmat(p, L::block(l, L::kAttnOutW)).transpose();
    RowMat dqkv = RowMat::Zero(N, 3 * d);
    std::vector<double> dprob(static_cast<std::size_t>(T));
    for (Eigen::Index b = 0; b < B; ++b) {
      for (Eigen::Index h = 0; h < H; ++h) {
        const double* qkv = bt.qkv.data() + b * T * 3 * d;
        double* dqkv_b = dqkv.data() + b * T * 3 * d;
        const double* prob = bt.probs.data() + (b * H + h) * T * T;
        const double* dout = dcat.data() + b * T * d + h * dh;
        for (Eigen::Index i = 0; i < T; ++i) {
          const double* row = prob + i * T;
          const double* go = dout + i * d;
          double inner = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            const double* v = qkv + j * 3 * d + 2 * d + h * dh;
            double* dv = dqkv_b + j * 3 * d + 2 * d + h * dh;
            double acc = 0.0;
            for (Eigen::Index e = 0; e < dh; ++e) {
              acc += go[e] * v[e];
              dv[e] += row[j] * go[e];
            }
            dprob[static_cast<std::size_t>(j)] = acc;
            inner += row[j] * acc;
          }
          const double* q = qkv + i * 3 * d + h * dh;
          double* dq = dqkv_b + i * 3 * d + h * dh;
          for (Eigen::Index j = 0; j <= i; ++j) {
            const double ds = row[j] * (dprob[static_cast<std::size_t>(j)] - inner) * scale;
            const double* k = qkv + j * 3 * d + d + h * dh;
            double* dk = dqkv_b + j * 3 * d + d + h * dh;
            for (Eigen::Index e = 0; e < dh; ++e) {
              dq[e] += ds * k[e];
              dk[e] += ds * q[e];
            }
          }
        }
      }
    }
    mmat(grad, L::block(l, L::kQkvW)).noalias() += bt.ln1.transpose() * dqkv;
    mrow(grad, L::block(l, L::kQkvB)) += dqkv.colwise().sum();
    RowMat dln1 = dqkv * cmat(p, L::block(l, L::kQkvW)).transpose();
    dx = dmid + layer_norm_backward(dln1, crow(p, L::block(l, L::kLn1Gain)), bt.ln1_cache,
                                    mrow(grad, L::block(l, L::kLn1Gain)),
                                    mrow(grad, L::block(l, L::kLn1Bias)));
  }
  MMat dtok = mmat(grad, L::kTokEmb);
  MMat dpos = mmat(grad, L::kPosEmb);
  for (Eigen::Index i = 0; i < N; ++i) {
    dtok.row(tape.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    dpos.row(i % T) += dx.row(i);
  }
}

}  // namespace detail

/// Run the forward pass and keep everything the reverse pass needs.
inline Tape record(const ParameterVector& params, const Batch& batch) {
  const auto& c = params.config();
  detail::check_batch(c, batch);
  Tape tape;
  tape.config = c;
  tape.examples = batch.examples;
  tape.seq_len = batch.seq_len;
  if (c.is_lm()) detail::record_lm(params, batch, tape);
  else detail::record_mlp(params, batch, tape);
  if (!tape.logits.all_finite()) throw NumericError("non-finite logits in forward pass");
  return tape;
}

inline ActivationTrace trace_of(const Tape& tape) {
  ActivationTrace trace;
  for (std::size_t l = 0; l < tape.config.layers; ++l) {
    trace.layers.emplace(l, detail::to_tensor(tape.hidden_state(l)));
  }
  return trace;
}

inline ForwardOutput forward(const ParameterVector& params, const Batch& batch, bool want_trace) {
  Tape tape = record(params, batch);
  ForwardOutput out;
  out.logits = std::move(tape.logits);
  if (want_trace) out.trace = trace_of(tape);
  return out;
}

/// Reverse pass: gradient of <logit_grad, logits> + sum_l <trace_grad[l], h_l>.
/// An empty logit_grad means no output-side gradient.
inline ParameterVector backward(const ParameterVector& params, const Tape& tape,
                                const Tensor& logit_grad, const TraceGrad& trace_grad = {}) {
  const auto& c = params.config();
  ILU_REQUIRE(c == tape.config, "tape was recorded for a different config");
  const auto rows = tape.rows();
  const detail::RowMat* dlogits = nullptr;
  detail::RowMat dl;
  if (!logit_grad.empty()) {
    ILU_REQUIRE(logit_grad.rank() == 2 && logit_grad.rows() == rows &&
                    logit_grad.cols() == c.output_dim(),
                "logit_grad shape does not match forward logits");
    dl = detail::CMat(logit_grad.data().data(), static_cast<Eigen::Index>(rows),
                      static_cast<Eigen::Index>(c.output_dim()));
    dlogits = &dl;
  }
  for (const auto& [layer, g] : trace_grad) {
    ILU_REQUIRE(layer < c.layers, "trace_grad layer " + std::to_string(layer) + " out of range");
    ILU_REQUIRE(g.rank() == 2 && g.rows() == rows && g.cols() == c.hidden_dim,
                "trace_grad shape does not match hidden state");
  }
  ParameterVector grad = params.zeros_like();
  if (c.is_lm()) detail::backward_lm(params, tape, dlogits, trace_grad, grad);
  else detail::backward_mlp(params, tape, dlogits, trace_grad, grad);
  return grad;
}

inline ParameterVector backward(const ParameterVector& params, const Batch& batch,
                                const Tensor& logit_grad, const TraceGrad& trace_grad = {}) {
  return backward(params, record(params, batch), logit_grad, trace_grad);
}

}  // namespace ilu
