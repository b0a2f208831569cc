// SPDX-License-Identifier: Apache-2.0
#include "mgilab/model.hpp"

#include <chrono>
#include <cmath>

#include "mgilab/error.hpp"
#include "mgilab/rng.hpp"

namespace mgilab {

void ModelConfig::validate() const {
  if (layers < 2) throw ConfigError("model needs at least 2 layers");
  if (heads < 1) throw ConfigError("model needs at least 1 head");
  if (model_dim <= 0 || model_dim % heads != 0) {
    throw ConfigError("model_dim must be a positive multiple of heads");
  }
  if (vocab_size < vocab::kUsedSize) throw ConfigError("vocab_size too small for the vocabulary");
  if (max_seq_len < 2) throw ConfigError("max_seq_len too small");
}

std::int64_t GenerationResult::total_latency_ns() const {
  std::int64_t t = 0;
  for (auto s : step_latency_ns) t += s;
  return t;
}

ToyMllm::ToyMllm(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  const std::size_t f = config_.mlp_dim();
  std::size_t cursor = 0;
  auto take = [&](std::size_t n) {
    const std::size_t at = cursor;
    cursor += n;
    return at;
  };
  embed_ = take(config_.vocab_size * d);
  pos_ = take(config_.max_seq_len * d);
  for (int l = 0; l < config_.layers; ++l) {
    LayerOffsets o{};
    o.ln1_g = take(d);
    o.ln1_b = take(d);
    o.wq = take(d * d);
    o.wk = take(d * d);
    o.wv = take(d * d);
    o.wo = take(d * d);
    o.ln2_g = take(d);
    o.ln2_b = take(d);
    o.w1 = take(d * f);
    o.b1 = take(f);
    o.w2 = take(f * d);
    o.b2 = take(d);
    layers_.push_back(o);
  }
  lnf_g_ = take(d);
  lnf_b_ = take(d);
  unembed_ = take(d * config_.vocab_size);
  params_.assign(cursor, 0.0f);

  Rng rng(config_.seed, 0x3d0dULL);
  auto fill_normal = [&](std::size_t off, std::size_t n, double stddev) {
    for (std::size_t i = 0; i < n; ++i) params_[off + i] = static_cast<float>(rng.normal() * stddev);
  };
  auto fill_const = [&](std::size_t off, std::size_t n, float v) {
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(off), n, v);
  };
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  fill_normal(embed_, config_.vocab_size * d, 1.0);
  fill_normal(pos_, config_.max_seq_len * d, 0.5);
  for (const auto& o : layers_) {
    fill_const(o.ln1_g, d, 1.0f);
    fill_normal(o.wq, d * d, proj_std);
    fill_normal(o.wk, d * d, proj_std);
    fill_normal(o.wv, d * d, proj_std);
    fill_normal(o.wo, d * d, proj_std);
    fill_const(o.ln2_g, d, 1.0f);
    fill_normal(o.w1, d * f, proj_std);
    fill_normal(o.w2, f * d, 1.0 / std::sqrt(static_cast<double>(f)));
  }
  fill_const(lnf_g_, d, 1.0f);
  fill_normal(unembed_, d * config_.vocab_size, proj_std);
}

ToyMllm init_model(const ModelConfig& config) { return ToyMllm(config); }

namespace {

// out[t, :] = in[t, :] * W (+ bias), W stored row-major as [in_dim x out_dim].
void matmul(const std::vector<float>& in, int rows, int in_dim, const float* w, int out_dim,
            const float* bias, std::vector<float>& out) {
  out.assign(static_cast<std::size_t>(rows) * out_dim, 0.0f);
  std::vector<double> acc(out_dim);
  for (int t = 0; t < rows; ++t) {
    const float* x = in.data() + static_cast<std::size_t>(t) * in_dim;
    for (int n = 0; n < out_dim; ++n) acc[n] = bias ? bias[n] : 0.0;
    for (int k = 0; k < in_dim; ++k) {
      const double xk = x[k];
      const float* wr = w + static_cast<std::size_t>(k) * out_dim;
      for (int n = 0; n < out_dim; ++n) acc[n] += xk * wr[n];
    }
    float* o = out.data() + static_cast<std::size_t>(t) * out_dim;
    for (int n = 0; n < out_dim; ++n) o[n] = static_cast<float>(acc[n]);
  }
}

void layer_norm(const std::vector<float>& in, int rows, int dim, const float* gamma,
                const float* beta, std::vector<float>& out) {
  out.resize(in.size());
  for (int t = 0; t < rows; ++t) {
    const float* x = in.data() + static_cast<std::size_t>(t) * dim;
    double mean = 0.0;
    for (int i = 0; i < dim; ++i) mean += x[i];
    mean /= dim;
    double var = 0.0;
    for (int i = 0; i < dim; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= dim;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    float* o = out.data() + static_cast<std::size_t>(t) * dim;
    for (int i = 0; i < dim; ++i) {
      o[i] = static_cast<float>((x[i] - mean) * inv * gamma[i] + beta[i]);
    }
  }
}

float gelu(float x) {
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(0.7978845608028654 * (xd + 0.044715 * xd * xd * xd))));
}

}  // namespace

ForwardResult ToyMllm::forward_with_trace(std::span<const int> tokens, const SpanMap& spans,
                                          const InterventionHook* hook) const {
  const int t_len = static_cast<int>(tokens.size());
  if (t_len == 0) throw ConfigError("empty token sequence");
  if (t_len > config_.max_seq_len) {
    throw ConfigError("sequence length " + std::to_string(t_len) + " exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  if (spans.seq_len != t_len) throw ConfigError("span map does not match token sequence");
  for (int id : tokens) {
    if (id < 0 || id >= config_.vocab_size) throw ConfigError("token id outside vocabulary");
  }

  const int d = config_.model_dim;
  const int heads = config_.heads;
  const int hd = config_.head_dim();
  const int f = config_.mlp_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardResult result{{}, AttentionTrace(config_.layers, heads, spans)};

  std::vector<float> x(static_cast<std::size_t>(t_len) * d);
  for (int t = 0; t < t_len; ++t) {
    const float* e = at(embed_ + static_cast<std::size_t>(tokens[t]) * d);
    const float* p = at(pos_ + static_cast<std::size_t>(t) * d);
    for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(t) * d + i] = e[i] + p[i];
  }

  std::vector<float> h, q, k, v, mixed(x.size()), proj, hidden;
  for (int l = 0; l < config_.layers; ++l) {
    const auto& o = layers_[l];
    layer_norm(x, t_len, d, at(o.ln1_g), at(o.ln1_b), h);
    matmul(h, t_len, d, at(o.wq), d, nullptr, q);
    matmul(h, t_len, d, at(o.wk), d, nullptr, k);
    matmul(h, t_len, d, at(o.wv), d, nullptr, v);

    for (int head = 0; head < heads; ++head) {
      const int c0 = head * hd;
      for (int i = 0; i < t_len; ++i) {
        auto row = result.trace.row(l, head, i);
        const float* qi = q.data() + static_cast<std::size_t>(i) * d + c0;
        for (int j = 0; j <= i; ++j) {
          const float* kj = k.data() + static_cast<std::size_t>(j) * d + c0;
          double s = 0.0;
          for (int c = 0; c < hd; ++c) s += static_cast<double>(qi[c]) * kj[c];
          row[j] = static_cast<float>(s * scale);
        }
        softmax_inplace(row.subspan(0, static_cast<std::size_t>(i) + 1));
        if (hook && hook->applies(l, i)) {
          hook->apply(HookSite{l, head, i, spans}, row);
          if (!is_distribution(row, 1e-5)) {
            throw Error("intervention hook returned an invalid attention row");
          }
        }
        float* out = mixed.data() + static_cast<std::size_t>(i) * d + c0;
        for (int c = 0; c < hd; ++c) {
          double acc = 0.0;
          for (int j = 0; j <= i; ++j) {
            acc += static_cast<double>(row[j]) * v[static_cast<std::size_t>(j) * d + c0 + c];
          }
          out[c] = static_cast<float>(acc);
        }
      }
    }
    matmul(mixed, t_len, d, at(o.wo), d, nullptr, proj);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];

    layer_norm(x, t_len, d, at(o.ln2_g), at(o.ln2_b), h);
    matmul(h, t_len, d, at(o.w1), f, at(o.b1), hidden);
    for (float& a : hidden) a = gelu(a);
    matmul(hidden, t_len, f, at(o.w2), d, at(o.b2), proj);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
  }

  std::vector<float> last(x.end() - d, x.end()), normed;
  layer_norm(last, 1, d, at(lnf_g_), at(lnf_b_), normed);
  matmul(normed, 1, d, at(unembed_), config_.vocab_size, nullptr, result.logits);
  return result;
}

GenerationResult ToyMllm::generate_greedy(const TokenizedEpisode& episode, int max_new_tokens,
                                          const InterventionHook* hook) const {
  if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
  using Clock = std::chrono::steady_clock;

  GenerationResult result;
  std::vector<int> tokens = episode.tokens;
  SpanMap spans = episode.spans;
  for (int step = 0; step < max_new_tokens; ++step) {
    spans.seq_len = static_cast<int>(tokens.size());
    const auto start = Clock::now();
    ForwardResult fwd = forward_with_trace(tokens, spans, hook);
    int next = vocab::kEos;
    for (int id = 0; id < vocab::kUsedSize; ++id) {
      if (vocab::is_emittable(id) && fwd.logits[id] > fwd.logits[next]) next = id;
    }
    const auto stop = Clock::now();
    result.step_latency_ns.push_back(
        std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count());
    result.trace = std::move(fwd.trace);
    result.output_token_ids.push_back(next);
    if (next == vocab::kSep || next == vocab::kEos) break;
    if (static_cast<int>(tokens.size()) >= config_.max_seq_len) break;
    tokens.push_back(next);
  }
  std::vector<int> text_ids;
  for (int id : result.output_token_ids) {
    if (id != vocab::kSep && id != vocab::kEos) text_ids.push_back(id);
  }
  result.output_text = vocab::decode(text_ids);
  return result;
}

}  // namespace mgilab
