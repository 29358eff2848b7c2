// SPDX-License-Identifier: Apache-2.0

#include "fastmem/reader.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fastmem {

namespace {

double gelu(double a) { return 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0))); }

Matrix<double> random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double std) {
  std::normal_distribution<double> normal(0.0, std);
  Matrix<double> m(rows, cols);
  for (double& v : m.values()) v = normal(rng);
  return m;
}

Matrix<double> layer_norm_rows(const Matrix<double>& x, const LayerNormParams<double>& ln) {
  Matrix<double> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = layer_norm_forward<double>(x.row(i), ln);
    std::copy(r.y.begin(), r.y.end(), out.row(i).begin());
  }
  return out;
}

void add_bias(Matrix<double>& m, const std::vector<double>& b) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += b[j];
}

struct AttentionCapture {
  std::size_t query_from = 0;  ///< first query row whose probabilities are captured
  std::size_t key_from = 0;    ///< captured key columns [key_from, key_from + key_count)
  std::size_t key_count = 0;
  AttentionScores* scores = nullptr;
  std::vector<std::vector<double>>* row_sums = nullptr;  ///< [head][query]
};

struct BlockPass {
  Matrix<double> out;
  Matrix<double> keys;
  Matrix<double> values;
};

// One transformer block over `x`, whose rows attend to every entry of `past`
// and causally to each other.
BlockPass run_block(const ToyLayer& layer, const Matrix<double>& x,
                    const std::vector<KvEntry>& past, std::size_t heads,
                    const AttentionCapture* capture) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const Matrix<double> h = layer_norm_rows(x, layer.ln_attn);
  const Matrix<double> q = matmul(h, layer.wq);
  BlockPass pass;
  pass.keys = matmul(h, layer.wk);
  pass.values = matmul(h, layer.wv);

  const std::size_t p = past.size();
  Matrix<double> attended(n, d);
  std::vector<double> logits(p + n);
  for (std::size_t head = 0; head < heads; ++head) {
    const std::size_t c0 = head * dh;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ctx = p + i + 1;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < ctx; ++j) {
        const double* kj = j < p ? past[j].key.data() + c0 : &pass.keys(j - p, c0);
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q(i, c0 + c) * kj[c];
        logits[j] = s * inv_sqrt;
        mx = std::max(mx, logits[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < ctx; ++j) {
        logits[j] = std::exp(logits[j] - mx);
        z += logits[j];
      }
      double total = 0.0;
      for (std::size_t j = 0; j < ctx; ++j) {
        const double pj = logits[j] / z;
        total += pj;
        const double* vj = j < p ? past[j].value.data() + c0 : &pass.values(j - p, c0);
        for (std::size_t c = 0; c < dh; ++c) attended(i, c0 + c) += pj * vj[c];
        if (capture && capture->scores && i >= capture->query_from && j >= capture->key_from &&
            j < capture->key_from + capture->key_count) {
          capture->scores->at(head, i - capture->query_from, j - capture->key_from) = pj;
        }
      }
      if (capture && capture->row_sums) (*capture->row_sums)[head][i] = total;
    }
  }

  pass.out = x;
  const Matrix<double> proj = matmul(attended, layer.wo);
  for (std::size_t i = 0; i < pass.out.size(); ++i) pass.out.values()[i] += proj.values()[i];

  Matrix<double> ff = matmul(layer_norm_rows(pass.out, layer.ln_ffn), layer.ff_in);
  add_bias(ff, layer.ff_in_bias);
  for (double& v : ff.values()) v = gelu(v);
  Matrix<double> ff_out = matmul(ff, layer.ff_out);
  add_bias(ff_out, layer.ff_out_bias);
  for (std::size_t i = 0; i < pass.out.size(); ++i) pass.out.values()[i] += ff_out.values()[i];
  return pass;
}

Matrix<double> stack_rows(const Matrix<double>& a, const Matrix<double>& b) {
  Matrix<double> out(0, a.cols());
  out.reserve_rows(a.rows() + b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out.append_row(a.row(i));
  for (std::size_t i = 0; i < b.rows(); ++i) out.append_row(b.row(i));
  return out;
}

KvEntry make_entry(const BlockPass& pass, std::size_t row, std::uint64_t position) {
  return {std::vector<double>(pass.keys.row(row).begin(), pass.keys.row(row).end()),
          std::vector<double>(pass.values.row(row).begin(), pass.values.row(row).end()),
          position};
}

std::vector<double> logits_of(const Matrix<double>& hidden, std::size_t row,
                              const ToyStackParams& stack) {
  const auto normed = layer_norm_forward<double>(hidden.row(row), stack.final_ln);
  std::vector<double> logits(stack.config.vocab, 0.0);
  for (std::size_t k = 0; k < normed.y.size(); ++k) {
    const auto w = stack.unembed.row(k);
    for (std::size_t v = 0; v < logits.size(); ++v) logits[v] += normed.y[k] * w[v];
  }
  return logits;
}

void check_width(const Matrix<double>& m, const ToyStackParams& stack, const char* what) {
  if (m.rows() > 0 && m.cols() != stack.dim()) {
    throw DimensionError(std::string(what) + " width does not match the stack dimension");
  }
}

}  // namespace

void ToyStackConfig::validate() const {
  if (layers == 0 || heads == 0 || dim == 0 || vocab == 0 || ffn_hidden == 0) {
    throw ContractError("toy stack sizes must be positive");
  }
  if (dim % heads != 0) throw ContractError("toy stack dim must be divisible by heads");
}

ToyStackParams ToyStackParams::make(const ToyStackConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const std::size_t d = config.dim;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  ToyStackParams s;
  s.config = config;
  for (std::size_t l = 0; l < config.layers; ++l) {
    ToyLayer layer;
    layer.wq = random_matrix(rng, d, d, sd);
    layer.wk = random_matrix(rng, d, d, sd);
    layer.wv = random_matrix(rng, d, d, sd);
    layer.wo = random_matrix(rng, d, d, sd);
    layer.ln_attn = LayerNormParams<double>::identity(d, 1e-6);
    layer.ln_ffn = LayerNormParams<double>::identity(d, 1e-6);
    layer.ff_in = random_matrix(rng, d, config.ffn_hidden, sd);
    layer.ff_in_bias.assign(config.ffn_hidden, 0.0);
    layer.ff_out = random_matrix(rng, config.ffn_hidden, d,
                                 1.0 / std::sqrt(static_cast<double>(config.ffn_hidden)));
    layer.ff_out_bias.assign(d, 0.0);
    s.layers.push_back(std::move(layer));
  }
  s.embedding = random_matrix(rng, config.vocab, d, 1.0);
  s.final_ln = LayerNormParams<double>::identity(d, 1e-6);
  s.unembed = random_matrix(rng, d, config.vocab, sd);
  return s;
}

Matrix<double> ToyStackParams::embed(std::span<const std::uint32_t> ids) const {
  Matrix<double> out(0, dim());
  for (std::uint32_t id : ids) {
    if (id >= config.vocab) throw ContractError("token id outside the vocabulary");
    out.append_row(embedding.row(id));
  }
  return out;
}

std::size_t KvStore::total() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.size();
  return n;
}

std::vector<std::size_t> KvStore::retained_per_layer() const {
  std::vector<std::size_t> out;
  for (const auto& l : layers) out.push_back(l.size());
  return out;
}

void KvStore::check_ordering() const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t i = 1; i < layers[l].size(); ++i) {
      if (layers[l][i].position <= layers[l][i - 1].position) {
        throw ContractError("KV positions not strictly increasing in layer " + std::to_string(l));
      }
    }
  }
}

std::string kv_store_to_jsonl(const KvStore& kv) {
  std::ostringstream out;
  for (std::size_t l = 0; l < kv.layers.size(); ++l) {
    for (const auto& e : kv.layers[l]) {
      nlohmann::json j = {{"layer", l}, {"position", e.position}, {"key", e.key}, {"value", e.value}};
      out << j.dump() << '\n';
    }
  }
  return out.str();
}

ChunkForward attn_forward_chunk(const Matrix<double>& chunk, std::uint64_t first_position,
                                const Matrix<double>& prompt, const KvStore& kv,
                                const ToyStackParams& stack) {
  const std::size_t layers = stack.config.layers;
  const std::size_t heads = stack.config.heads;
  check_width(chunk, stack, "chunk");
  check_width(prompt, stack, "prompt");
  if (kv.layers.size() != layers) throw DimensionError("KV store layer count mismatch");
  for (const auto& l : kv.layers) {
    if (!l.empty() && l.back().position >= first_position) {
      throw ContractError("retained KV must precede the chunk positions");
    }
  }

  const std::size_t c = chunk.rows();
  const std::size_t s = prompt.rows();
  ChunkForward out;
  out.fresh = KvStore::empty(layers);
  Matrix<double> x = stack_rows(chunk, prompt);
  for (std::size_t l = 0; l < layers; ++l) {
    AttentionScores scores{heads, s, c, std::vector<double>(heads * s * c, 0.0)};
    std::vector<std::vector<double>> sums(heads, std::vector<double>(c + s, 0.0));
    AttentionCapture cap{c, kv.layers[l].size(), c, &scores, &sums};
    BlockPass pass = run_block(stack.layers[l], x, kv.layers[l], heads, &cap);
    for (std::size_t i = 0; i < c; ++i) {
      out.fresh.layers[l].push_back(make_entry(pass, i, first_position + i));
    }
    out.scores.push_back(std::move(scores));
    out.row_sums.push_back(std::move(sums));
    x = std::move(pass.out);
  }
  out.outputs = std::move(x);
  return out;
}

std::vector<double> prompt_importance(const AttentionScores& scores) {
  std::vector<double> a(scores.chunk_len, 0.0);
  if (scores.heads == 0) return a;
  const double inv_h = 1.0 / static_cast<double>(scores.heads);
  for (std::size_t s = 0; s < scores.prompt_len; ++s) {
    for (std::size_t h = 0; h < scores.heads; ++h) {
      for (std::size_t j = 0; j < scores.chunk_len; ++j) a[j] += inv_h * scores.at(h, s, j);
    }
  }
  return a;
}

std::vector<std::vector<std::size_t>> select_topk_global(
    const std::vector<std::vector<double>>& importance, std::int64_t k) {
  if (k <= 0) throw ContractError("top-k size must be positive");
  struct Candidate {
    double value;
    std::size_t layer;
    std::size_t pos;
  };
  std::vector<Candidate> all;
  for (std::size_t l = 0; l < importance.size(); ++l)
    for (std::size_t j = 0; j < importance[l].size(); ++j) all.push_back({importance[l][j], l, j});
  const auto keep = std::min(static_cast<std::size_t>(k), all.size());
  auto better = [](const Candidate& a, const Candidate& b) {
    if (a.value != b.value) return a.value > b.value;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.pos < b.pos;
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), better);
  std::vector<std::vector<std::size_t>> out(importance.size());
  for (std::size_t i = 0; i < keep; ++i) out[all[i].layer].push_back(all[i].pos);
  for (auto& v : out) std::sort(v.begin(), v.end());
  return out;
}

void ReaderBudget::validate(std::size_t layers) const {
  if (chunk == 0 || avg_tokens == 0 || memory_len == 0 || layers == 0) {
    throw ContractError("reader budget values must be positive");
  }
  if (chunk > memory_len) throw ContractError("chunk length m must not exceed memory length N");
  if (avg_tokens > memory_len) throw ContractError("M must not exceed memory length N");
}

std::size_t ReaderBudget::keep_per_chunk(std::size_t layers) const {
  validate(layers);
  const std::uint64_t k = std::uint64_t{chunk} * layers * avg_tokens / memory_len;
  return std::max<std::size_t>(1, static_cast<std::size_t>(k));
}

CompressResult compress_kv(const Matrix<double>& memory, const Matrix<double>& prompt,
                           const ToyStackParams& stack, const ReaderBudget& budget) {
  const std::size_t layers = stack.config.layers;
  if (budget.memory_len != memory.rows()) {
    throw DimensionError("reader budget N does not match the memory length");
  }
  check_width(memory, stack, "memory");
  const std::size_t keep = budget.keep_per_chunk(layers);

  CompressResult out;
  out.kv = KvStore::empty(layers);
  for (std::size_t start = 0; start < memory.rows(); start += budget.chunk) {
    const std::size_t len = std::min(budget.chunk, memory.rows() - start);
    Matrix<double> chunk(0, memory.cols());
    for (std::size_t i = 0; i < len; ++i) chunk.append_row(memory.row(start + i));

    ChunkForward fwd = attn_forward_chunk(chunk, start, prompt, out.kv, stack);
    std::vector<std::vector<double>> importance;
    importance.reserve(layers);
    for (const auto& sc : fwd.scores) importance.push_back(prompt_importance(sc));
    const auto chosen = select_topk_global(importance, static_cast<std::int64_t>(keep));

    std::size_t kept = 0;
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t j : chosen[l]) out.kv.layers[l].push_back(std::move(fwd.fresh.layers[l][j]));
      kept += chosen[l].size();
    }
    out.kept_per_chunk.push_back(kept);
  }
  return out;
}

KvStore full_kv_cache(const Matrix<double>& memory, const ToyStackParams& stack) {
  check_width(memory, stack, "memory");
  KvStore kv = KvStore::empty(stack.config.layers);
  Matrix<double> x = memory;
  const std::vector<KvEntry> none;
  for (std::size_t l = 0; l < stack.config.layers; ++l) {
    BlockPass pass = run_block(stack.layers[l], x, none, stack.config.heads, nullptr);
    for (std::size_t i = 0; i < memory.rows(); ++i) kv.layers[l].push_back(make_entry(pass, i, i));
    x = std::move(pass.out);
  }
  return kv;
}

DecodeResult decode_with_kv(const KvStore& kv, const Matrix<double>& prompt,
                            const ToyStackParams& stack, std::int64_t max_steps) {
  if (max_steps <= 0) throw ContractError("max_steps must be positive");
  if (prompt.rows() == 0) throw ContractError("decoding needs at least one prompt token");
  check_width(prompt, stack, "prompt");
  if (kv.layers.size() != stack.config.layers) throw DimensionError("KV store layer count mismatch");

  KvStore cache = kv;
  std::uint64_t next_pos = 0;
  for (const auto& l : cache.layers)
    if (!l.empty()) next_pos = std::max(next_pos, l.back().position + 1);

  // Runs rows through the stack against the working cache and appends their KV.
  auto feed = [&](const Matrix<double>& rows) {
    Matrix<double> x = rows;
    for (std::size_t l = 0; l < stack.config.layers; ++l) {
      BlockPass pass = run_block(stack.layers[l], x, cache.layers[l], stack.config.heads, nullptr);
      for (std::size_t i = 0; i < rows.rows(); ++i) {
        cache.layers[l].push_back(make_entry(pass, i, next_pos + i));
      }
      x = std::move(pass.out);
    }
    next_pos += rows.rows();
    return x;
  };

  DecodeResult out;
  Matrix<double> hidden = feed(prompt);
  for (std::int64_t step = 0; step < max_steps; ++step) {
    auto logits = logits_of(hidden, hidden.rows() - 1, stack);
    const auto best = static_cast<std::uint32_t>(
        std::distance(logits.begin(), std::max_element(logits.begin(), logits.end())));
    out.tokens.push_back(best);
    out.logits.push_back(std::move(logits));
    if (step + 1 < max_steps) {
      const std::uint32_t id[1] = {best};
      hidden = feed(stack.embed(id));
    }
  }
  return out;
}

}  // namespace fastmem
