#include "fpeft/backbone.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

namespace {

Var lin(Binder& b, Var x, const std::string& prefix) { return linear(x, b(prefix + ".w"), b(prefix + ".b")); }

Var norm(Binder& b, Var x, const std::string& prefix) {
  return layer_norm(x, b(prefix + ".gamma"), b(prefix + ".beta"));
}

std::vector<std::uint8_t> invert(std::span<const std::uint8_t> valid) {
  std::vector<std::uint8_t> m(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) m[i] = valid[i] ? 0 : 1;
  return m;
}

const char* head_name(TokenKind k) {
  switch (k) {
    case TokenKind::history: return "head.history";
    case TokenKind::future: return "head.future";
    case TokenKind::lane: return "head.lane";
    default: throw ConfigError("no reconstruction head for prompt tokens");
  }
}

}  // namespace

Var tile(Var x, std::int64_t n) {
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  Var one = reshape(x, s);
  std::vector<Var> copies(static_cast<std::size_t>(n), one);
  return n == 1 ? one : concat(copies, 0);
}

Var adapter_forward(Binder& b, const std::string& prefix, Var x) {
  return lin(b, gelu(lin(b, x, prefix + ".down")), prefix + ".up");
}

Var transformer_layer(Binder& b, const std::string& p, Var x, int heads, std::span<const std::uint8_t> key_masked) {
  const int axis = static_cast<int>(x.shape().size()) - 1;
  const std::int64_t C = x.shape().back();
  Var h = norm(b, x, p + ".ln1");
  Var qkv = lin(b, h, p + ".attn.qkv");
  if (b.has(p + ".lora.q.A")) {
    Var lq = matmul(matmul(h, b(p + ".lora.q.A")), b(p + ".lora.q.B"));
    Var lv = matmul(matmul(h, b(p + ".lora.v.A")), b(p + ".lora.v.B"));
    Var zk = b.tape().constant(Tensor(lq.shape()));
    const Var parts[] = {lq, zk, lv};
    qkv = add(qkv, concat(parts, axis));
  }
  Var q = slice(qkv, axis, 0, C), k = slice(qkv, axis, C, 2 * C), v = slice(qkv, axis, 2 * C, 3 * C);
  Var x1 = add(x, lin(b, scaled_dot_attention(q, k, v, heads, key_masked), p + ".attn.out"));
  if (b.has(p + ".adapter.msa.down.w")) x1 = add(x1, adapter_forward(b, p + ".adapter.msa", h));
  Var h2 = norm(b, x1, p + ".ln2");
  Var y = add(x1, lin(b, gelu(lin(b, h2, p + ".ffn.fc1")), p + ".ffn.fc2"));
  if (b.has(p + ".adapter.ffn.down.w")) y = add(y, adapter_forward(b, p + ".adapter.ffn", h2));
  return y;
}

Var encoder_forward(Binder& b, const ModelConfig& cfg, Var x, std::span<const std::uint8_t> valid) {
  const std::int64_t L = x.shape()[0];
  if (static_cast<std::int64_t>(valid.size()) != L) throw ShapeError("encoder: validity length mismatch");
  const auto masked = invert(valid);
  const bool cep = b.has("peft.cep");
  const std::int64_t depth = cep ? b.store().value("peft.cep").dim(0) : 0;
  const std::int64_t np = cep ? b.store().value("peft.cep").dim(1) : 0;
  std::vector<std::uint8_t> masked_p(static_cast<std::size_t>(np), 0);
  masked_p.insert(masked_p.end(), masked.begin(), masked.end());
  for (int i = 0; i < cfg.enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    if (i < depth) {
      Var prompts = reshape(slice(b("peft.cep"), 0, i, i + 1), {np, cfg.C});
      const Var parts[] = {prompts, x};
      Var y = transformer_layer(b, p, concat(parts, 0), cfg.heads, masked_p);
      x = slice(y, 0, np, np + L);
    } else {
      x = transformer_layer(b, p, x, cfg.heads, masked);
    }
  }
  return x;
}

Var decoder_forward(Binder& b, const ModelConfig& cfg, Var latents, std::span<const std::uint8_t> latent_valid,
                    Var queries) {
  const std::int64_t nl = latents.shape()[0], nq = queries.shape()[0];
  if (nq == 0) throw ShapeError("decoder needs at least one query");
  if (static_cast<std::int64_t>(latent_valid.size()) != nl) throw ShapeError("decoder: validity length mismatch");
  std::vector<std::uint8_t> masked = invert(latent_valid);
  masked.resize(static_cast<std::size_t>(nl + nq), 0);
  const Var seq_parts[] = {latents, queries};
  Var x = concat(seq_parts, 0);
  if (!b.has("peft.mcp")) {
    for (int i = 0; i < cfg.dec_layers; ++i) x = transformer_layer(b, "dec." + std::to_string(i), x, cfg.heads, masked);
    return slice(x, 0, nl, nl + nq);
  }
  const Tensor& mcp = b.store().value("peft.mcp");
  const std::int64_t K = mcp.dim(0), np = mcp.dim(1);
  const Var parts[] = {b("peft.mcp"), tile(x, K)};
  x = concat(parts, 1);
  std::vector<std::uint8_t> masked_p(static_cast<std::size_t>(np), 0);
  masked_p.insert(masked_p.end(), masked.begin(), masked.end());
  for (int i = 0; i < cfg.dec_layers; ++i) x = transformer_layer(b, "dec." + std::to_string(i), x, cfg.heads, masked_p);
  return slice(x, 1, np + nl, np + nl + nq);
}

Var reconstruction_head(Binder& b, TokenKind kind, Var decoded, std::span<const std::int64_t> rows) {
  const std::string h = head_name(kind);
  return linear(gather_rows(decoded, rows), b(h + ".w"), b(h + ".b"));
}

Var loss_reconstruction(Binder& b, Var decoded, std::span<const ReconTarget> targets, const LossWeights& w,
                        ReconBreakdown* breakdown) {
  if (decoded.shape()[0] != static_cast<std::int64_t>(targets.size()))
    throw ShapeError("reconstruction: " + std::to_string(decoded.shape()[0]) + " decoded rows for " +
                     std::to_string(targets.size()) + " targets");
  Tape& tape = b.tape();
  Var total;
  ReconBreakdown bd;
  for (TokenKind kind : {TokenKind::history, TokenKind::future, TokenKind::lane}) {
    std::vector<std::int64_t> rows;
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (targets[i].kind == kind) rows.push_back(static_cast<std::int64_t>(i));
    if (rows.empty()) continue;
    const std::int64_t width = targets[static_cast<std::size_t>(rows[0])].target.size();
    const auto n = static_cast<std::int64_t>(rows.size());
    Tensor tgt({n, width}), mask({n, width});
    std::int64_t count = 0;
    for (std::int64_t r = 0; r < n; ++r) {
      const ReconTarget& t = targets[static_cast<std::size_t>(rows[static_cast<std::size_t>(r)])];
      if (t.target.size() != width) throw ShapeError("reconstruction targets of one kind differ in length");
      for (std::int64_t s = 0; s < width / 2; ++s) {
        if (!t.valid[static_cast<std::size_t>(s)]) continue;
        for (int c = 0; c < 2; ++c) {
          tgt[r * width + 2 * s + c] = t.target[2 * s + c];
          mask[r * width + 2 * s + c] = 1;
        }
        count += 2;
      }
    }
    if (count == 0) continue;
    Var pred = reconstruction_head(b, kind, decoded, rows);
    Var diff = mul(sub(pred, tape.constant(std::move(tgt))), tape.constant(std::move(mask)));
    Var term = kind == TokenKind::lane ? sum(square(diff)) : sum(abs(diff));
    term = scale(term, 1.0 / static_cast<double>(count));
    const double lambda = kind == TokenKind::history ? w.history : kind == TokenKind::future ? w.future : w.lane;
    const double tv = static_cast<double>(term.value().item());
    (kind == TokenKind::history ? bd.history : kind == TokenKind::future ? bd.future : bd.lane) = tv;
    Var weighted = scale(term, lambda);
    total = total.valid() ? add(total, weighted) : weighted;
  }
  if (!total.valid()) total = tape.constant(Tensor::scalar(0));
  bd.total = static_cast<double>(total.value().item());
  if (breakdown) *breakdown = bd;
  return total;
}

Var pretrain_loss(Binder& b, const ModelConfig& cfg, const Scene& scene, const MaskPlan& plan, const LossWeights& w,
                  ReconBreakdown* breakdown) {
  PretrainTokens tk = build_pretrain_tokens(b, cfg, scene, plan);
  Var latents = encoder_forward(b, cfg, tk.visible.tokens, tk.visible.valid);
  latents = add(latents, positional_embedding(b, cfg, tk.visible.positions));
  Var decoded = decoder_forward(b, cfg, latents, tk.visible.valid, tk.queries.tokens);
  return loss_reconstruction(b, decoded, tk.targets, w, breakdown);
}

}  // namespace fpeft
