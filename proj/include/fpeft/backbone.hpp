#pragma once

#include "fpeft/tokenizer.hpp"

namespace fpeft::inline FPEFT_PRECISION_NS {

// Pre-norm layer over x[..., L, C]:
//   x1 = x + MSA(LN1(x)) [+ Adapter_msa(LN1(x))]
//   y  = x1 + FFN(LN2(x1)) [+ Adapter_ffn(LN2(x1))]
// Optional pieces are used when their parameters exist under `prefix`.
// `key_masked[j]` excludes token j as an attention key.
Var transformer_layer(Binder& b, const std::string& prefix, Var x, int heads, std::span<const std::uint8_t> key_masked);

// Up(GELU(Down(x))).
Var adapter_forward(Binder& b, const std::string& prefix, Var x);

// Encoder over [L, C] tokens. With "peft.cep" present, layer i < depth runs
// on [cep[i]; x] and its prompt outputs are dropped afterwards.
Var encoder_forward(Binder& b, const ModelConfig& cfg, Var x, std::span<const std::uint8_t> valid);

// Joint self-attention decoder over [latents; queries]. Returns the query
// rows: [Nq, C], or [K, Nq, C] when "peft.mcp" is present (slice k is
// prepended at the first layer of pass k and then kept as ordinary tokens).
Var decoder_forward(Binder& b, const ModelConfig& cfg, Var latents, std::span<const std::uint8_t> latent_valid,
                    Var queries);

struct LossWeights {
  double history = 1.0;
  double future = 1.0;
  double lane = 0.35;
};

struct ReconBreakdown {
  double history = 0, future = 0, lane = 0, total = 0;
};

// Routes decoded rows by kind through head.history / head.future / head.lane.
// Returns [n, 2S] predictions for the rows selected by `rows`.
Var reconstruction_head(Binder& b, TokenKind kind, Var decoded, std::span<const std::int64_t> rows);

// lambda_H * L1(history) + lambda_F * L1(future) + lambda_L * MSE(lane), each
// averaged over the valid coordinates of that kind; empty kinds contribute 0.
Var loss_reconstruction(Binder& b, Var decoded, std::span<const ReconTarget> targets, const LossWeights& w,
                        ReconBreakdown* breakdown = nullptr);

// Full masked-reconstruction pass for one scene.
Var pretrain_loss(Binder& b, const ModelConfig& cfg, const Scene& scene, const MaskPlan& plan, const LossWeights& w,
                  ReconBreakdown* breakdown = nullptr);

// Replicates x[L, C] into [n, L, C].
Var tile(Var x, std::int64_t n);

}  // namespace fpeft
