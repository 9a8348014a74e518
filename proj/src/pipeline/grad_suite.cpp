#include "lar/pipeline/grad_suite.hpp"

#include "lar/masks/masks.hpp"
#include "lar/numerics/ops.hpp"
#include "lar/numerics/rng.hpp"
#include "lar/transformer/transformer.hpp"

namespace lar::pipeline {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

transformer::Linear linear(const Tensor& weight, int width) {
  transformer::Linear l;
  l.weight = weight;
  l.bias = Tensor({width});
  return l;
}

}  // namespace

std::vector<GradCase> run_grad_suite(std::uint64_t seed, double eps) {
  Rng rng(seed);
  std::vector<GradCase> out;
  auto check = [&](const std::string& name, const DifferentiableFn& fn, std::vector<Tensor> inputs) {
    out.push_back({name, grad_check(fn, std::move(inputs), eps, seed)});
  };

  check("conv2d stride 1",
        [](std::span<const Tensor> in) { return conv2d(in[0], in[1], in[2], 1, 1); },
        {random_tensor({2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  check("conv2d stride 2",
        [](std::span<const Tensor> in) { return conv2d(in[0], in[1], in[2], 2, 1); },
        {random_tensor({2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  check("matmul", [](std::span<const Tensor> in) { return matmul(in[0], in[1]); },
        {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)});
  check("softmax", [](std::span<const Tensor> in) { return softmax(in[0]); }, {random_tensor({3, 5}, rng)});
  check("layer_norm", [](std::span<const Tensor> in) { return layer_norm(in[0], in[1], in[2]); },
        {random_tensor({4, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});

  std::vector<std::uint8_t> exclude(16, 0);
  exclude[5] = exclude[6] = exclude[9] = 1;
  check("instance_norm",
        [](std::span<const Tensor> in) { return instance_norm(in[0], in[1], in[2]); },
        {random_tensor({3, 4, 4}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});
  check("instance_norm masked statistics",
        [exclude](std::span<const Tensor> in) { return instance_norm(in[0], in[1], in[2], exclude); },
        {random_tensor({3, 4, 4}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});

  // Two latent cells masked on a 2x2 grid with one condition token.
  masks::QuantMask mq(2, 2);
  mq.set(1);
  mq.set(2);
  const masks::TokenGrouping g = masks::group_tokens(mq, 1, masks::GroupingUse::kTraining);
  const masks::AttnMask la = masks::build_la_mask(g);
  const int s = la.size();
  const int d = 8;

  check("masked attention",
        [la](std::span<const Tensor> in) {
          transformer::AttentionLayer layer;
          layer.heads = 2;
          const int width = in[0].dim(1);
          layer.query = linear(in[1], width);
          layer.key = linear(in[2], width);
          layer.value = linear(in[3], width);
          layer.output = linear(in[4], width);
          return transformer::masked_attention(in[0], la, layer);
        },
        {random_tensor({s, d}, rng), random_tensor({d, d}, rng, 0.5), random_tensor({d, d}, rng, 0.5),
         random_tensor({d, d}, rng, 0.5), random_tensor({d, d}, rng, 0.5)});

  transformer::TransformerConfig tc;
  tc.depth = 1;
  tc.d_model = d;
  tc.heads = 2;
  tc.d_ff = 16;
  tc.dropout = 0.0;
  Rng init(seed + 1);
  const transformer::TransformerBlock block(tc, init);
  check("transformer block",
        [la, block](std::span<const Tensor> in) { return block.forward(in[0], la, 0.0, nullptr); },
        {random_tensor({s, d}, rng)});

  const std::vector<int> targets{3, 0, 5, 1};
  check("masked_nll",
        [g, targets](std::span<const Tensor> in) { return transformer::masked_nll(in[0], targets, g); },
        {random_tensor({s, 6}, rng)});
  return out;
}

}  // namespace lar::pipeline
