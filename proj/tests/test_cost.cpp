#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "omnimix/cost.hpp"
#include "omnimix/discriminator.hpp"
#include "omnimix/generator.hpp"
#include "omnimix/layers.hpp"
#include "support.hpp"

using namespace omnimix;
using omnimix::testing::uniform;

namespace {

// Hand-computed accounting for this configuration (see HandComputedFixture).
ModelConfig hand_config() {
  ModelConfig c;
  c.gen.blocks = 2;
  c.gen.base_patch = 2;
  c.gen.widths = {4, 3};
  c.gen.z_dim = 3;
  c.gen.num_classes = 2;
  c.gen.height = 4;
  c.gen.layers_per_block = 1;
  c.disc.width = 4;
  c.disc.layers = 1;
  c.disc.patch = 2;
  return c;
}

// Brute force: actual parameter registry size and multiply-accumulates
// issued by one single-image forward pass.
Cost measured_generator(const ModelConfig& config) {
  Generator<float> gen(config, 0);
  Rng rng(1);
  const std::size_t H = config.gen.height, W = config.gen.width();
  auto x = uniform<float>({1, 3, H, W}, rng);
  auto z = gen.sample_latent(1, rng);
  NoGradGuard no_grad;
  MacCounter counter;
  gen.generate(x, z, {0}, false);
  return {gen.params().parameter_count(), counter.count()};
}

Cost measured_discriminator(const ModelConfig& config) {
  Discriminator<float> d(config, 0);
  Rng rng(1);
  auto x = uniform<float>({1, 6, config.gen.height, config.gen.width()}, rng);
  NoGradGuard no_grad;
  MacCounter counter;
  d.discriminate(x, true);
  return {d.params().parameter_count(), counter.count()};
}

std::map<std::string, std::string> parse_block(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find(" = ");
    EXPECT_NE(eq, std::string::npos) << line;
    kv[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return kv;
}

}  // namespace

TEST(Cost, SingleAffine) {
  EXPECT_EQ(affine_cost(4, 3, 1), (Cost{15, 12}));
  ParameterSet<float> p;
  Rng rng(0);
  auto fc = make_affine(p, "fc", 4, 3, rng);
  MacCounter counter;
  fc(uniform<float>({1, 4}, rng));
  EXPECT_EQ(p.parameter_count(), 15u);
  EXPECT_EQ(counter.count(), 12u);
}

TEST(Cost, TwoLayerNetMatchesInstrumentedCount) {
  ParameterSet<float> p;
  Rng rng(0);
  auto a = make_affine(p, "a", 7, 5, rng), b = make_affine(p, "b", 5, 2, rng);
  Cost analytic = affine_cost(7, 5, 9);
  analytic += affine_cost(5, 2, 9);
  MacCounter counter;
  b(gelu(a(uniform<float>({9, 7}, rng))));
  EXPECT_EQ(analytic, (Cost{p.parameter_count(), counter.count()}));
}

TEST(Cost, DepthwiseAndTransposedConvMatchInstrumentedCount) {
  Rng rng(0);
  {
    MacCounter counter;
    depthwise_conv2d(uniform<float>({1, 5, 7, 4}, rng), uniform<float>({3, 3, 4}, rng),
                     uniform<float>({4}, rng));
    EXPECT_EQ(depthwise_cost(3, 5, 7, 4).macs, counter.count());
  }
  {
    MacCounter counter;
    conv_transpose2d(uniform<float>({1, 3, 4, 5}, rng), uniform<float>({5, 4, 4, 2}, rng),
                     uniform<float>({2}, rng), 2, 1);
    EXPECT_EQ(transposed_conv_cost(4, 3, 4, 5, 2).macs, counter.count());
  }
}

TEST(Cost, GeneratorMatchesBruteForceAcrossConfigs) {
  std::vector<ModelConfig> configs{hand_config(), ModelConfig{}};
  for (int toggle = 0; toggle < 4; ++toggle) {
    auto c = hand_config();
    c.gen.blocks = 3;
    c.gen.base_patch = 4;
    c.gen.widths = {6, 4, 5};
    c.gen.height = 8;
    c.gen.layers_per_block = 2;
    c.ablate.plain_bn = toggle == 1;
    c.ablate.single_input = toggle == 2;
    c.ablate.no_mixer_block1 = toggle == 3;
    configs.push_back(c);
  }
  for (const auto& c : configs) {
    auto report = generator_cost(c);
    EXPECT_EQ(report.total, measured_generator(c));
    EXPECT_EQ(count_params_macs(c), report.total);
    Cost parts;
    for (const auto& p : report.parts) parts += p.cost;
    EXPECT_EQ(parts, report.total);
  }
}

TEST(Cost, DiscriminatorMatchesBruteForce) {
  for (auto c : {hand_config(), ModelConfig{}}) {
    EXPECT_EQ(discriminator_cost(c).total, measured_discriminator(c));
  }
}

TEST(Cost, HandComputedFixture) {
  // block1 (2×4 tokens, width 4): embed 52/384, compress 32/224, norms 32/0,
  //   token MLP 144/512, channel MLP 76/512, to_rgb 15/96, split 60/384
  // block2 (4×8 tokens, width 3): embed 12/288, norms 24/0, depthwise 60/1728,
  //   channel MLP 45/1152, to_rgb 12/288
  auto r = generator_cost(hand_config());
  ASSERT_EQ(r.parts.size(), 2u);
  EXPECT_EQ(r.parts[0].cost, (Cost{411, 2112}));
  EXPECT_EQ(r.parts[1].cost, (Cost{153, 3456}));
  EXPECT_EQ(r.total, (Cost{564, 5568}));
  // peak at block 2: canvas 96 + rgb 96 + in/out 192 + hidden 192 floats
  EXPECT_EQ(r.activation_peak_bytes, 576u * 4);
}

TEST(Cost, ReportIsKeyValueBlockWithTableRow) {
  auto report = generator_cost(ModelConfig{});
  auto text = format_cost_report("generator", report);
  auto kv = parse_block(text);
  EXPECT_EQ(kv.at("generator.total.params"), std::to_string(count_params_macs(ModelConfig{}).params));
  EXPECT_EQ(kv.at("generator.total.macs"), std::to_string(count_params_macs(ModelConfig{}).macs));
  EXPECT_EQ(kv.at("generator.block3.params"), std::to_string(report.parts[2].cost.params));
  EXPECT_TRUE(kv.count("generator.activation_peak_bytes"));
  EXPECT_NE(text.find("# generator | params [M] 0.65 | MAC [G] 0.06"), std::string::npos) << text;
}
