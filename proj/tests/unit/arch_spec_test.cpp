/* Copyright 2026 The cxrnet Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "cxr/arch_spec.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "oracles.hpp"
#include "temp_dir.hpp"

namespace cxr {
namespace {

LayerSpec layer(LayerKind kind, int out = 0, int kernel = 1, int stride = 1) {
  LayerSpec l;
  l.kind = kind;
  l.out_channels = out;
  l.kernel = kernel;
  l.stride = stride;
  return l;
}

TEST(SamePaddingTest, OutputIsCeil) {
  EXPECT_EQ(same_output(480, 2), 240);
  EXPECT_EQ(same_output(7, 2), 4);
  EXPECT_EQ(same_output(5, 1), 5);
  EXPECT_EQ(same_pad_before(5, 3, 1), 1);
  EXPECT_EQ(same_pad_before(480, 3, 2), 0);
  EXPECT_EQ(same_pad_before(7, 3, 2), 1);
}

TEST(PlanShapesTest, ReferenceSpecShapes) {
  const ShapePlan p = plan_shapes(reference_spec("cxr2-tiny"));
  EXPECT_EQ(p.outputs[0], (Shape3{16, 240, 240}));
  EXPECT_EQ(p.outputs[4], (Shape3{32, 120, 120}));
  EXPECT_EQ(p.outputs[6], (Shape3{64, 60, 60}));
  EXPECT_EQ(p.outputs[10], (Shape3{64, 30, 30}));
  EXPECT_EQ(p.final_shape, (Shape3{64, 1, 1}));
  ASSERT_EQ(p.needs_adapter.size(), 2u);
  EXPECT_TRUE(p.needs_adapter[0]);
  EXPECT_FALSE(p.needs_adapter[1]);
}

TEST(PlanShapesTest, PointwiseNeedsKernelOne) {
  ArchSpec s;
  s.input = {1, 8, 8};
  s.layers = {layer(LayerKind::conv_pointwise, 4, 3)};
  try {
    plan_shapes(s);
    FAIL();
  } catch (const SpecError& e) {
    EXPECT_EQ(e.layer_index(), 0);
  }
}

TEST(PlanShapesTest, DepthwiseChannelRule) {
  ArchSpec s;
  s.input = {3, 8, 8};
  LayerSpec d = layer(LayerKind::conv_depthwise, 7, 3);
  d.multiplier = 2;
  s.layers = {layer(LayerKind::conv_pointwise, 3), d};
  try {
    plan_shapes(s);
    FAIL();
  } catch (const SpecError& e) {
    EXPECT_EQ(e.layer_index(), 1);
  }
  s.layers[1].out_channels = 6;
  EXPECT_EQ(plan_shapes(s).outputs[1].channels, 6);
}

TEST(PlanShapesTest, SkipSpatialMismatchNamesJunction) {
  ArchSpec s;
  s.input = {1, 8, 8};
  LayerSpec pool = layer(LayerKind::pool, 0, 2, 2);
  s.layers = {layer(LayerKind::conv_pointwise, 4), layer(LayerKind::activation), pool,
              layer(LayerKind::activation)};
  s.long_range_edges = {{0, 3}};
  try {
    plan_shapes(s);
    FAIL();
  } catch (const SpecError& e) {
    EXPECT_EQ(e.layer_index(), 3);
    EXPECT_NE(std::string(e.what()).find("layer 3"), std::string::npos);
  }
}

TEST(PlanShapesTest, BackwardEdgeRejected) {
  ArchSpec s;
  s.input = {1, 8, 8};
  s.layers = {layer(LayerKind::activation), layer(LayerKind::activation)};
  s.long_range_edges = {{1, 0}};
  EXPECT_THROW(plan_shapes(s), SpecError);
}

TEST(PRPESpecTest, InternalChannels) {
  PRPEBlockSpec b;
  b.in_channels = 8;
  b.project_ratio = 0.5;
  EXPECT_EQ(b.internal_channels(), 4);
  b.project_ratio = 0.01;
  EXPECT_EQ(b.internal_channels(), 1);
  b.project_ratio = 0.3;  // 2.4
  EXPECT_EQ(b.internal_channels(), 2);
  b.replicas = 3;
  b.replication = Replication::concat;
  EXPECT_EQ(b.merged_channels(), 6);
}

TEST(SpecJsonTest, RoundTripReferenceSpecs) {
  for (const auto& name : reference_spec_names()) {
    const ArchSpec s = reference_spec(name);
    const ArchSpec back = spec_from_json(spec_to_json(s));
    EXPECT_EQ(spec_to_json(back), spec_to_json(s));
    EXPECT_EQ(spec_hash(back), spec_hash(s));
  }
}

TEST(SpecJsonTest, RoundTripRandomSpecs) {
  std::mt19937_64 gen(8);
  for (int i = 0; i < 50; ++i) {
    const ArchSpec s = cxr_test::random_spec(gen);
    const ArchSpec back = spec_from_json(spec_to_json(s));
    EXPECT_EQ(spec_to_json(back), spec_to_json(s));
  }
}

TEST(SpecJsonTest, ShippedFilesMatchBuiltins) {
  for (const auto& name : reference_spec_names()) {
    const ArchSpec file = load_spec(std::filesystem::path(CXRNET_SOURCE_DIR) / "specs" / (name + ".json"));
    EXPECT_EQ(spec_hash(file), spec_hash(reference_spec(name))) << name;
  }
}

TEST(SpecJsonTest, ErrorsNameLayer) {
  const std::string text =
      R"({"input":{"channels":1,"height":8,"width":8},"layers":[{"kind":"activation"},{"kind":"warp"}]})";
  try {
    spec_from_json(text);
    FAIL();
  } catch (const SpecError& e) {
    EXPECT_EQ(e.layer_index(), 1);
  }
  EXPECT_THROW(spec_from_json("{not json"), SpecError);
}

TEST(SpecJsonTest, HeadIsOptional) {
  const ArchSpec s =
      spec_from_json(R"({"input":{"channels":1,"height":4,"width":4},"layers":[]})");
  EXPECT_FALSE(s.head);
  EXPECT_TRUE(s.layers.empty());
}

TEST(ResolveSpecTest, NamesAndFiles) {
  EXPECT_EQ(resolve_spec("toy-prpe").input.height, 32);
  cxr_test::TempDir tmp("spec");
  const ArchSpec s = reference_spec("toy-prpe");
  {
    std::ofstream f(tmp / "s.json");
    f << spec_to_json(s);
  }
  EXPECT_EQ(spec_hash(resolve_spec((tmp / "s.json").string())), spec_hash(s));
  EXPECT_THROW(resolve_spec((tmp / "none.json").string()), Error);
}

}  // namespace
}  // namespace cxr
