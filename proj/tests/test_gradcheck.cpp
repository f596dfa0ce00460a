#include <set>

#include <gtest/gtest.h>

#include "drpoint/gradcheck.hpp"

using namespace drpoint;

TEST(Gradcheck, AllOpsPass) {
    const GradcheckReport r = finite_difference_check("all");
    EXPECT_TRUE(r.pass());
    std::set<std::string> ops;
    for (const auto& b : r.blocks) {
        ops.insert(b.op);
        EXPECT_GT(b.checked, 0) << b.op << "/" << b.block;
        EXPECT_LT(b.max_rel_error, 1e-3) << b.op << "/" << b.block;
    }
    EXPECT_EQ(ops.size(), gradcheck_ops().size());
}

TEST(Gradcheck, RenderPipelineCriterion) {
    GradcheckOptions opt;
    opt.h = 1e-4;
    opt.tolerance = 1e-3;
    opt.instances = 20;
    const GradcheckReport r = finite_difference_check("dr_loss", opt);
    ASSERT_FALSE(r.blocks.empty());
    EXPECT_TRUE(r.pass());
}

TEST(Gradcheck, SignFlipIsCaught) {
    GradcheckOptions opt;
    opt.flip_sign = true;
    opt.instances = 3;
    for (const std::string& op : {"render", "dr_loss", "chamfer", "nce", "encoder"})
        EXPECT_FALSE(finite_difference_check(op, opt).pass()) << op;
}

TEST(Gradcheck, ZeroCotangentPasses) {
    GradcheckOptions opt;
    opt.zero_cotangent = true;
    opt.instances = 3;
    const GradcheckReport r = finite_difference_check("all", opt);
    EXPECT_TRUE(r.pass());
    for (const auto& b : r.blocks) EXPECT_EQ(b.max_rel_error, 0.0) << b.op << "/" << b.block;
}

TEST(Gradcheck, OpFilterAndUnknownOp) {
    const GradcheckReport r = finite_difference_check("chamfer");
    ASSERT_FALSE(r.blocks.empty());
    for (const auto& b : r.blocks) EXPECT_EQ(b.op, "chamfer");
    EXPECT_THROW(finite_difference_check("nope"), DomainError);
}

TEST(Gradcheck, UnreachableToleranceFails) {
    GradcheckOptions opt;
    opt.tolerance = 1e-12;
    opt.instances = 2;
    EXPECT_FALSE(finite_difference_check("render", opt).pass());
}

TEST(Gradcheck, RelativeErrorDefinition) {
    EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
    EXPECT_EQ(relative_error(1.0, -1.0), 2.0);
    EXPECT_NEAR(relative_error(1e-9, 0.0), 0.1, 1e-15);
}
