#include "utrans/gradcheck.hpp"

#include "utrans/backbone.hpp"

namespace utrans {

namespace {

using gradcheck_detail::compare;
using gradcheck_detail::project;
using gradcheck_detail::rand_tensor;

using Fwd = std::function<Tensor<double>(std::vector<Tensor<double>>&)>;

struct Case {
    std::vector<Tensor<double>> inputs;
    Fwd fwd;
};

std::vector<Case> cases_for(const std::string& op) {
    std::vector<Case> cs;
    auto rng_for = [](uint64_t i) { return std::mt19937_64(mix_seed(0x5eedULL, i)); };

    if (op == "matmul") {
        std::vector<std::pair<Shape, Shape>> shapes = {
            {Shape{3, 4}, Shape{4, 5}}, {Shape{2, 2}, Shape{2, 2}},
            {Shape{5, 3}, Shape{3, 2}}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i);
            cs.push_back({{rand_tensor(shapes[i].first, rng),
                           rand_tensor(shapes[i].second, rng)},
                          [i](std::vector<Tensor<double>>& in) {
                              return project(matmul(in[0], in[1]), 77 + i);
                          }});
        }
    } else if (op == "transpose") {
        for (size_t i = 0; i < 3; ++i) {
            auto rng = rng_for(i);
            cs.push_back({{rand_tensor(Shape{2 + (int)i, 3 + (int)i}, rng)},
                          [i](std::vector<Tensor<double>>& in) {
                              return project(transpose2d(in[0]), 78 + i);
                          }});
        }
    } else if (op == "conv2d") {
        struct C { Shape x, w; Padding p; };
        std::vector<C> shapes = {
            {Shape{2, 3, 8, 8}, Shape{4, 3, 3, 3}, Padding::Same},
            {Shape{1, 1, 5, 5}, Shape{2, 1, 3, 3}, Padding::Valid},
            {Shape{2, 2, 6, 6}, Shape{3, 2, 1, 1}, Padding::Same}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i);
            Padding p = shapes[i].p;
            cs.push_back({{rand_tensor(shapes[i].x, rng),
                           rand_tensor(shapes[i].w, rng),
                           rand_tensor(Shape{shapes[i].w[0]}, rng)},
                          [i, p](std::vector<Tensor<double>>& in) {
                              return project(conv2d(in[0], in[1], in[2], p), 79 + i);
                          }});
        }
    } else if (op == "maxpool2d") {
        std::vector<Shape> shapes = {Shape{1, 2, 4, 4}, Shape{2, 1, 6, 6},
                                     Shape{1, 1, 8, 8}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 10);
            cs.push_back({{rand_tensor(shapes[i], rng)},
                          [i](std::vector<Tensor<double>>& in) {
                              return project(maxpool2d(in[0]), 80 + i);
                          }});
        }
    } else if (op == "avgpool2d") {
        std::vector<Shape> shapes = {Shape{1, 2, 4, 4}, Shape{2, 1, 8, 8},
                                     Shape{1, 3, 6, 6}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 20);
            cs.push_back({{rand_tensor(shapes[i], rng)},
                          [i](std::vector<Tensor<double>>& in) {
                              return project(avgpool2d(in[0], 2), 81 + i);
                          }});
        }
    } else if (op == "upsample_nearest") {
        std::vector<Shape> shapes = {Shape{1, 1, 1, 1}, Shape{2, 2, 3, 3},
                                     Shape{1, 3, 4, 2}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 30);
            cs.push_back({{rand_tensor(shapes[i], rng)},
                          [i](std::vector<Tensor<double>>& in) {
                              return project(upsample_nearest2(in[0]), 82 + i);
                          }});
        }
    } else if (op == "upsample_bilinear") {
        struct C { Shape x; int oh, ow; };
        std::vector<C> shapes = {{Shape{1, 1, 2, 2}, 4, 4},
                                 {Shape{2, 2, 3, 5}, 7, 3},
                                 {Shape{1, 1, 4, 4}, 4, 4}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 40);
            int oh = shapes[i].oh, ow = shapes[i].ow;
            cs.push_back({{rand_tensor(shapes[i].x, rng)},
                          [i, oh, ow](std::vector<Tensor<double>>& in) {
                              return project(upsample_bilinear(in[0], oh, ow), 83 + i);
                          }});
        }
    } else if (op == "softmax") {
        struct C { Shape x; int axis; };
        std::vector<C> shapes = {{Shape{1, 16}, 1}, {Shape{3, 5}, 1},
                                 {Shape{2, 3, 4}, 1}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 50);
            int ax = shapes[i].axis;
            cs.push_back({{rand_tensor(shapes[i].x, rng)},
                          [i, ax](std::vector<Tensor<double>>& in) {
                              return project(softmax(in[0], ax), 84 + i);
                          }});
        }
    } else if (op == "relu") {
        std::vector<Shape> shapes = {Shape{7}, Shape{3, 4}, Shape{1, 2, 3, 4}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 60);
            // keep samples away from the kink for finite differences
            cs.push_back({{rand_tensor(shapes[i], rng, 1e-2)},
                          [i](std::vector<Tensor<double>>& in) {
                              return project(relu(in[0]), 85 + i);
                          }});
        }
    } else if (op == "sigmoid") {
        std::vector<Shape> shapes = {Shape{7}, Shape{3, 4}, Shape{2, 2, 2, 2}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 70);
            cs.push_back({{rand_tensor(shapes[i], rng)},
                          [i](std::vector<Tensor<double>>& in) {
                              return project(sigmoid(in[0]), 86 + i);
                          }});
        }
    } else if (op == "add" || op == "mul") {
        bool is_add = op == "add";
        std::vector<Shape> shapes = {Shape{7}, Shape{3, 4}, Shape{2, 2, 3, 3}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 90);
            cs.push_back({{rand_tensor(shapes[i], rng), rand_tensor(shapes[i], rng)},
                          [i, is_add](std::vector<Tensor<double>>& in) {
                              Tensor<double> o = is_add ? add(in[0], in[1])
                                                        : mul(in[0], in[1]);
                              return project(o, 87 + i);
                          }});
        }
    } else if (op == "add_rowvec") {
        std::vector<Shape> shapes = {Shape{3, 4}, Shape{1, 5}, Shape{6, 2}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 100);
            cs.push_back({{rand_tensor(shapes[i], rng),
                           rand_tensor(Shape{shapes[i][1]}, rng)},
                          [i](std::vector<Tensor<double>>& in) {
                              return project(add_rowvec(in[0], in[1]), 88 + i);
                          }});
        }
    } else if (op == "concat") {
        struct C { Shape a, b; int axis; };
        std::vector<C> shapes = {{Shape{1, 2, 2, 2}, Shape{1, 3, 2, 2}, 1},
                                 {Shape{3, 2}, Shape{3, 4}, 1},
                                 {Shape{2, 2, 4, 4}, Shape{2, 1, 4, 4}, 1}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 110);
            int ax = shapes[i].axis;
            cs.push_back({{rand_tensor(shapes[i].a, rng),
                           rand_tensor(shapes[i].b, rng)},
                          [i, ax](std::vector<Tensor<double>>& in) {
                              return project(concat(in[0], in[1], ax), 89 + i);
                          }});
        }
    } else if (op == "tokens") {
        std::vector<Shape> shapes = {Shape{1, 2, 2, 2}, Shape{2, 3, 2, 4},
                                     Shape{1, 4, 4, 4}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 120);
            int h = shapes[i][2], w = shapes[i][3];
            cs.push_back({{rand_tensor(shapes[i], rng)},
                          [i, h, w](std::vector<Tensor<double>>& in) {
                              return project(
                                  map_from_tokens(tokens_from_map(in[0]), h, w),
                                  90 + i);
                          }});
        }
    } else if (op == "batchnorm") {
        std::vector<Shape> shapes = {Shape{2, 2, 3, 3}, Shape{4, 1, 2, 2},
                                     Shape{3, 3, 2, 2}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 130);
            int c = shapes[i][1];
            cs.push_back({{rand_tensor(shapes[i], rng),
                           rand_tensor(Shape{c}, rng), rand_tensor(Shape{c}, rng)},
                          [i](std::vector<Tensor<double>>& in) {
                              int c = in[1].shape()[0];
                              Tensor<double> rm(Shape{c}), rv(Shape{c}, 1.0);
                              return project(batchnorm(in[0], in[1], in[2], rm,
                                                       rv, true),
                                             91 + i);
                          }});
        }
    } else if (op == "cross_entropy" || op == "dice_loss") {
        bool ce = op == "cross_entropy";
        std::vector<Shape> shapes = {Shape{1, 4, 2, 2}, Shape{2, 3, 4, 4},
                                     Shape{1, 2, 3, 3}};
        for (size_t i = 0; i < shapes.size(); ++i) {
            auto rng = rng_for(i + 140);
            Shape s = shapes[i];
            long npix = static_cast<long>(s[0]) * s[2] * s[3];
            std::uniform_int_distribution<int> lab(0, s[1] - 1);
            auto labels = std::make_shared<std::vector<uint8_t>>();
            for (long p = 0; p < npix; ++p)
                labels->push_back(static_cast<uint8_t>(lab(rng)));
            cs.push_back({{rand_tensor(s, rng)},
                          [labels, ce](std::vector<Tensor<double>>& in) {
                              return ce ? cross_entropy(in[0], *labels)
                                        : dice_loss(in[0], *labels);
                          }});
        }
    } else if (op == "mhsa" || op == "mhca") {
        bool self = op == "mhsa";
        for (size_t i = 0; i < 3; ++i) {
            auto rng = rng_for(i + 150);
            std::vector<Tensor<double>> inputs;
            if (self) {
                auto blk = std::make_shared<MhsaBlock<double>>(
                    MhsaBlock<double>::make(8, 2, /*pe=*/true));
                inputs.push_back(rand_tensor(Shape{1, 8, 4, 4}, rng));
                blk->visit("m", [&](const std::string&, Tensor<double>& t,
                                    InitKind, bool) {
                    std::uniform_real_distribution<double> d(-0.5, 0.5);
                    for (auto& v : t.value()) v = d(rng);
                    inputs.push_back(t);
                });
                cs.push_back({inputs, [blk](std::vector<Tensor<double>>& in) {
                                  return project(blk->forward(in[0], nullptr), 93);
                              }});
            } else {
                auto blk = std::make_shared<MhcaBlock<double>>(
                    MhcaBlock<double>::make(8, 8, 2, /*pe=*/true, 16));
                inputs.push_back(rand_tensor(Shape{1, 8, 4, 4}, rng));  // S
                inputs.push_back(rand_tensor(Shape{1, 8, 2, 2}, rng));  // Y
                blk->visit("m", [&](const std::string&, Tensor<double>& t,
                                    InitKind, bool) {
                    std::uniform_real_distribution<double> d(-0.5, 0.5);
                    for (auto& v : t.value()) v = d(rng);
                    inputs.push_back(t);
                });
                cs.push_back({inputs, [blk](std::vector<Tensor<double>>& in) {
                                  auto r = blk->forward(in[0], in[1], nullptr);
                                  return project(r.out, 94);
                              }});
            }
        }
    } else {
        throw ValueError("unknown op name '" + op + "'");
    }
    return cs;
}

}  // namespace

std::vector<std::string> gradcheck_ops() {
    return {"matmul",    "transpose",     "conv2d",        "maxpool2d",
            "avgpool2d", "upsample_nearest", "upsample_bilinear", "softmax",
            "relu",      "sigmoid",       "add",           "mul",
            "add_rowvec", "concat",       "tokens",        "batchnorm",
            "cross_entropy", "dice_loss", "mhsa",          "mhca"};
}

CheckReport grad_check(const std::string& op, double tol) {
    CheckReport rep;
    rep.op = op;
    for (auto& c : cases_for(op)) {
        rep.max_rel_err = std::max(rep.max_rel_err, compare(c.inputs, c.fwd));
        ++rep.cases;
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

}  // namespace utrans
