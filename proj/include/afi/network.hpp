#pragma once

#include <array>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "afi/blocks.hpp"

namespace afi {

// Two reconcilable constructions of an attention stage:
//   paper-text: every block uses the shrinking first kernel; the attention
//     input set holds strictly earlier stage features (the first block falls
//     back to its own feature, the second sees a single feature and is
//     bypassed). Scoring modules sit in blocks 3..N.
//   table-2: the stage head stays a full-width standard block; blocks 2..N
//     are attention blocks whose input set includes the current feature.
//     Cost accounting charges the scoring at ledger arities 2..N (one above
//     the evaluated fan-in); both figures are reported by the analyzer.
enum class Preset { PaperText, Table2 };

inline std::string preset_name(Preset p) {
    return p == Preset::PaperText ? "paper-text" : "table-2";
}

inline Preset preset_from_name(const std::string& name) {
    if (name == "paper-text") return Preset::PaperText;
    if (name == "table-2") return Preset::Table2;
    throw ConfigError("unknown preset '" + name + "' (expected paper-text or table-2)");
}

struct NetworkConfig {
    int blocks_per_stage = 5;  // depth = 6*N + 2
    std::array<int, 3> stage_channels{16, 32, 64};
    int num_classes = 100;
    int reduction = 4;
    Preset preset = Preset::Table2;
    std::set<int> afi_stages{1, 2, 3};
    uint64_t seed = 1;

    int depth() const { return 6 * blocks_per_stage + 2; }

    void validate() const {
        check_config(blocks_per_stage >= 1, "network: blocks_per_stage must be >= 1");
        check_config(num_classes >= 2, "network: num_classes must be >= 2");
        check_config(reduction >= 1, "network: reduction ratio must be >= 1");
        for (int s : afi_stages)
            check_config(s >= 1 && s <= 3,
                         "network: afi_stages entries must be in {1,2,3}, got " + std::to_string(s));
        for (int c : stage_channels) check_config(c >= 2, "network: stage channels must be >= 2");
    }

    static int blocks_for_depth(int depth) {
        check_config(depth >= 8 && (depth - 2) % 6 == 0,
                     "network: depth must be 6*N+2 with N >= 1, got " + std::to_string(depth));
        return (depth - 2) / 6;
    }
};

enum class BlockKind { Standard, AfiBasic, AfiMobileNetV2 };

// Symbolic block description shared by the runtime builder and the static
// cost analyzer. `afi_input_arity` is the arity the accounting charges for
// the scoring function; `runtime_arity` is the fan-in the forward pass
// actually evaluates (single-feature sets bypass the scoring entirely).
struct BlockSpec {
    BlockKind kind = BlockKind::Standard;
    int in_channels = 0;
    int channels = 0;
    int stride = 1;
    bool has_afi = false;
    int afi_input_arity = 0;
    int runtime_arity = 0;
};

struct StagePlan {
    int index = 0;  // 1-based
    int channels = 0;
    std::vector<BlockSpec> blocks;
};

inline std::vector<StagePlan> plan_network(const NetworkConfig& config) {
    config.validate();
    const int n = config.blocks_per_stage;
    std::vector<StagePlan> plan;
    int in_channels = config.stage_channels[0];  // stem output width
    for (int s = 1; s <= 3; ++s) {
        StagePlan stage;
        stage.index = s;
        stage.channels = config.stage_channels[size_t(s - 1)];
        const bool attentive = config.afi_stages.count(s) > 0;
        for (int b = 1; b <= n; ++b) {
            BlockSpec spec;
            spec.in_channels = (b == 1) ? in_channels : stage.channels;
            spec.channels = stage.channels;
            spec.stride = (b == 1 && s > 1) ? 2 : 1;
            if (!attentive) {
                spec.kind = BlockKind::Standard;
            } else if (config.preset == Preset::Table2) {
                if (b == 1) {
                    spec.kind = BlockKind::Standard;
                } else {
                    spec.kind = BlockKind::AfiBasic;
                    spec.has_afi = true;
                    spec.afi_input_arity = b;
                    spec.runtime_arity = b - 1;
                }
            } else {  // Preset::PaperText
                spec.kind = BlockKind::AfiBasic;
                if (b >= 3) {
                    spec.has_afi = true;
                    spec.afi_input_arity = b - 1;
                    spec.runtime_arity = b - 1;
                } else {
                    spec.runtime_arity = 1;
                }
            }
            stage.blocks.push_back(spec);
        }
        in_channels = stage.channels;
        plan.push_back(std::move(stage));
    }
    return plan;
}

template <class S>
struct NetworkBlock {
    BlockSpec spec;
    std::variant<BasicBlock<S>, AfiBasicBlock<S>> impl;
};

// Stem conv (3x3 to the first stage width), three stages of blocks, global
// pooling and a biased classifier. Feature stacks live per stage and reset
// at every spatial-resolution change.
template <class S>
class Network {
public:
    NetworkConfig config;
    Conv2dLayer<S> stem_conv;
    BatchNorm2dLayer<S> stem_bn;
    std::vector<std::vector<NetworkBlock<S>>> stages;
    LinearLayer<S> head;

    Tensor<S> forward(Tape<S>& tape, const Tensor<S>& images, Mode mode,
                      const HookFn<S>* hook = nullptr) {
        auto x = ops::relu(tape, stem_bn.forward(tape, stem_conv.forward(tape, images), mode));
        if (hook && *hook) (*hook)("stem", x);
        for (auto& stage : stages) {
            FeatureStack<S> stack;
            for (auto& block : stage) {
                if (auto* basic = std::get_if<BasicBlock<S>>(&block.impl)) {
                    x = basic->forward(tape, x, mode, hook);
                } else {
                    x = std::get<AfiBasicBlock<S>>(block.impl)
                            .forward(tape, x, stack, mode, hook);
                }
            }
        }
        auto pooled = ops::global_avg_pool(tape, x);
        return head.forward(tape, pooled);
    }

    std::vector<Param<S>> named_tensors() const {
        std::vector<Param<S>> out;
        stem_conv.collect("stem.conv", out);
        stem_bn.collect("stem.bn", out);
        for (size_t s = 0; s < stages.size(); ++s)
            for (size_t b = 0; b < stages[s].size(); ++b) {
                const std::string prefix =
                    "s" + std::to_string(s + 1) + ".b" + std::to_string(b + 1);
                std::visit([&](const auto& impl) { impl.collect(prefix, out); },
                           stages[s][b].impl);
            }
        head.collect("head", out);
        return out;
    }

    std::vector<Param<S>> parameters() const {
        std::vector<Param<S>> out;
        for (auto& p : named_tensors())
            if (p.trainable) out.push_back(p);
        return out;
    }

    int64_t parameter_count() const {
        int64_t total = 0;
        for (const auto& p : parameters()) total += p.tensor->numel();
        return total;
    }

    std::vector<std::string> hook_tags() const {
        std::vector<std::string> tags{"stem"};
        for (size_t s = 0; s < stages.size(); ++s)
            for (size_t b = 0; b < stages[s].size(); ++b) {
                const std::string prefix =
                    "s" + std::to_string(s + 1) + ".b" + std::to_string(b + 1);
                tags.push_back(prefix + ".x");
                if (stages[s][b].spec.kind == BlockKind::AfiBasic) tags.push_back(prefix + ".afi");
                tags.push_back(prefix + ".out");
            }
        return tags;
    }
};

template <class S>
Network<S> build_network(const NetworkConfig& config) {
    auto plan = plan_network(config);
    Network<S> net;
    net.config = config;
    Rng rng(config.seed);

    net.stem_conv = Conv2dLayer<S>::init(3, config.stage_channels[0], 3, 1, 1, rng);
    net.stem_bn = BatchNorm2dLayer<S>::init(config.stage_channels[0]);

    for (const auto& stage : plan) {
        std::vector<NetworkBlock<S>> blocks;
        for (size_t b = 0; b < stage.blocks.size(); ++b) {
            const BlockSpec& spec = stage.blocks[b];
            const std::string tag =
                "s" + std::to_string(stage.index) + ".b" + std::to_string(b + 1);
            NetworkBlock<S> block;
            block.spec = spec;
            if (spec.kind == BlockKind::Standard) {
                auto impl =
                    BasicBlock<S>::init(spec.in_channels, spec.channels, spec.stride, rng);
                impl.tag = tag;
                block.impl = std::move(impl);
            } else {
                auto impl = AfiBasicBlock<S>::init(spec.in_channels, spec.channels, spec.stride,
                                                   spec.has_afi, config.reduction,
                                                   config.preset == Preset::Table2, rng);
                impl.tag = tag;
                block.impl = std::move(impl);
            }
            blocks.push_back(std::move(block));
        }
        net.stages.push_back(std::move(blocks));
    }

    net.head = LinearLayer<S>::init(config.stage_channels[2], config.num_classes, true, rng);
    return net;
}

}  // namespace afi
