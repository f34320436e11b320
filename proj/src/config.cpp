// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <utility>

#include <yaml-cpp/yaml.h>

#include "blockprefill/errors.hpp"

namespace blockprefill {

namespace {

template <typename Enum, std::size_t N>
using Names = std::array<std::pair<std::string_view, Enum>, N>;

constexpr Names<PrefillKind, 3> kModes{{{"bulk", PrefillKind::bulk},
                                        {"blockwise", PrefillKind::blockwise},
                                        {"hybrid", PrefillKind::hybrid}}};
constexpr Names<Alignment, 2> kAlignments{{{"none", Alignment::none}, {"structure", Alignment::structure}}};
constexpr Names<BudgetMode, 2> kBudgetModes{{{"static", BudgetMode::fixed}, {"dynamic", BudgetMode::dynamic}}};
constexpr Names<ProxySource, 2> kProxySources{{{"prompt_first", ProxySource::prompt_first},
                                               {"block_local", ProxySource::block_local}}};
constexpr Names<StatsSource, 2> kStatsSources{{{"none", StatsSource::none},
                                               {"first_block", StatsSource::first_block}}};
constexpr Names<PromptPosition, 2> kPromptPositions{{{"first", PromptPosition::first},
                                                     {"last", PromptPosition::last}}};
constexpr Names<PolicyKind, 3> kPolicies{{{"snapkv", PolicyKind::query_aware},
                                          {"keydiff", PolicyKind::query_agnostic},
                                          {"random", PolicyKind::random_baseline}}};

template <typename Enum, std::size_t N>
std::string_view name_of(const Names<Enum, N>& names, Enum value) {
    for (const auto& [name, v] : names) {
        if (v == value) {
            return name;
        }
    }
    return "unknown";
}

std::string join_path(const std::string& section, const std::string& key) {
    return section.empty() ? key : section + "." + key;
}

std::string scalar_of(const YAML::Node& node, const std::string& path) {
    if (!node.IsScalar()) {
        throw ConfigError(path + ": expected a scalar value");
    }
    return node.Scalar();
}

std::uint64_t read_uint(const YAML::Node& node, const std::string& path) {
    const std::string text = scalar_of(node, path);
    std::uint64_t value = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size()) {
        throw ConfigError(path + ": expected a non-negative integer, got '" + text + "'");
    }
    return value;
}

double read_double(const YAML::Node& node, const std::string& path) {
    const std::string text = scalar_of(node, path);
    double value = 0.0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size() || !std::isfinite(value)) {
        throw ConfigError(path + ": expected a finite number, got '" + text + "'");
    }
    return value;
}

bool read_bool(const YAML::Node& node, const std::string& path) {
    const std::string text = scalar_of(node, path);
    bool value = false;
    if (!YAML::convert<bool>::decode(node, value)) {
        throw ConfigError(path + ": expected true or false, got '" + text + "'");
    }
    return value;
}

template <typename Enum, std::size_t N>
Enum read_enum(const YAML::Node& node, const std::string& path, const Names<Enum, N>& names) {
    const std::string text = scalar_of(node, path);
    std::string options;
    for (const auto& [name, value] : names) {
        if (name == text) {
            return value;
        }
        options += (options.empty() ? "" : ", ") + std::string(name);
    }
    throw ConfigError(path + ": unknown value '" + text + "' (expected one of " + options + ")");
}

std::vector<double> read_double_list(const YAML::Node& node, const std::string& path) {
    if (!node.IsSequence()) {
        throw ConfigError(path + ": expected a list of numbers");
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < node.size(); ++i) {
        out.push_back(read_double(node[i], path + "[" + std::to_string(i) + "]"));
    }
    return out;
}

/// Iterates a mapping section, rejecting keys outside `allowed`.
template <typename Fn>
void for_each_key(const YAML::Node& section,
                  const std::string& path,
                  std::initializer_list<std::string_view> allowed,
                  Fn&& fn) {
    if (!section || section.IsNull()) {
        return;
    }
    if (!section.IsMap()) {
        throw ConfigError((path.empty() ? std::string("document") : path) + ": expected a mapping");
    }
    for (const auto& kv : section) {
        const std::string key = kv.first.as<std::string>();
        const std::string full = join_path(path, key);
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError(full + ": unknown key");
        }
        fn(key, kv.second, full);
    }
}

void apply_override(YAML::Node& root, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "': expected key.path=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    YAML::Node value;
    try {
        value = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError(path + ": cannot parse override value '" + text + "': " + e.msg);
    }

    std::vector<std::string> parts;
    std::stringstream ss(path);
    for (std::string part; std::getline(ss, part, '.');) {
        if (part.empty()) {
            throw ConfigError("override '" + assignment + "': empty key in path");
        }
        parts.push_back(part);
    }
    YAML::Node cur = root;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cur[parts[i]] || cur[parts[i]].IsNull()) {
            cur[parts[i]] = YAML::Node(YAML::NodeType::Map);
        }
        cur.reset(cur[parts[i]]);
    }
    cur[parts.back()] = value;
}

RunConfig convert(const YAML::Node& root) {
    RunConfig cfg;
    for_each_key(root, "", {"model", "layout", "prefill", "task", "output"},
                 [&](const std::string& section, const YAML::Node& node, const std::string& path) {
        if (section == "model") {
            ModelConfig& m = cfg.model;
            for_each_key(node, path, {"layers", "heads", "d_model", "rope_base", "seed", "mlp_ratio"},
                         [&](const std::string& key, const YAML::Node& v, const std::string& p) {
                if (key == "layers") {
                    m.layers = read_uint(v, p);
                } else if (key == "heads") {
                    m.heads = read_uint(v, p);
                } else if (key == "d_model") {
                    m.d_model = read_uint(v, p);
                } else if (key == "rope_base") {
                    m.rope_base = read_double(v, p);
                } else if (key == "seed") {
                    m.seed = read_uint(v, p);
                } else {
                    m.mlp_ratio = read_double(v, p);
                }
            });
        } else if (section == "layout") {
            LayoutConfig& l = cfg.layout;
            for_each_key(node, path,
                         {"prompt_len", "tiles", "tokens_per_tile", "frames", "tokens_per_frame", "prompt_position"},
                         [&](const std::string& key, const YAML::Node& v, const std::string& p) {
                if (key == "prompt_len") {
                    l.prompt_len = read_uint(v, p);
                } else if (key == "tiles") {
                    l.tiles = read_uint(v, p);
                } else if (key == "tokens_per_tile") {
                    l.tokens_per_tile = read_uint(v, p);
                } else if (key == "frames") {
                    l.frames = read_uint(v, p);
                } else if (key == "tokens_per_frame") {
                    l.tokens_per_frame = read_uint(v, p);
                } else {
                    l.prompt_position = read_enum(v, p, kPromptPositions);
                }
            });
        } else if (section == "prefill") {
            PrefillConfig& f = cfg.prefill;
            for_each_key(node, path,
                         {"mode", "block_size", "align", "policy", "budget", "budget_mode", "layer_entropies",
                          "stats_source", "budget_floor", "protect_recent", "protect_prompt", "proxy_source",
                          "precision_bytes", "random_seed"},
                         [&](const std::string& key, const YAML::Node& v, const std::string& p) {
                if (key == "mode") {
                    f.mode = read_enum(v, p, kModes);
                } else if (key == "block_size") {
                    f.block_size = read_uint(v, p);
                } else if (key == "align") {
                    f.align = read_enum(v, p, kAlignments);
                } else if (key == "policy") {
                    f.policy = read_enum(v, p, kPolicies);
                } else if (key == "budget") {
                    f.budget = read_uint(v, p);
                } else if (key == "budget_mode") {
                    f.budget_mode = read_enum(v, p, kBudgetModes);
                } else if (key == "layer_entropies") {
                    f.layer_entropies = read_double_list(v, p);
                } else if (key == "stats_source") {
                    f.stats_source = read_enum(v, p, kStatsSources);
                } else if (key == "budget_floor") {
                    f.budget_floor = read_uint(v, p);
                } else if (key == "protect_recent") {
                    f.protect_recent = read_bool(v, p);
                } else if (key == "protect_prompt") {
                    f.protect_prompt = read_bool(v, p);
                } else if (key == "proxy_source") {
                    f.proxy_source = read_enum(v, p, kProxySources);
                } else if (key == "precision_bytes") {
                    f.precision_bytes = read_uint(v, p);
                } else {
                    f.random_seed = read_uint(v, p);
                }
            });
        } else if (section == "task") {
            TaskConfig& t = cfg.task;
            for_each_key(node, path, {"needle_segment", "kappa", "needle_strength", "seed"},
                         [&](const std::string& key, const YAML::Node& v, const std::string& p) {
                if (key == "needle_segment") {
                    t.needle_segment = read_uint(v, p);
                } else if (key == "kappa") {
                    t.kappa = read_double(v, p);
                } else if (key == "needle_strength") {
                    t.needle_strength = read_double(v, p);
                } else {
                    t.seed = read_uint(v, p);
                }
            });
        } else {
            OutputConfig& o = cfg.output;
            for_each_key(node, path, {"csv", "json", "wall_clock"},
                         [&](const std::string& key, const YAML::Node& v, const std::string& p) {
                if (key == "csv") {
                    o.csv = scalar_of(v, p);
                } else if (key == "json") {
                    o.json = scalar_of(v, p);
                } else {
                    o.wall_clock = read_bool(v, p);
                }
            });
        }
    });
    return cfg;
}

}  // namespace

std::string_view to_string(PolicyKind kind) {
    return name_of(kPolicies, kind);
}

std::string_view to_string(Alignment align) {
    return name_of(kAlignments, align);
}

std::string_view to_string(BudgetMode mode) {
    return name_of(kBudgetModes, mode);
}

std::string_view to_string(ProxySource source) {
    return name_of(kProxySources, source);
}

TokenLayout LayoutConfig::build() const {
    return build_layout(prompt_len, tiles, tokens_per_tile, frames, tokens_per_frame, prompt_position);
}

std::size_t RunConfig::protected_size() const {
    return (prefill.protect_prompt ? layout.prompt_len : 0) + (prefill.protect_recent ? prefill.block_size : 0);
}

void RunConfig::validate() const {
    try {
        model.validate();
    } catch (const InvalidArgument& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }

    if (layout.prompt_len == 0) {
        throw ConfigError("layout.prompt_len: must be at least 1");
    }
    if (layout.tiles > 0 && layout.frames > 0) {
        throw ConfigError("layout: tiles and frames cannot both be set");
    }
    if (layout.tiles == 0 && layout.frames == 0) {
        throw ConfigError("layout: at least one tile or frame is required");
    }
    if (layout.tiles > 0 && layout.tokens_per_tile == 0) {
        throw ConfigError("layout.tokens_per_tile: must be at least 1");
    }
    if (layout.frames > 0 && layout.tokens_per_frame == 0) {
        throw ConfigError("layout.tokens_per_frame: must be at least 1");
    }
    const std::size_t visual_count = layout.tiles > 0 ? layout.tiles : layout.frames;
    const std::size_t visual_len = layout.tiles > 0 ? layout.tokens_per_tile : layout.tokens_per_frame;
    const std::size_t total = layout.prompt_len + visual_count * visual_len;

    if (prefill.block_size == 0) {
        throw ConfigError("prefill.block_size: must be at least 1");
    }
    if (prefill.budget == 0) {
        throw ConfigError("prefill.budget: must be at least 1");
    }
    if (prefill.precision_bytes == 0) {
        throw ConfigError("prefill.precision_bytes: must be at least 1");
    }
    if (prefill.align == Alignment::structure && prefill.block_size < visual_len) {
        throw ConfigError("prefill.block_size: structure alignment needs block_size >= " + std::to_string(visual_len) +
                          " (one whole tile or frame)");
    }
    if (prefill.budget_mode == BudgetMode::dynamic) {
        if (prefill.layer_entropies.empty() && prefill.stats_source == StatsSource::none) {
            throw ConfigError("prefill.budget_mode: dynamic budgets need prefill.layer_entropies or "
                              "prefill.stats_source");
        }
        if (!prefill.layer_entropies.empty() && prefill.layer_entropies.size() != model.layers) {
            throw ConfigError("prefill.layer_entropies: expected " + std::to_string(model.layers) + " values, got " +
                              std::to_string(prefill.layer_entropies.size()));
        }
        if (std::any_of(prefill.layer_entropies.begin(), prefill.layer_entropies.end(),
                        [](double e) { return e < 0.0; })) {
            throw ConfigError("prefill.layer_entropies: values must be non-negative");
        }
        if (prefill.budget_floor > prefill.budget) {
            throw ConfigError("prefill.budget_floor: must not exceed prefill.budget");
        }
    }
    if (prefill.policy == PolicyKind::query_aware && prefill.proxy_source == ProxySource::prompt_first &&
        layout.prompt_position == PromptPosition::last) {
        throw ConfigError("prefill.proxy_source: prompt_first needs layout.prompt_position first "
                          "(use block_local for prompt-last layouts)");
    }
    if (prefill.mode != PrefillKind::bulk && total > prefill.budget && protected_size() > prefill.budget) {
        throw ConfigError("prefill.budget: " + std::to_string(prefill.budget) +
                          " is smaller than the protected set of " + std::to_string(protected_size()) +
                          " entries (prompt and current block)");
    }

    if (task.needle_segment && *task.needle_segment >= visual_count) {
        throw ConfigError("task.needle_segment: " + std::to_string(*task.needle_segment) + " is out of range (" +
                          std::to_string(visual_count) + " visual segments)");
    }
    if (task.kappa < 0.0) {
        throw ConfigError("task.kappa: must be non-negative");
    }
    if (task.needle_strength <= 0.0) {
        throw ConfigError("task.needle_strength: must be positive");
    }
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["model"] = {{"layers", model.layers},       {"heads", model.heads}, {"d_model", model.d_model},
                  {"rope_base", model.rope_base}, {"seed", model.seed},   {"mlp_ratio", model.mlp_ratio}};
    j["layout"] = {{"prompt_len", layout.prompt_len},
                   {"tiles", layout.tiles},
                   {"tokens_per_tile", layout.tokens_per_tile},
                   {"frames", layout.frames},
                   {"tokens_per_frame", layout.tokens_per_frame},
                   {"prompt_position", name_of(kPromptPositions, layout.prompt_position)}};
    j["prefill"] = {{"mode", name_of(kModes, prefill.mode)},
                    {"block_size", prefill.block_size},
                    {"align", name_of(kAlignments, prefill.align)},
                    {"policy", name_of(kPolicies, prefill.policy)},
                    {"budget", prefill.budget},
                    {"budget_mode", name_of(kBudgetModes, prefill.budget_mode)},
                    {"layer_entropies", prefill.layer_entropies},
                    {"stats_source", name_of(kStatsSources, prefill.stats_source)},
                    {"budget_floor", prefill.budget_floor},
                    {"protect_recent", prefill.protect_recent},
                    {"protect_prompt", prefill.protect_prompt},
                    {"proxy_source", name_of(kProxySources, prefill.proxy_source)},
                    {"precision_bytes", prefill.precision_bytes},
                    {"random_seed", prefill.random_seed}};
    j["task"] = {{"kappa", task.kappa}, {"needle_strength", task.needle_strength}, {"seed", task.seed}};
    if (task.needle_segment) {
        j["task"]["needle_segment"] = *task.needle_segment;
    }
    j["output"] = {{"csv", output.csv}, {"json", output.json}, {"wall_clock", output.wall_clock}};
    return j;
}

RunConfig parse_config(std::string_view yaml_text, const std::vector<std::string>& overrides) {
    YAML::Node root;
    try {
        root = YAML::Load(std::string(yaml_text));
    } catch (const YAML::Exception& e) {
        throw ConfigError("config: YAML parse error at line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    if (!root || root.IsNull()) {
        root = YAML::Node(YAML::NodeType::Map);
    }
    if (!root.IsMap()) {
        throw ConfigError("config: top level must be a mapping");
    }
    for (const auto& o : overrides) {
        apply_override(root, o);
    }
    RunConfig cfg = convert(root);
    cfg.validate();
    return cfg;
}

RunConfig load_config_file(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config file '" + path + "'");
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), overrides);
}

}  // namespace blockprefill
