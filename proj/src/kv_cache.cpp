// Copyright (C) 2026 The blockprefill Authors
// SPDX-License-Identifier: Apache-2.0

#include "blockprefill/kv_cache.hpp"

#include <algorithm>
#include <bit>
#include <numeric>

#include "blockprefill/errors.hpp"

namespace blockprefill {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(std::uint64_t& h, std::uint64_t value) {
    for (int i = 0; i < 8; ++i) {
        h ^= (value >> (8 * i)) & 0xffU;
        h *= kFnvPrime;
    }
}

SegmentKind kind_from_string(const std::string& s) {
    if (s == "text") {
        return SegmentKind::text;
    }
    if (s == "tile") {
        return SegmentKind::tile;
    }
    if (s == "frame") {
        return SegmentKind::frame;
    }
    throw InvalidArgument("cache snapshot: unknown segment kind '" + s + "'");
}

}  // namespace

std::vector<std::size_t> HeadStore::positions() const {
    std::vector<std::size_t> out;
    out.reserve(info.size());
    for (const auto& t : info) {
        out.push_back(t.position);
    }
    return out;
}

KvCache::KvCache(std::size_t layers, std::size_t heads, std::size_t dim_head)
    : m_layers(layers), m_heads(heads), m_dim(dim_head), m_stores(layers * heads), m_next_position(layers, 0) {
    for (auto& s : m_stores) {
        s.keys = Matrix(0, dim_head);
        s.values = Matrix(0, dim_head);
    }
}

const HeadStore& KvCache::head(std::size_t layer, std::size_t head) const {
    if (layer >= m_layers || head >= m_heads) {
        throw InvalidArgument("KvCache: (layer " + std::to_string(layer) + ", head " + std::to_string(head) +
                              ") out of range");
    }
    return m_stores[layer * m_heads + head];
}

HeadStore& KvCache::mutable_head(std::size_t layer, std::size_t head) {
    return const_cast<HeadStore&>(std::as_const(*this).head(layer, head));
}

void KvCache::append_block(std::size_t layer,
                           std::span<const Matrix> keys,
                           std::span<const Matrix> values,
                           std::span<const TokenInfo> tokens) {
    if (layer >= m_layers) {
        throw InvalidArgument("KvCache::append_block: layer out of range");
    }
    if (keys.size() != m_heads || values.size() != m_heads) {
        throw InvalidArgument("KvCache::append_block: expected one key/value matrix per head");
    }
    for (std::size_t h = 0; h < m_heads; ++h) {
        if (keys[h].rows() != tokens.size() || values[h].rows() != tokens.size() || keys[h].cols() != m_dim ||
            values[h].cols() != m_dim) {
            throw InvalidArgument("KvCache::append_block: key/value shape does not match block");
        }
    }
    std::size_t expected_floor = m_next_position[layer];
    for (const auto& t : tokens) {
        if (t.position < expected_floor) {
            throw InvalidArgument("KvCache::append_block: position " + std::to_string(t.position) +
                                  " not above last cached position in layer " + std::to_string(layer));
        }
        expected_floor = t.position + 1;
    }
    for (std::size_t h = 0; h < m_heads; ++h) {
        auto& store = mutable_head(layer, h);
        store.keys.append_rows(keys[h]);
        store.values.append_rows(values[h]);
        store.info.insert(store.info.end(), tokens.begin(), tokens.end());
    }
    if (!tokens.empty()) {
        m_next_position[layer] = tokens.back().position + 1;
    }
}

void KvCache::retain(std::size_t layer, std::size_t head, std::span<const std::size_t> keep) {
    auto& store = mutable_head(layer, head);
    std::vector<std::size_t> sorted(keep.begin(), keep.end());
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw InvalidArgument("KvCache::retain: duplicate index in keep set");
    }
    if (!sorted.empty() && sorted.back() >= store.size()) {
        throw InvalidArgument("KvCache::retain: index " + std::to_string(sorted.back()) + " out of range (size " +
                              std::to_string(store.size()) + ")");
    }
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const bool kept = cursor < sorted.size() && sorted[cursor] == i;
        if (kept) {
            ++cursor;
        } else if (store.info[i].is_protected) {
            throw ContractViolation("KvCache::retain: protected entry at position " +
                                    std::to_string(store.info[i].position) + " excluded from keep set");
        }
    }
    if (sorted.size() == store.size()) {
        return;
    }
    HeadStore next;
    next.keys = store.keys.gather_rows(sorted);
    next.values = store.values.gather_rows(sorted);
    next.info.reserve(sorted.size());
    for (auto idx : sorted) {
        next.info.push_back(store.info[idx]);
    }
    if (next.keys.rows() == 0) {
        next.keys = Matrix(0, m_dim);
        next.values = Matrix(0, m_dim);
    }
    store = std::move(next);
}

std::size_t KvCache::max_count() const {
    std::size_t best = 0;
    for (const auto& s : m_stores) {
        best = std::max(best, s.size());
    }
    return best;
}

std::size_t KvCache::total_entries() const {
    return std::accumulate(m_stores.begin(), m_stores.end(), std::size_t{0},
                           [](std::size_t acc, const HeadStore& s) { return acc + s.size(); });
}

std::size_t KvCache::next_position(std::size_t layer) const {
    if (layer >= m_layers) {
        throw InvalidArgument("KvCache::next_position: layer out of range");
    }
    return m_next_position[layer];
}

std::vector<CacheEntry> KvCache::entries(std::size_t layer, std::size_t head) const {
    const auto& store = this->head(layer, head);
    std::vector<CacheEntry> out;
    out.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto k = store.keys.row(i);
        const auto v = store.values.row(i);
        out.push_back(CacheEntry{{k.begin(), k.end()}, {v.begin(), v.end()}, store.info[i]});
    }
    return out;
}

std::uint64_t KvCache::footprint(std::uint64_t precision_bytes) const {
    return 2 * static_cast<std::uint64_t>(total_entries()) * m_dim * precision_bytes;
}

std::uint64_t KvCache::fingerprint() const {
    std::uint64_t h = kFnvOffset;
    fnv_mix(h, m_layers);
    fnv_mix(h, m_heads);
    fnv_mix(h, m_dim);
    for (const auto& s : m_stores) {
        fnv_mix(h, s.size());
        for (const auto& t : s.info) {
            fnv_mix(h, t.position);
            fnv_mix(h, static_cast<std::uint64_t>(t.tag.kind));
            fnv_mix(h, t.tag.structure_id.value_or(~std::uint64_t{0}));
            fnv_mix(h, t.is_protected ? 1 : 0);
        }
        for (double x : s.keys.data()) {
            fnv_mix(h, std::bit_cast<std::uint64_t>(x));
        }
        for (double x : s.values.data()) {
            fnv_mix(h, std::bit_cast<std::uint64_t>(x));
        }
    }
    return h;
}

nlohmann::json KvCache::to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < m_layers; ++l) {
        nlohmann::json heads = nlohmann::json::array();
        for (std::size_t h = 0; h < m_heads; ++h) {
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& e : entries(l, h)) {
                nlohmann::json item;
                item["position"] = e.info.position;
                item["kind"] = std::string(to_string(e.info.tag.kind));
                item["structure_id"] = e.info.tag.structure_id ? nlohmann::json(*e.info.tag.structure_id) : nullptr;
                item["protected"] = e.info.is_protected;
                item["key"] = e.key;
                item["value"] = e.value;
                arr.push_back(std::move(item));
            }
            heads.push_back(std::move(arr));
        }
        layers.push_back(std::move(heads));
    }
    return {{"layers", m_layers}, {"heads", m_heads}, {"dim", m_dim}, {"next_position", m_next_position},
            {"entries", std::move(layers)}};
}

KvCache KvCache::from_json(const nlohmann::json& j) {
    KvCache cache(j.at("layers").get<std::size_t>(), j.at("heads").get<std::size_t>(), j.at("dim").get<std::size_t>());
    const auto& layers = j.at("entries");
    if (layers.size() != cache.m_layers) {
        throw InvalidArgument("cache snapshot: layer count mismatch");
    }
    for (std::size_t l = 0; l < cache.m_layers; ++l) {
        if (layers[l].size() != cache.m_heads) {
            throw InvalidArgument("cache snapshot: head count mismatch");
        }
        for (std::size_t h = 0; h < cache.m_heads; ++h) {
            auto& store = cache.mutable_head(l, h);
            for (const auto& item : layers[l][h]) {
                const auto key = item.at("key").get<std::vector<double>>();
                const auto value = item.at("value").get<std::vector<double>>();
                if (key.size() != cache.m_dim || value.size() != cache.m_dim) {
                    throw InvalidArgument("cache snapshot: vector length != dim");
                }
                TokenInfo info;
                info.position = item.at("position").get<std::size_t>();
                info.tag.kind = kind_from_string(item.at("kind").get<std::string>());
                if (!item.at("structure_id").is_null()) {
                    info.tag.structure_id = item.at("structure_id").get<std::size_t>();
                }
                info.is_protected = item.at("protected").get<bool>();
                if (!store.info.empty() && info.position <= store.info.back().position) {
                    throw InvalidArgument("cache snapshot: positions must strictly increase");
                }
                store.keys.append_row(key);
                store.values.append_row(value);
                store.info.push_back(info);
            }
        }
    }
    if (j.contains("next_position")) {
        cache.m_next_position = j.at("next_position").get<std::vector<std::size_t>>();
    } else {
        for (std::size_t l = 0; l < cache.m_layers; ++l) {
            for (std::size_t h = 0; h < cache.m_heads; ++h) {
                const auto& info = cache.head(l, h).info;
                if (!info.empty()) {
                    cache.m_next_position[l] = std::max(cache.m_next_position[l], info.back().position + 1);
                }
            }
        }
    }
    return cache;
}

bool KvCache::operator==(const KvCache& other) const {
    if (m_layers != other.m_layers || m_heads != other.m_heads || m_dim != other.m_dim ||
        m_next_position != other.m_next_position) {
        return false;
    }
    for (std::size_t i = 0; i < m_stores.size(); ++i) {
        const auto& a = m_stores[i];
        const auto& b = other.m_stores[i];
        if (a.info != b.info || a.keys.data().size() != b.keys.data().size() ||
            !std::equal(a.keys.data().begin(), a.keys.data().end(), b.keys.data().begin()) ||
            !std::equal(a.values.data().begin(), a.values.data().end(), b.values.data().begin())) {
            return false;
        }
    }
    return true;
}

void MemoryTrace::begin_block() {
    m_block_peaks.push_back(0);
    m_block_event_counts.push_back(0);
    m_block_open = true;
}

void MemoryTrace::record(std::string label, const KvCache& cache) {
    if (!m_block_open) {
        begin_block();
    }
    const std::size_t entries = cache.max_count();
    const std::uint64_t bytes =
        kv_memory_bytes(cache.layers(), cache.heads(), cache.dim_head(), m_precision_bytes, entries);
    m_events.push_back(TraceEvent{std::move(label), m_block_peaks.size() - 1, entries, bytes});
    m_block_peaks.back() = std::max(m_block_peaks.back(), bytes);
    ++m_block_event_counts.back();
}

std::uint64_t MemoryTrace::global_peak() const {
    if (m_events.empty()) {
        throw InvalidState("MemoryTrace: peak queried on an empty trace");
    }
    return std::max_element(m_events.begin(), m_events.end(), [](const TraceEvent& a, const TraceEvent& b) {
               return a.modeled_bytes < b.modeled_bytes;
           })->modeled_bytes;
}

std::size_t MemoryTrace::global_peak_entries() const {
    if (m_events.empty()) {
        throw InvalidState("MemoryTrace: peak queried on an empty trace");
    }
    std::size_t best = 0;
    for (const auto& e : m_events) {
        best = std::max(best, e.entries_per_layer_head);
    }
    return best;
}

double MemoryTrace::avg_block_peak() const {
    if (m_events.empty()) {
        throw InvalidState("MemoryTrace: peak queried on an empty trace");
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < m_block_peaks.size(); ++i) {
        if (m_block_event_counts[i] > 0) {
            sum += static_cast<double>(m_block_peaks[i]);
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

}  // namespace blockprefill
