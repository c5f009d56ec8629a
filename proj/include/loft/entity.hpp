#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace loft {

// The closed set of entity types, in canonical order. All per-type arrays
// and serialized key orders follow this enum order.
enum class EntityType : int {
    kCompany = 0,
    kDate,
    kLocation,
    kMoney,
    kPerson,
    kProduct,
    kQuantity,
};

inline constexpr size_t kNumEntityTypes = 7;

inline constexpr std::array<std::string_view, kNumEntityTypes> kEntityTypeNames = {
    "Company", "Date", "Location", "Money", "Person", "Product", "Quantity",
};

inline constexpr std::array<EntityType, kNumEntityTypes> kAllEntityTypes = {
    EntityType::kCompany, EntityType::kDate,    EntityType::kLocation, EntityType::kMoney,
    EntityType::kPerson,  EntityType::kProduct, EntityType::kQuantity,
};

inline std::string_view entity_type_name(EntityType t) {
    return kEntityTypeNames[static_cast<size_t>(t)];
}

inline std::optional<EntityType> entity_type_from_name(std::string_view name) {
    for (size_t i = 0; i < kNumEntityTypes; ++i)
        if (kEntityTypeNames[i] == name) return static_cast<EntityType>(i);
    return std::nullopt;
}

// Per-type ordered lists of surface strings. Duplicates are allowed and
// meaningful (multiset semantics); an empty list means "no mention".
using EntityMap = std::array<std::vector<std::string>, kNumEntityTypes>;

inline std::vector<std::string>& entities_of(EntityMap& m, EntityType t) {
    return m[static_cast<size_t>(t)];
}
inline const std::vector<std::string>& entities_of(const EntityMap& m, EntityType t) {
    return m[static_cast<size_t>(t)];
}

inline size_t total_mentions(const EntityMap& m) {
    size_t n = 0;
    for (const auto& v : m) n += v.size();
    return n;
}

struct AnnotatedSentence {
    std::string id;
    std::string text;
    EntityMap entities;
};

}  // namespace loft
