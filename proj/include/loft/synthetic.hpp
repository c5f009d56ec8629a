#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include "loft/common.hpp"
#include "loft/corpus.hpp"
#include "loft/entity.hpp"

namespace loft {

// Seeded template corpus over the seven entity types, for smoke training and
// demos. Sentences are deliberately short with small mention pools so a tiny
// model can learn the extraction task end to end.
namespace synthetic_detail {

inline const std::vector<std::string>& pool(EntityType t) {
    static const std::vector<std::string> kPools[kNumEntityTypes] = {
        // Company
        {"Acme Corp", "Globex", "Initech", "Vandelay", "Hooli", "Stark Ltd", "Wayne Co",
         "Pied Piper"},
        // Date
        {"May 5 , 2011", "Q3 2020", "March 2015", "January 1 , 2008", "2019", "July 2022",
         "Q1 2013", "October 31 , 2017"},
        // Location
        {"New York", "London", "Texas", "Singapore", "Ohio", "Tokyo", "Dublin", "Zurich"},
        // Money
        {"$2 million", "$14", "$3.5 billion", "7 million euros", "$90,000", "$650", "$1.1 billion",
         "$48 million"},
        // Person
        {"John Smith", "Mary Chen", "Bob Lee", "Alice Wong", "Tom Ford", "Eva Park", "Dan Cole",
         "Ana Ruiz"},
        // Product
        {"iPhone", "Model S", "Azure", "Prime", "Walkman", "ThinkPad", "Pixel", "Echo"},
        // Quantity
        {"5,000 shares", "12 branches", "three units", "40 %", "1.2 million users", "80 stores",
         "two plants", "9,400 cars"},
    };
    return kPools[static_cast<size_t>(t)];
}

// Templates use {Type} placeholders; duplicates of a type draw distinct
// mentions within one sentence.
inline const std::vector<std::string>& templates() {
    static const std::vector<std::string> kTemplates = {
        "{Company} acquired {Company} for {Money} .",
        "{Person} joined {Company} in {Date} .",
        "{Company} opened an office in {Location} .",
        "{Company} sold {Quantity} in {Date} .",
        "{Company} launched {Product} in {Location} .",
        "{Person} bought {Quantity} of {Company} stock .",
        "{Company} reported revenue of {Money} for {Date} .",
        "{Product} sales reached {Money} .",
        "{Person} moved to {Location} in {Date} .",
        "{Company} hired {Person} .",
        "{Quantity} were issued by {Company} .",
        "{Company} shares rose {Quantity} after the {Date} report .",
        // Entity-free sentences keep the no-mention case represented.
        "The board approved the plan .",
        "Shares fell after the announcement .",
        "The merger was completed .",
        "Analysts expect growth to continue .",
    };
    return kTemplates;
}

}  // namespace synthetic_detail

inline std::vector<AnnotatedSentence> generate_synthetic_corpus(size_t count, uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x73796e7468ull));  // "synth"
    const auto& tmpls = synthetic_detail::templates();
    std::vector<AnnotatedSentence> out;
    out.reserve(count);
    for (size_t n = 0; n < count; ++n) {
        const std::string& tmpl = tmpls[static_cast<size_t>(rng.next_below(tmpls.size()))];
        AnnotatedSentence sent;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "syn-%04zu", n + 1);
        sent.id = idbuf;

        std::array<std::vector<size_t>, kNumEntityTypes> used{};
        size_t pos = 0;
        while (pos < tmpl.size()) {
            const size_t open = tmpl.find('{', pos);
            if (open == std::string::npos) {
                sent.text.append(tmpl, pos, std::string::npos);
                break;
            }
            sent.text.append(tmpl, pos, open - pos);
            const size_t close = tmpl.find('}', open);
            const std::string_view type_name(tmpl.data() + open + 1, close - open - 1);
            const EntityType type = *entity_type_from_name(type_name);
            const auto& p = synthetic_detail::pool(type);
            auto& taken = used[static_cast<size_t>(type)];
            size_t pick;
            do {
                pick = static_cast<size_t>(rng.next_below(p.size()));
            } while (std::find(taken.begin(), taken.end(), pick) != taken.end());
            taken.push_back(pick);
            sent.text += p[pick];
            entities_of(sent.entities, type).push_back(p[pick]);
            pos = close + 1;
        }
        out.push_back(std::move(sent));
    }
    return out;
}

}  // namespace loft
