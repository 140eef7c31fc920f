#ifndef BLOCKCACHE_BLOCKID_HPP
#define BLOCKCACHE_BLOCKID_HPP

#include <string>
#include <tuple>

#include "blockcache/tensor.hpp"

namespace bc {

enum class Section { input, middle, output };
enum class BlockKind { resblock, spatial_transformer, resample };

inline const char* section_name(Section s) {
    switch (s) {
        case Section::input: return "input";
        case Section::middle: return "middle";
        default: return "output";
    }
}

inline const char* kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::resblock: return "resblock";
        case BlockKind::spatial_transformer: return "spatial_transformer";
        default: return "resample";
    }
}

// Stable identity of one U-Net block; ordering follows execution order.
struct BlockId {
    Section section = Section::input;
    int level = 0;
    int index = 0;  // within (section, level)
    BlockKind kind = BlockKind::resblock;

    std::string str() const {
        return std::string(section_name(section)) + ".l" + std::to_string(level) + ".b" +
               std::to_string(index) + "." + kind_name(kind);
    }

    bool operator==(const BlockId& o) const {
        return section == o.section && level == o.level && index == o.index && kind == o.kind;
    }
};

inline BlockId parse_block_id(const std::string& s) {
    // <section>.l<level>.b<index>.<kind>
    size_t p1 = s.find('.');
    size_t p2 = s.find('.', p1 + 1);
    size_t p3 = s.find('.', p2 + 1);
    check(p1 != std::string::npos && p2 != std::string::npos && p3 != std::string::npos,
          "bad block id: " + s);
    BlockId id;
    std::string sec = s.substr(0, p1);
    if (sec == "input")
        id.section = Section::input;
    else if (sec == "middle")
        id.section = Section::middle;
    else if (sec == "output")
        id.section = Section::output;
    else
        throw std::runtime_error("bad block id section: " + s);
    check(s[p1 + 1] == 'l' && s[p2 + 1] == 'b', "bad block id: " + s);
    id.level = std::stoi(s.substr(p1 + 2, p2 - p1 - 2));
    id.index = std::stoi(s.substr(p2 + 2, p3 - p2 - 2));
    std::string kind = s.substr(p3 + 1);
    if (kind == "resblock")
        id.kind = BlockKind::resblock;
    else if (kind == "spatial_transformer")
        id.kind = BlockKind::spatial_transformer;
    else if (kind == "resample")
        id.kind = BlockKind::resample;
    else
        throw std::runtime_error("bad block id kind: " + s);
    return id;
}

}  // namespace bc

#endif
