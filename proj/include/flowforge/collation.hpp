#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "flowforge/manifest.hpp"

namespace flowforge {

struct CollationConfig {
    double drop_prob = 0.0;  // per droppable reference, in [0,1]
    bool shuffle = false;
    uint64_t seed = 0;
    // Words that introduce a figure reference, matched case-insensitively at a
    // word boundary and followed by an optional space run and a positive integer.
    std::vector<std::string> figure_patterns = {"Figure", "Fig"};
};

struct CollatedSample {
    std::string id;
    std::vector<int> kept_refs;      // original 1-based indices, in new order
    std::string instruction;         // figure tokens rewritten to new indices
    std::map<int, int> permutation;  // old index -> new index, kept refs only
};

// Figure indices mentioned by any pattern. "Fig 3" and "figure 3" both hit 3.
std::set<int> detect_references(const std::string& instruction,
                                const std::vector<std::string>& patterns);

// Rewrites every matched figure index k to mapping[k] in one pass over the
// original text (simultaneous substitution, so 1->2 and 2->1 cannot cascade).
// Indices absent from the mapping are left untouched.
std::string rewrite_figure_indices(const std::string& instruction,
                                   const std::map<int, int>& mapping,
                                   const std::vector<std::string>& patterns);

// Reference dropout, permutation and instruction re-indexing for one edit
// sample. References mentioned in the instruction are never dropped; at least
// one reference is always kept. Deterministic in (sample, config).
CollatedSample collate(const SampleRecord& sample, const CollationConfig& config);

std::string collated_to_json_line(const CollatedSample& sample);

}  // namespace flowforge
