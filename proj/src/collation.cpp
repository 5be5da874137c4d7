#include "flowforge/collation.hpp"

#include <algorithm>
#include <cctype>

#include <json.hpp>

namespace flowforge {

namespace {

bool is_ascii_alpha(char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
}
bool is_ascii_alnum(char c) {
    return is_ascii_alpha(c) || (c >= '0' && c <= '9');
}
bool is_ascii_digit(char c) {
    return c >= '0' && c <= '9';
}

bool iequals(std::string_view a, std::string_view b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (std::tolower(static_cast<unsigned char>(a[i])) != std::tolower(static_cast<unsigned char>(b[i])))
            return false;
    return true;
}

struct FigureToken {
    size_t digits_begin = 0;  // byte range of the index digits
    size_t digits_end = 0;
    int index = 0;
};

// Scans for <pattern-word> [spaces] <digits> with the word at a boundary:
// no alphanumeric immediately before, no letter immediately after the word.
std::vector<FigureToken> find_figure_tokens(const std::string& text,
                                            const std::vector<std::string>& patterns) {
    std::vector<std::string> words(patterns);
    std::sort(words.begin(), words.end(),
              [](const std::string& a, const std::string& b) { return a.size() > b.size(); });

    std::vector<FigureToken> tokens;
    for (size_t i = 0; i < text.size();) {
        if (i > 0 && is_ascii_alnum(text[i - 1])) {
            ++i;
            continue;
        }
        size_t matched_len = 0;
        for (const auto& w : words) {
            if (w.empty() || i + w.size() > text.size()) continue;
            if (!iequals(std::string_view(text).substr(i, w.size()), w)) continue;
            if (i + w.size() < text.size() && is_ascii_alpha(text[i + w.size()])) continue;
            matched_len = w.size();
            break;
        }
        if (matched_len == 0) {
            ++i;
            continue;
        }
        size_t j = i + matched_len;
        while (j < text.size() && (text[j] == ' ' || text[j] == '\t')) ++j;
        size_t digits_begin = j;
        while (j < text.size() && is_ascii_digit(text[j])) ++j;
        if (j > digits_begin) {
            long value = 0;
            bool overflow = false;
            for (size_t k = digits_begin; k < j; ++k) {
                value = value * 10 + (text[k] - '0');
                if (value > 1000000) {
                    overflow = true;
                    break;
                }
            }
            if (!overflow && value >= 1)
                tokens.push_back(FigureToken{digits_begin, j, static_cast<int>(value)});
        }
        i = std::max(j, i + matched_len);
    }
    return tokens;
}

}  // namespace

std::set<int> detect_references(const std::string& instruction,
                                const std::vector<std::string>& patterns) {
    std::set<int> out;
    for (const auto& tok : find_figure_tokens(instruction, patterns)) out.insert(tok.index);
    return out;
}

std::string rewrite_figure_indices(const std::string& instruction,
                                   const std::map<int, int>& mapping,
                                   const std::vector<std::string>& patterns) {
    const auto tokens = find_figure_tokens(instruction, patterns);
    std::string out;
    out.reserve(instruction.size());
    size_t cursor = 0;
    for (const auto& tok : tokens) {
        auto it = mapping.find(tok.index);
        if (it == mapping.end()) continue;
        out.append(instruction, cursor, tok.digits_begin - cursor);
        out.append(std::to_string(it->second));
        cursor = tok.digits_end;
    }
    out.append(instruction, cursor, instruction.size() - cursor);
    return out;
}

CollatedSample collate(const SampleRecord& sample, const CollationConfig& config) {
    if (sample.task != TaskType::edit)
        throw DataError("collate requires an edit-task sample (got " + std::string(task_name(sample.task)) + ")");
    if (config.drop_prob < 0.0 || config.drop_prob > 1.0)
        throw DataError("drop_prob must lie in [0,1]");
    const int n = static_cast<int>(sample.refs.size());

    const std::set<int> mentioned = detect_references(sample.instruction, config.figure_patterns);
    for (int m : mentioned)
        if (m > n)
            throw DataError("record " + sample.id + ": dangling figure reference Fig " + std::to_string(m) +
                            " (sample has " + std::to_string(n) + " references)");

    // Per-sample stream so the outcome does not depend on manifest order.
    Rng rng(mix_seed(config.seed, fnv1a64(sample.id)));

    std::vector<int> kept;
    for (int k = 1; k <= n; ++k) {
        const bool droppable = mentioned.count(k) == 0;
        const double u = rng.next_double();  // drawn for every ref to keep the stream aligned
        if (droppable && u < config.drop_prob) continue;
        kept.push_back(k);
    }
    if (kept.empty()) kept.push_back(1);  // edit samples keep at least one reference

    if (config.shuffle) rng.shuffle(kept);

    CollatedSample out;
    out.id = sample.id;
    out.kept_refs = kept;
    for (size_t pos = 0; pos < kept.size(); ++pos)
        out.permutation[kept[pos]] = static_cast<int>(pos) + 1;
    out.instruction = rewrite_figure_indices(sample.instruction, out.permutation, config.figure_patterns);
    return out;
}

std::string collated_to_json_line(const CollatedSample& sample) {
    nlohmann::json j;
    j["id"] = sample.id;
    j["kept_refs"] = sample.kept_refs;
    j["instruction"] = sample.instruction;
    nlohmann::json perm = nlohmann::json::object();
    for (const auto& [from, to] : sample.permutation) perm[std::to_string(from)] = to;
    j["permutation"] = perm;
    return j.dump();
}

}  // namespace flowforge
