#include "flowforge/manifest.hpp"

#include <fstream>
#include <istream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace flowforge {

using nlohmann::json;

const char* task_name(TaskType t) {
    return t == TaskType::t2i ? "t2i" : "edit";
}

TaskType task_from_name(const std::string& name) {
    if (name == "t2i") return TaskType::t2i;
    if (name == "edit") return TaskType::edit;
    throw DataError("unknown task \"" + name + "\" (expected t2i or edit)");
}

void validate_record(const SampleRecord& record) {
    if (record.id.empty()) throw DataError("record id must be non-empty");
    auto check_dims = [&](const ImageDims& d, const char* what) {
        if (d.height < 1 || d.width < 1)
            throw DataError("record " + record.id + ": " + what + " dimensions must be >= 1");
    };
    check_dims(record.target, "target");
    for (const auto& r : record.refs) check_dims(r, "reference");
    if (record.task == TaskType::t2i && !record.refs.empty())
        throw DataError("record " + record.id + ": t2i record with references");
    if (record.task == TaskType::edit && record.refs.empty())
        throw DataError("record " + record.id + ": edit record without references");
    for (const auto& g : record.glyphs) {
        if (utf8_decode(g.ch).size() != 1)
            throw DataError("record " + record.id + ": glyph char must be a single character");
        if (g.cx < 0.0 || g.cx > 1.0 || g.cy < 0.0 || g.cy > 1.0)
            throw DataError("record " + record.id + ": glyph center outside [0,1]");
        if (!(g.scale > 0.0))
            throw DataError("record " + record.id + ": glyph scale must be > 0");
    }
}

namespace {

ImageDims dims_from_json(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
        throw DataError(std::string(what) + " must be [height, width]");
    return ImageDims{j[0].get<int>(), j[1].get<int>()};
}

SampleRecord record_from_json(const json& j) {
    if (!j.is_object()) throw DataError("record must be a JSON object");
    static const std::set<std::string> known = {"id", "task", "refs", "target", "instruction", "glyphs"};
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key)) throw DataError("unknown key \"" + key + "\"");
    }
    for (const char* req : {"id", "task", "refs", "target", "instruction"})
        if (!j.contains(req)) throw DataError(std::string("missing key \"") + req + "\"");

    SampleRecord r;
    if (!j["id"].is_string()) throw DataError("id must be a string");
    r.id = j["id"].get<std::string>();
    if (!j["task"].is_string()) throw DataError("task must be a string");
    r.task = task_from_name(j["task"].get<std::string>());
    if (!j["refs"].is_array()) throw DataError("refs must be an array");
    for (const auto& ref : j["refs"]) r.refs.push_back(dims_from_json(ref, "refs entry"));
    r.target = dims_from_json(j["target"], "target");
    if (!j["instruction"].is_string()) throw DataError("instruction must be a string");
    r.instruction = j["instruction"].get<std::string>();
    if (j.contains("glyphs")) {
        if (!j["glyphs"].is_array()) throw DataError("glyphs must be an array");
        for (const auto& gj : j["glyphs"]) {
            if (!gj.is_object()) throw DataError("glyph must be an object");
            for (const char* req : {"char", "cx", "cy", "scale"})
                if (!gj.contains(req)) throw DataError(std::string("glyph missing key \"") + req + "\"");
            OcrGlyph g;
            g.ch = gj["char"].get<std::string>();
            g.cx = gj["cx"].get<double>();
            g.cy = gj["cy"].get<double>();
            g.scale = gj["scale"].get<double>();
            r.glyphs.push_back(std::move(g));
        }
    }
    validate_record(r);
    return r;
}

}  // namespace

std::vector<SampleRecord> parse_manifest(std::istream& in, const std::string& source_name) {
    std::vector<SampleRecord> records;
    std::set<std::string> seen_ids;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(source_name + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        SampleRecord r;
        try {
            r = record_from_json(j);
        } catch (const DataError& e) {
            throw DataError(source_name + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const json::exception& e) {
            throw DataError(source_name + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!seen_ids.insert(r.id).second)
            throw DataError(source_name + ":" + std::to_string(line_no) + ": duplicate id \"" + r.id + "\"");
        records.push_back(std::move(r));
    }
    return records;
}

std::vector<SampleRecord> load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest: " + path);
    return parse_manifest(in, path);
}

std::vector<std::vector<TokenCoordinate>> assign_rope_coordinates(
    const std::vector<GridDims>& refs, GridDims target) {
    auto sweep = [](GridDims g, int tau) {
        if (g.rows < 1 || g.cols < 1) throw std::invalid_argument("grid dims must be >= 1");
        std::vector<TokenCoordinate> coords;
        coords.reserve(static_cast<size_t>(g.rows) * static_cast<size_t>(g.cols));
        for (int r = 0; r < g.rows; ++r)
            for (int c = 0; c < g.cols; ++c) coords.push_back(TokenCoordinate{tau, r, c});
        return coords;
    };
    std::vector<std::vector<TokenCoordinate>> out;
    out.reserve(refs.size() + 1);
    for (size_t k = 0; k < refs.size(); ++k) out.push_back(sweep(refs[k], static_cast<int>(k) + 1));
    out.push_back(sweep(target, 0));
    return out;
}

}  // namespace flowforge
