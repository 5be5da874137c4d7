#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "flowforge/common.hpp"

namespace flowforge {

struct ImageDims {
    int height = 0;  // pixels, >= 1
    int width = 0;   // pixels, >= 1
    friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

// One recognized character with normalized center and relative height.
struct OcrGlyph {
    std::string ch;      // exactly one Unicode scalar, UTF-8 encoded
    double cx = 0.0;     // center x as fraction of image width, in [0,1]
    double cy = 0.0;     // center y as fraction of image height, in [0,1]
    double scale = 0.0;  // glyph height as fraction of image height, > 0
};

enum class TaskType { t2i, edit };

const char* task_name(TaskType t);
TaskType task_from_name(const std::string& name);  // throws DataError

struct SampleRecord {
    std::string id;
    TaskType task = TaskType::t2i;
    std::vector<ImageDims> refs;  // empty for t2i, non-empty for edit
    ImageDims target;
    std::string instruction;
    std::vector<OcrGlyph> glyphs;  // optional annotation, may be empty
};

// Throws DataError describing the first violated invariant.
void validate_record(const SampleRecord& record);

// Manifest files are JSON Lines, one record per line, UTF-8, LF endings.
// Errors carry 1-based line numbers. Ids must be unique within a manifest.
std::vector<SampleRecord> parse_manifest(std::istream& in, const std::string& source_name);
std::vector<SampleRecord> load_manifest(const std::string& path);

// Token-grid coordinate under the unified 3D positional scheme: temporal
// index tau, then row/col within the image's own grid.
struct TokenCoordinate {
    int tau = 0;
    int row = 0;
    int col = 0;
    friend bool operator==(const TokenCoordinate&, const TokenCoordinate&) = default;
};

struct GridDims {
    int rows = 0;
    int cols = 0;
};

// Returns one coordinate grid per image, references first (in order) and the
// target last. Target tokens get tau = 0, the k-th reference (1-based) gets
// tau = k. Within each image (row, col) sweep its own grid row-major from
// (0,0); grids are not rescaled when reference and target sizes differ.
std::vector<std::vector<TokenCoordinate>> assign_rope_coordinates(
    const std::vector<GridDims>& refs, GridDims target);

}  // namespace flowforge
