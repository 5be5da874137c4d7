#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowforge/manifest.hpp"

namespace flowforge {

struct BucketSpec {
    int height = 0;  // pixels, divisible by the patch size
    int width = 0;
    friend bool operator==(const BucketSpec&, const BucketSpec&) = default;
};

struct BucketTable {
    std::vector<BucketSpec> buckets;  // the candidate set S, non-empty
    int patch_size = 16;
    long long capacity = 0;  // token budget per batch (one batch per device)
};

// Throws DataError on an invalid table (empty set, bad patch size,
// non-divisible bucket, capacity below the largest single-bucket count).
void validate_table(const BucketTable& table);

// Tokens for one image: ceil(H*W / p^2).
long long image_tokens(ImageDims dims, int patch_size);

// Total visual sequence length: sum of image_tokens over all images.
long long visual_sequence_length(const std::vector<ImageDims>& dims, int patch_size);

// Two-stage bucket choice for one sample's image list (references first,
// target last; all images of a sample are resized to a single bucket).
// Stage 1 keeps the buckets whose log aspect ratio is closest to the first
// image's; stage 2 minimizes the aggregate area difference sum |H*W - h*w|.
// Ties break toward smaller area, then smaller height.
BucketSpec select_bucket(const std::vector<ImageDims>& dims, const BucketTable& table);

struct PlannedBatch {
    BucketSpec bucket;
    int n_refs = 0;
    std::vector<std::string> sample_ids;
    long long token_count = 0;
};

struct BatchPlan {
    std::vector<PlannedBatch> batches;
    std::vector<std::string> dropped_ids;  // only populated under drop_last
};

// Groups records by (selected bucket, reference count), shuffles each group
// with a seed derived from (seed, group key), and emits homogeneous batches
// of at most batch_size samples whose token count never exceeds the table
// capacity. A partial trailing batch per group is kept unless drop_last.
// A single sample that cannot fit the capacity on its own is an error.
BatchPlan plan_batches(const std::vector<SampleRecord>& records, const BucketTable& table,
                       int batch_size, bool drop_last, uint64_t seed);

// Canonical JSON rendering used by the plan-batches command and goldens.
std::string batch_plan_to_json(const BatchPlan& plan, const BucketTable& table, int batch_size,
                               bool drop_last, uint64_t seed);

}  // namespace flowforge
