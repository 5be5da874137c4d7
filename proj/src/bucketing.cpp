#include "flowforge/bucketing.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include <json.hpp>

namespace flowforge {

void validate_table(const BucketTable& table) {
    if (table.buckets.empty()) throw DataError("bucket table must be non-empty");
    if (table.patch_size < 1) throw DataError("patch size must be >= 1");
    long long max_tokens = 0;
    for (const auto& b : table.buckets) {
        if (b.height < 1 || b.width < 1)
            throw DataError("bucket dimensions must be >= 1");
        if (b.height % table.patch_size != 0 || b.width % table.patch_size != 0)
            throw DataError("bucket " + std::to_string(b.height) + "x" + std::to_string(b.width) +
                            " not divisible by patch size " + std::to_string(table.patch_size));
        max_tokens = std::max(max_tokens, image_tokens(ImageDims{b.height, b.width}, table.patch_size));
    }
    if (table.capacity < max_tokens)
        throw DataError("capacity " + std::to_string(table.capacity) +
                        " below largest single-bucket token count " + std::to_string(max_tokens));
}

long long image_tokens(ImageDims dims, int patch_size) {
    const long long area = static_cast<long long>(dims.height) * dims.width;
    const long long p2 = static_cast<long long>(patch_size) * patch_size;
    return (area + p2 - 1) / p2;
}

long long visual_sequence_length(const std::vector<ImageDims>& dims, int patch_size) {
    if (patch_size < 1) throw std::invalid_argument("patch size must be >= 1");
    long long total = 0;
    for (const auto& d : dims) total += image_tokens(d, patch_size);
    return total;
}

BucketSpec select_bucket(const std::vector<ImageDims>& dims, const BucketTable& table) {
    if (dims.empty()) throw DataError("select_bucket: empty image list");
    validate_table(table);

    const double anchor = std::log(static_cast<double>(dims[0].height) / dims[0].width);
    // (aspect gap, aggregate area diff, area, height) lexicographic minimum.
    bool have = false;
    BucketSpec best{};
    std::tuple<double, long long, long long, int> best_key{};
    for (const auto& b : table.buckets) {
        const double gap = std::abs(std::log(static_cast<double>(b.height) / b.width) - anchor);
        const long long area = static_cast<long long>(b.height) * b.width;
        long long crop = 0;
        for (const auto& d : dims)
            crop += std::llabs(static_cast<long long>(d.height) * d.width - area);
        std::tuple<double, long long, long long, int> key{gap, crop, area, b.height};
        if (!have || key < best_key) {
            have = true;
            best_key = key;
            best = b;
        }
    }
    return best;
}

BatchPlan plan_batches(const std::vector<SampleRecord>& records, const BucketTable& table,
                       int batch_size, bool drop_last, uint64_t seed) {
    validate_table(table);
    if (batch_size < 1) throw DataError("batch size must be >= 1");

    struct GroupKey {
        int h, w, n_refs;
        bool operator<(const GroupKey& o) const {
            return std::tie(h, w, n_refs) < std::tie(o.h, o.w, o.n_refs);
        }
    };
    std::map<GroupKey, std::vector<std::string>> groups;
    for (const auto& rec : records) {
        validate_record(rec);
        std::vector<ImageDims> dims = rec.refs;
        dims.push_back(rec.target);
        const BucketSpec bucket = select_bucket(dims, table);
        groups[GroupKey{bucket.height, bucket.width, static_cast<int>(rec.refs.size())}].push_back(rec.id);
    }

    BatchPlan plan;
    for (auto& [key, ids] : groups) {
        // Every image of every sample in the group lands on the same bucket,
        // so the per-sample token cost is uniform within the group.
        const long long per_sample =
            static_cast<long long>(key.n_refs + 1) * image_tokens(ImageDims{key.h, key.w}, table.patch_size);
        if (per_sample > table.capacity)
            throw DataError("sample \"" + ids.front() + "\" needs " + std::to_string(per_sample) +
                            " tokens, exceeding capacity " + std::to_string(table.capacity));
        const long long by_capacity = table.capacity / per_sample;
        const size_t chunk = static_cast<size_t>(
            std::min<long long>(batch_size, by_capacity));

        Rng rng(mix_seed(seed, mix_seed(static_cast<uint64_t>(key.h) << 32 | static_cast<uint64_t>(key.w),
                                        static_cast<uint64_t>(key.n_refs))));
        rng.shuffle(ids);

        for (size_t start = 0; start < ids.size(); start += chunk) {
            const size_t count = std::min(chunk, ids.size() - start);
            if (drop_last && count < chunk) {
                plan.dropped_ids.insert(plan.dropped_ids.end(), ids.begin() + static_cast<ptrdiff_t>(start),
                                        ids.end());
                break;
            }
            PlannedBatch batch;
            batch.bucket = BucketSpec{key.h, key.w};
            batch.n_refs = key.n_refs;
            batch.sample_ids.assign(ids.begin() + static_cast<ptrdiff_t>(start),
                                    ids.begin() + static_cast<ptrdiff_t>(start + count));
            batch.token_count = per_sample * static_cast<long long>(count);
            plan.batches.push_back(std::move(batch));
        }
    }
    return plan;
}

std::string batch_plan_to_json(const BatchPlan& plan, const BucketTable& table, int batch_size,
                               bool drop_last, uint64_t seed) {
    nlohmann::json j;
    j["patch_size"] = table.patch_size;
    j["capacity"] = table.capacity;
    j["batch_size"] = batch_size;
    j["drop_last"] = drop_last;
    j["seed"] = seed;
    j["dropped_ids"] = plan.dropped_ids;
    j["batches"] = nlohmann::json::array();
    for (const auto& b : plan.batches) {
        nlohmann::json bj;
        bj["bucket"] = {b.bucket.height, b.bucket.width};
        bj["n_refs"] = b.n_refs;
        bj["token_count"] = b.token_count;
        bj["sample_ids"] = b.sample_ids;
        j["batches"].push_back(std::move(bj));
    }
    return j.dump(2) + "\n";
}

}  // namespace flowforge
