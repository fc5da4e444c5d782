#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "binary_io.hpp"
#include "dataset.hpp"

namespace memgauge::cifar10 {

// One record: label byte in [0, 9], then 1024 R, 1024 G, 1024 B row-major pixel bytes.
inline constexpr std::size_t record_bytes = 3073;
inline constexpr std::size_t pixel_bytes = 3072;
inline constexpr std::size_t n_classes = 10;

/// Decodes records in order, pixels scaled by 1/255 and kept in stored channel layout.
inline LabeledDataset decode(std::span<const std::uint8_t> bytes, std::optional<std::size_t> limit = {}) {
    if (bytes.size() % record_bytes != 0)
        throw MalformedFileError("CIFAR-10 data size " + std::to_string(bytes.size()) +
                                 " is not a multiple of " + std::to_string(record_bytes));
    std::size_t n = bytes.size() / record_bytes;
    if (limit)
        n = std::min(n, *limit);

    Matrix<float> x(n, pixel_bytes);
    std::vector<Label> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto* rec = bytes.data() + i * record_bytes;
        if (rec[0] >= n_classes)
            throw InvalidLabelError(i, rec[0]);
        y[i] = rec[0];
        auto row = x.row(i);
        for (std::size_t p = 0; p < pixel_bytes; ++p)
            row[p] = static_cast<float>(rec[1 + p]) / 255.0f;
    }
    return LabeledDataset::make(std::move(x), std::move(y), n_classes);
}

/// Inverse of decode for datasets whose features are k/255 values.
inline Bytes encode(const LabeledDataset& data) {
    if (data.n_features() != pixel_bytes)
        throw DimensionError("CIFAR-10 records need 3072 features, got " + std::to_string(data.n_features()));
    Bytes out(data.size() * record_bytes);
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto* rec = out.data() + i * record_bytes;
        if (data.labels[i] >= n_classes)
            throw InvalidLabelError(i, data.labels[i]);
        rec[0] = static_cast<std::uint8_t>(data.labels[i]);
        auto row = data.features.row(i);
        for (std::size_t p = 0; p < pixel_bytes; ++p)
            rec[1 + p] = static_cast<std::uint8_t>(std::lround(std::clamp(row[p], 0.0f, 1.0f) * 255.0f));
    }
    return out;
}

inline LabeledDataset load(const std::filesystem::path& path, std::optional<std::size_t> limit = {}) {
    return decode(read_file(path), limit);
}

/// Concatenates several batch files (e.g. data_batch_1..5.bin); `limit` caps the total.
inline LabeledDataset load_batches(std::span<const std::filesystem::path> paths, std::optional<std::size_t> limit = {}) {
    Bytes all;
    for (const auto& p : paths) {
        auto b = read_file(p);
        if (b.size() % record_bytes != 0)
            throw MalformedFileError(p.string() + ": size is not a multiple of 3073");
        all.insert(all.end(), b.begin(), b.end());
        if (limit && all.size() / record_bytes >= *limit)
            break;
    }
    return decode(all, limit);
}

} // namespace memgauge::cifar10

namespace memgauge {

inline LabeledDataset load_cifar10(const std::filesystem::path& path, std::optional<std::size_t> limit = {}) {
    return cifar10::load(path, limit);
}

} // namespace memgauge
