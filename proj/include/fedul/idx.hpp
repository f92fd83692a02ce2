#pragma once

#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fedul/error.hpp"
#include "fedul/matrix.hpp"

namespace fedul {

// IDX image/label pair grouped by class. Pixels are scaled to [0, 1].
struct IdxDataset {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<Matrix> pools;  // one per class, each row is rows*cols pixels

    std::size_t feature_dim() const noexcept { return rows * cols; }
};

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::string& path) {
    if (offset + 4 > buf.size())
        throw FormatError(path + ": truncated header at byte offset " + std::to_string(offset));
    return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
           (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

inline IdxDataset load_idx_dataset(const std::string& images_path, const std::string& labels_path,
                                   std::size_t num_classes = 10) {
    const auto images = detail::read_all(images_path);
    const auto labels = detail::read_all(labels_path);

    const auto image_magic = detail::read_be32(images, 0, images_path);
    if (image_magic != kIdxImageMagic)
        throw FormatError(images_path + ": bad magic at byte offset 0 (expected 0x00000803)");
    const auto label_magic = detail::read_be32(labels, 0, labels_path);
    if (label_magic != kIdxLabelMagic)
        throw FormatError(labels_path + ": bad magic at byte offset 0 (expected 0x00000801)");

    const std::size_t n_images = detail::read_be32(images, 4, images_path);
    const std::size_t rows = detail::read_be32(images, 8, images_path);
    const std::size_t cols = detail::read_be32(images, 12, images_path);
    const std::size_t n_labels = detail::read_be32(labels, 4, labels_path);
    if (n_images != n_labels)
        throw FormatError(labels_path + ": count mismatch at byte offset 4 (" + std::to_string(n_labels) +
                          " labels vs " + std::to_string(n_images) + " images)");

    constexpr std::size_t image_header = 16;
    constexpr std::size_t label_header = 8;
    const std::size_t pixels = rows * cols;
    if (images.size() < image_header + n_images * pixels)
        throw FormatError(images_path + ": truncated payload at byte offset " + std::to_string(images.size()));
    if (labels.size() < label_header + n_labels)
        throw FormatError(labels_path + ": truncated payload at byte offset " + std::to_string(labels.size()));

    IdxDataset out;
    out.rows = rows;
    out.cols = cols;
    out.pools.assign(num_classes, Matrix(0, pixels));
    std::vector<double> row(pixels);
    for (std::size_t i = 0; i < n_images; ++i) {
        const std::size_t label = labels[label_header + i];
        if (label >= num_classes)
            throw FormatError(labels_path + ": label " + std::to_string(label) + " out of range at byte offset " +
                              std::to_string(label_header + i));
        const std::size_t base = image_header + i * pixels;
        for (std::size_t p = 0; p < pixels; ++p) row[p] = static_cast<double>(images[base + p]) / 255.0;
        out.pools[label].append_row(row);
    }
    return out;
}

}  // namespace fedul
