#ifndef XMODNET_DATASET_IO_HPP
#define XMODNET_DATASET_IO_HPP

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "xmodnet/data.hpp"

namespace xmodnet {

// On-disk layout:
//   <root>/images/*.jpg|png
//   <root>/splits/{train,val,test}.csv     (header row, then filename,label)

struct ManifestEntry {
    std::string filename;
    std::string label;
};

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& csv_path) {
    std::ifstream in(csv_path);
    if (!in)
        throw std::runtime_error("manifest not found: " + csv_path.string());
    std::vector<ManifestEntry> entries;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (header) {  // skip the filename,label header row
            header = false;
            continue;
        }
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("malformed manifest line in " + csv_path.string() + ": " + line);
        entries.push_back({line.substr(0, comma), line.substr(comma + 1)});
    }
    return entries;
}

/// Decodes one image file, resizes (bilinear) to resolution x resolution and
/// scales to [0,1] RGB.
inline ImageRef load_image(const std::filesystem::path& path, std::size_t resolution) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty())
        throw std::runtime_error("cannot read image: " + path.string());
    cv::Mat resized;
    if (bgr.cols == int(resolution) && bgr.rows == int(resolution))
        resized = bgr;
    else
        cv::resize(bgr, resized, cv::Size(int(resolution), int(resolution)), 0, 0, cv::INTER_LINEAR);
    auto pixels = std::make_shared<std::vector<float>>(resolution * resolution * 3);
    for (std::size_t y = 0; y < resolution; ++y) {
        const auto* row = resized.ptr<cv::Vec3b>(int(y));
        for (std::size_t x = 0; x < resolution; ++x) {
            const std::size_t base = (y * resolution + x) * 3;
            (*pixels)[base + 0] = float(row[x][2]) / 255.f;  // BGR -> RGB
            (*pixels)[base + 1] = float(row[x][1]) / 255.f;
            (*pixels)[base + 2] = float(row[x][0]) / 255.f;
        }
    }
    return pixels;
}

/// Loads one split from the directory layout. Class ids are assigned by
/// sorted label order, so they are stable across runs.
inline DatasetSplit load_image_split(const std::filesystem::path& root, const std::string& split_name,
                                     std::size_t resolution) {
    const auto entries = read_manifest(root / "splits" / (split_name + ".csv"));
    std::map<std::string, int> label_to_id;
    for (const auto& e : entries) label_to_id.emplace(e.label, 0);
    int next = 0;
    for (auto& [_, id] : label_to_id) id = next++;

    DatasetSplit split;
    split.name = split_name;
    split.resolution = resolution;
    for (const auto& e : entries) {
        const int cid = label_to_id.at(e.label);
        split.class_names[cid] = e.label;
        split.examples[cid].push_back(load_image(root / "images" / e.filename, resolution));
    }
    return split;
}

/// miniImageNet ingestion: 84x84, with the split class counts of the standard
/// 64/16/20 partition validated.
inline DatasetSplit load_miniimagenet(const std::filesystem::path& root, const std::string& split_name) {
    static const std::map<std::string, std::size_t> expected = {
        {"train", 64}, {"val", 16}, {"test", 20}};
    const auto it = expected.find(split_name);
    if (it == expected.end())
        throw std::invalid_argument("load_miniimagenet: unknown split '" + split_name + "'");
    DatasetSplit split = load_image_split(root, split_name, 84);
    if (split.num_classes() != it->second)
        throw std::runtime_error("load_miniimagenet: split '" + split_name + "' has " +
                                 std::to_string(split.num_classes()) + " classes, expected " +
                                 std::to_string(it->second));
    return split;
}

/// Writes a split back out in the same layout (8-bit PNG), for inspection.
inline void save_split_as_images(const DatasetSplit& split, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    fs::create_directories(root / "images");
    fs::create_directories(root / "splits");
    std::ofstream csv(root / "splits" / (split.name + ".csv"));
    if (!csv)
        throw std::runtime_error("cannot write manifest under " + root.string());
    csv << "filename,label\n";
    const int res = int(split.resolution);
    for (const auto& [cid, images] : split.examples) {
        const std::string label = split.class_names.count(cid) ? split.class_names.at(cid)
                                                               : "class_" + std::to_string(cid);
        for (std::size_t i = 0; i < images.size(); ++i) {
            std::ostringstream name;
            name << split.name << '_' << label << '_' << i << ".png";
            cv::Mat bgr(res, res, CV_8UC3);
            const auto& px = *images[i];
            for (int y = 0; y < res; ++y)
                for (int x = 0; x < res; ++x) {
                    const std::size_t base = (std::size_t(y) * split.resolution + x) * 3;
                    auto q = [&](std::size_t c) {
                        return uchar(std::lround(std::clamp(px[base + c], 0.f, 1.f) * 255.f));
                    };
                    bgr.at<cv::Vec3b>(y, x) = cv::Vec3b(q(2), q(1), q(0));
                }
            const fs::path out = root / "images" / name.str();
            if (!cv::imwrite(out.string(), bgr))
                throw std::runtime_error("cannot write image: " + out.string());
            csv << name.str() << ',' << label << '\n';
        }
    }
}

} // namespace xmodnet

#endif // XMODNET_DATASET_IO_HPP
