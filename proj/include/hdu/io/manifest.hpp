#pragma once

// Case manifest: one `image<TAB>label<TAB>split` row per case, paths relative
// to the manifest's directory, '-' for a missing label. Lines starting with
// '#' are comments, except `# preprocessing: <record>`.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hdu/io/error.hpp"

namespace hdu::io {

struct ManifestEntry {
    std::string id;
    std::filesystem::path image;  // absolute or relative to the working directory
    std::filesystem::path label;  // empty when the case has no ground truth
    std::string split;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::string preprocessing;

    std::vector<const ManifestEntry*> split(const std::string& tag) const {
        std::vector<const ManifestEntry*> out;
        for (auto& e : entries)
            if (tag.empty() || e.split == tag) out.push_back(&e);
        return out;
    }
};

inline Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open manifest " + path.string());
    const auto base = path.parent_path();
    Manifest m;
    std::string line;
    std::size_t lineno = 0;
    const std::string pre_tag = "# preprocessing: ";
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (line.rfind(pre_tag, 0) == 0) m.preprocessing = line.substr(pre_tag.size());
            continue;
        }
        std::vector<std::string> f;
        std::istringstream ls(line);
        for (std::string t; std::getline(ls, t, '\t');) f.push_back(t);
        if (f.size() != 3)
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields, got " +
                              std::to_string(f.size()));
        ManifestEntry e;
        e.image = base / f[0];
        if (f[1] != "-") e.label = base / f[1];
        e.split = f[2];
        e.id = std::filesystem::path(f[0]).stem().string();
        m.entries.push_back(std::move(e));
    }
    return m;
}

/// Writes `m`, expressing paths relative to the manifest's directory.
inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    const auto base = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
    auto rel = [&](const std::filesystem::path& p) {
        return std::filesystem::relative(p, base).generic_string();
    };
    std::ostringstream os;
    if (!m.preprocessing.empty()) os << "# preprocessing: " << m.preprocessing << "\n";
    for (auto& e : m.entries)
        os << rel(e.image) << "\t" << (e.label.empty() ? std::string("-") : rel(e.label)) << "\t" << e.split << "\n";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    out << os.str();
}

}  // namespace hdu::io
