#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "templaudit/csv.hpp"
#include "templaudit/errors.hpp"
#include "templaudit/numeric.hpp"

namespace templaudit {

/// Label cell value for a sample whose attribute state is unknown.
inline constexpr int kUndefined = -1;
inline constexpr int kFalse = 0;
inline constexpr int kTrue = 1;

struct AttributeMeta {
    std::string name;
    std::string category;
    std::size_t n_out = 2;

    bool operator==(const AttributeMeta&) const = default;
};

struct EmbeddingSet {
    std::vector<std::string> sample_ids;
    std::vector<std::string> subject_ids;
    Matrix vectors;  // n_samples x n_in

    std::size_t size() const noexcept { return sample_ids.size(); }
    std::size_t dim() const noexcept { return vectors.cols(); }
};

/// Per-sample, per-attribute class labels. Binary attributes store kFalse/kTrue,
/// multi-class attributes a class index; kUndefined marks missing labels.
struct LabelSet {
    std::vector<std::string> sample_ids;
    std::vector<AttributeMeta> attributes;
    std::vector<int> values;  // row-major, n_samples x n_attributes

    std::size_t size() const noexcept { return sample_ids.size(); }
    std::size_t n_attributes() const noexcept { return attributes.size(); }

    int at(std::size_t sample, std::size_t attribute) const {
        return values[sample * attributes.size() + attribute];
    }
    int& at(std::size_t sample, std::size_t attribute) {
        return values[sample * attributes.size() + attribute];
    }

    std::size_t attribute_index(const std::string& name) const {
        for (std::size_t a = 0; a < attributes.size(); ++a)
            if (attributes[a].name == name) return a;
        throw DataError("unknown attribute '" + name + "'");
    }

    /// Labels of one attribute, one entry per sample.
    std::vector<int> column(std::size_t attribute) const {
        std::vector<int> out(size());
        for (std::size_t i = 0; i < size(); ++i) out[i] = at(i, attribute);
        return out;
    }

    bool operator==(const LabelSet&) const = default;
};

struct SplitAssignment {
    std::set<std::string> train_sample_ids;
    std::set<std::string> test_sample_ids;

    bool operator==(const SplitAssignment&) const = default;
};

// ---------------------------------------------------------------------------
// Embeddings

inline EmbeddingSet load_embeddings(const std::filesystem::path& path) {
    csv::LineReader reader(path);
    std::string line;
    if (!reader.next(line)) reader.fail("no samples");
    const auto header = csv::split(line);
    if (header.size() < 3 || header[0] != "sample_id" || header[1] != "subject_id") {
        reader.fail("header must be sample_id,subject_id,e0,...");
    }
    const std::size_t n_in = header.size() - 2;
    for (std::size_t j = 0; j < n_in; ++j) {
        if (header[j + 2] != "e" + std::to_string(j)) {
            reader.fail("expected column e" + std::to_string(j) + ", found '" + header[j + 2] + "'");
        }
    }

    EmbeddingSet set;
    std::vector<double> data;
    std::unordered_set<std::string> seen;
    while (reader.next(line)) {
        const auto cells = csv::split(line);
        if (cells.size() != header.size()) {
            reader.fail("expected " + std::to_string(header.size()) + " cells, found " +
                        std::to_string(cells.size()));
        }
        if (cells[0].empty()) reader.fail("empty sample_id");
        if (!seen.insert(cells[0]).second) reader.fail("duplicate sample_id '" + cells[0] + "'");
        for (std::size_t j = 0; j < n_in; ++j) {
            const auto v = csv::parse_double(cells[j + 2]);
            if (!v || !std::isfinite(*v)) reader.fail("non-numeric cell '" + cells[j + 2] + "'");
            data.push_back(*v);
        }
        set.sample_ids.push_back(cells[0]);
        set.subject_ids.push_back(cells[1]);
    }
    if (set.sample_ids.empty()) reader.fail("no samples");
    set.vectors = Matrix(set.sample_ids.size(), n_in, std::move(data));
    return set;
}

inline std::string embeddings_to_csv(const EmbeddingSet& set) {
    std::string out = "sample_id,subject_id";
    for (std::size_t j = 0; j < set.dim(); ++j) out += ",e" + std::to_string(j);
    out += '\n';
    for (std::size_t i = 0; i < set.size(); ++i) {
        out += set.sample_ids[i];
        out += ',';
        out += set.subject_ids[i];
        for (const double v : set.vectors.row(i)) {
            out += ',';
            out += csv::format_double(v);
        }
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attribute metadata

inline std::vector<AttributeMeta> load_attribute_meta(const std::filesystem::path& path) {
    csv::LineReader reader(path);
    std::vector<AttributeMeta> metas;
    std::unordered_set<std::string> names;
    std::string line;
    bool first = true;
    while (reader.next(line)) {
        const auto cells = csv::split(line);
        if (first && !cells.empty() && cells[0] == "name") {
            first = false;
            continue;
        }
        first = false;
        if (cells.size() != 3) reader.fail("expected name,category,n_out");
        const auto n_out = csv::parse_int<std::size_t>(cells[2]);
        if (!n_out || *n_out < 2) reader.fail("n_out must be an integer >= 2");
        if (cells[0].empty()) reader.fail("empty attribute name");
        if (!names.insert(cells[0]).second) reader.fail("duplicate attribute '" + cells[0] + "'");
        metas.push_back({cells[0], cells[1], *n_out});
    }
    if (metas.empty()) reader.fail("no attributes");
    return metas;
}

inline std::string attribute_meta_to_csv(const std::vector<AttributeMeta>& metas) {
    std::string out = "name,category,n_out\n";
    for (const auto& m : metas) out += m.name + "," + m.category + "," + std::to_string(m.n_out) + "\n";
    return out;
}

// ---------------------------------------------------------------------------
// Labels

/// Reads a label CSV. Columns may appear in any order but each must be named
/// in `metas`; the resulting attribute order follows the file's columns.
inline LabelSet load_labels(const std::filesystem::path& path, const std::vector<AttributeMeta>& metas) {
    csv::LineReader reader(path);
    std::string line;
    if (!reader.next(line)) reader.fail("no samples");
    const auto header = csv::split(line);
    if (header.empty() || header[0] != "sample_id") reader.fail("header must start with sample_id");

    LabelSet set;
    for (std::size_t j = 1; j < header.size(); ++j) {
        const auto it = std::find_if(metas.begin(), metas.end(),
                                     [&](const AttributeMeta& m) { return m.name == header[j]; });
        if (it == metas.end()) reader.fail("unknown attribute column '" + header[j] + "'");
        for (const auto& existing : set.attributes)
            if (existing.name == header[j]) reader.fail("duplicate attribute column '" + header[j] + "'");
        set.attributes.push_back(*it);
    }

    std::unordered_set<std::string> seen;
    while (reader.next(line)) {
        const auto cells = csv::split(line);
        if (cells.size() != header.size()) {
            reader.fail("expected " + std::to_string(header.size()) + " cells, found " +
                        std::to_string(cells.size()));
        }
        if (!seen.insert(cells[0]).second) reader.fail("duplicate sample_id '" + cells[0] + "'");
        set.sample_ids.push_back(cells[0]);
        for (std::size_t j = 1; j < cells.size(); ++j) {
            const auto& cell = cells[j];
            const auto& meta = set.attributes[j - 1];
            if (cell == "?") {
                set.values.push_back(kUndefined);
                continue;
            }
            const auto v = csv::parse_int<int>(cell);
            if (!v || *v < 0 || static_cast<std::size_t>(*v) >= meta.n_out) {
                reader.fail("illegal label '" + cell + "' for attribute '" + meta.name + "'");
            }
            set.values.push_back(*v);
        }
    }
    if (set.sample_ids.empty()) reader.fail("no samples");
    return set;
}

inline std::string labels_to_csv(const LabelSet& set) {
    std::string out = "sample_id";
    for (const auto& a : set.attributes) out += "," + a.name;
    out += '\n';
    for (std::size_t i = 0; i < set.size(); ++i) {
        out += set.sample_ids[i];
        for (std::size_t a = 0; a < set.n_attributes(); ++a) {
            const int v = set.at(i, a);
            out += ',';
            out += v == kUndefined ? std::string("?") : std::to_string(v);
        }
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Split

/// Shuffles subjects with `rng`, then assigns whole subjects to train until the
/// train sample count first reaches or exceeds train_fraction * n_samples.
inline SplitAssignment subject_exclusive_split(const EmbeddingSet& emb, double train_fraction, Rng& rng) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw SplitError("train fraction must lie in (0,1)");
    }
    // Subjects in first-appearance order so the shuffle input is canonical.
    std::vector<std::string> subjects;
    std::unordered_map<std::string, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < emb.size(); ++i) {
        auto [it, inserted] = members.try_emplace(emb.subject_ids[i]);
        if (inserted) subjects.push_back(emb.subject_ids[i]);
        it->second.push_back(i);
    }
    if (subjects.size() < 2) {
        throw SplitError("subject-exclusive split needs at least 2 subjects, found " +
                         std::to_string(subjects.size()));
    }
    rng.shuffle(subjects);

    const double target = train_fraction * static_cast<double>(emb.size());
    SplitAssignment split;
    std::size_t train_count = 0;
    for (const auto& subject : subjects) {
        const bool to_train = static_cast<double>(train_count) < target;
        for (const std::size_t i : members[subject]) {
            (to_train ? split.train_sample_ids : split.test_sample_ids).insert(emb.sample_ids[i]);
        }
        if (to_train) train_count += members[subject].size();
    }
    return split;
}

inline std::string split_to_csv(const SplitAssignment& split) {
    std::string out = "sample_id,side\n";
    for (const auto& id : split.train_sample_ids) out += id + ",train\n";
    for (const auto& id : split.test_sample_ids) out += id + ",test\n";
    return out;
}

inline SplitAssignment load_split(const std::filesystem::path& path) {
    csv::LineReader reader(path);
    std::string line;
    if (!reader.next(line) || line.rfind("sample_id,side", 0) != 0) reader.fail("header must be sample_id,side");
    SplitAssignment split;
    while (reader.next(line)) {
        const auto cells = csv::split(line);
        if (cells.size() != 2) reader.fail("expected sample_id,side");
        if (split.train_sample_ids.contains(cells[0]) || split.test_sample_ids.contains(cells[0])) {
            reader.fail("sample '" + cells[0] + "' listed twice");
        }
        if (cells[1] == "train") {
            split.train_sample_ids.insert(cells[0]);
        } else if (cells[1] == "test") {
            split.test_sample_ids.insert(cells[0]);
        } else {
            reader.fail("side must be train or test");
        }
    }
    return split;
}

// ---------------------------------------------------------------------------
// Class balance

/// Inverse-frequency weights N / (K * N_c) over the defined labels of one attribute.
inline std::vector<double> class_balance_weights(std::span<const int> labels, std::size_t n_classes) {
    std::vector<std::size_t> counts(n_classes, 0);
    std::size_t total = 0;
    for (const int y : labels) {
        if (y == kUndefined) continue;
        if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
            throw DataError("label " + std::to_string(y) + " outside [0," + std::to_string(n_classes) + ")");
        }
        ++counts[static_cast<std::size_t>(y)];
        ++total;
    }
    std::vector<double> weights(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (counts[c] == 0) {
            throw DegenerateError("class " + std::to_string(c) + " has no samples");
        }
        weights[c] = static_cast<double>(total) / (static_cast<double>(n_classes) * static_cast<double>(counts[c]));
    }
    return weights;
}

// ---------------------------------------------------------------------------
// Join

/// Samples present in both embeddings and labels, in embedding-file order.
struct Dataset {
    std::vector<std::string> sample_ids;
    std::vector<std::string> subject_ids;
    Matrix vectors;
    LabelSet labels;  // rows aligned with sample_ids

    std::size_t size() const noexcept { return sample_ids.size(); }

    EmbeddingSet embeddings() const { return {sample_ids, subject_ids, vectors}; }

    /// Rows whose sample id is in `ids`, preserving this set's order.
    Dataset subset(const std::set<std::string>& ids) const {
        std::vector<std::size_t> keep;
        for (std::size_t i = 0; i < size(); ++i)
            if (ids.contains(sample_ids[i])) keep.push_back(i);
        return rows(keep);
    }

    Dataset rows(std::span<const std::size_t> keep) const {
        Dataset out;
        out.labels.attributes = labels.attributes;
        out.vectors = gather_rows(vectors, keep);
        for (const std::size_t i : keep) {
            out.sample_ids.push_back(sample_ids[i]);
            out.subject_ids.push_back(subject_ids[i]);
            out.labels.sample_ids.push_back(sample_ids[i]);
            for (std::size_t a = 0; a < labels.n_attributes(); ++a) out.labels.values.push_back(labels.at(i, a));
        }
        return out;
    }
};

struct JoinResult {
    Dataset data;
    std::size_t dropped_embeddings = 0;  // embedding rows without labels
    std::size_t dropped_labels = 0;      // label rows without embeddings
};

inline JoinResult join(const EmbeddingSet& emb, const LabelSet& labels) {
    std::unordered_map<std::string, std::size_t> label_row;
    for (std::size_t i = 0; i < labels.size(); ++i) label_row.emplace(labels.sample_ids[i], i);

    JoinResult result;
    auto& d = result.data;
    d.labels.attributes = labels.attributes;
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < emb.size(); ++i) {
        const auto it = label_row.find(emb.sample_ids[i]);
        if (it == label_row.end()) {
            ++result.dropped_embeddings;
            continue;
        }
        keep.push_back(i);
        d.sample_ids.push_back(emb.sample_ids[i]);
        d.subject_ids.push_back(emb.subject_ids[i]);
        d.labels.sample_ids.push_back(emb.sample_ids[i]);
        for (std::size_t a = 0; a < labels.n_attributes(); ++a) d.labels.values.push_back(labels.at(it->second, a));
    }
    result.dropped_labels = labels.size() - keep.size();
    d.vectors = gather_rows(emb.vectors, keep);
    return result;
}

}  // namespace templaudit
