#pragma once

// Accuracy tables, CSV exports and the JSON metric report.

#include <array>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "refgen/classifier.hpp"
#include "refgen/io.hpp"
#include "refgen/rf.hpp"
#include "refgen/tokens.hpp"
#include "refgen/toppr.hpp"

namespace refgen::eval {

struct AccuracyRow {
    std::string dataset;
    std::size_t frames = 0;
    double accuracy = 0;
    std::array<std::optional<double>, rf::kNumClasses> per_class{};  // empty for absent classes
};

// Frame labels are the ground truth; for fakes that is the prompted class.
inline AccuracyRow accuracy_row(const cls::Classifier& m, const std::string& name, std::span<const rf::IQFrame> frames) {
    AccuracyRow row;
    row.dataset = name;
    row.frames = frames.size();
    const auto pred = cls::predict(m, frames);
    std::array<std::size_t, rf::kNumClasses> hit{}, total{};
    std::size_t all = 0;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        const auto c = static_cast<std::size_t>(frames[i].label);
        ++total[c];
        if (pred[i] == frames[i].label) ++hit[c], ++all;
    }
    row.accuracy = frames.empty() ? 0.0 : static_cast<double>(all) / static_cast<double>(frames.size());
    for (std::size_t c = 0; c < rf::kNumClasses; ++c)
        if (total[c]) row.per_class[c] = static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    return row;
}

inline nlohmann::json to_json(const AccuracyRow& r) {
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t c = 0; c < rf::kNumClasses; ++c)
        if (r.per_class[c]) per[std::string(rf::scheme_name(rf::kAllSchemes[c]))] = *r.per_class[c];
    return {{"dataset", r.dataset}, {"frames", r.frames}, {"accuracy", r.accuracy}, {"per_class", per}};
}

inline nlohmann::json to_json(const TopPR& t) {
    return {{"fidelity", t.fidelity}, {"diversity", t.diversity}, {"top_f1", t.top_f1}};
}

// ---------------------------------------------------------------------------
// CSV

// Two columns "I,Q", one row per sample.
inline std::string constellation_csv(std::span<const rf::IQFrame> frames) {
    std::ostringstream os;
    os.precision(7);
    os << "I,Q\n";
    for (const auto& f : frames)
        for (std::size_t k = 0; k < rf::kFrameLen; ++k) os << f.i[k] << ',' << f.q[k] << '\n';
    return os.str();
}

// One file per class present: <prefix>_<scheme>.csv. Returns the paths written.
inline std::vector<std::filesystem::path> export_constellations(std::span<const rf::IQFrame> frames,
                                                                 const std::filesystem::path& prefix) {
    std::vector<std::filesystem::path> out;
    for (std::size_t c = 0; c < rf::kNumClasses; ++c) {
        std::vector<rf::IQFrame> sel;
        for (const auto& f : frames)
            if (static_cast<std::size_t>(f.label) == c) sel.push_back(f);
        if (sel.empty()) continue;
        auto path = prefix;
        path += "_" + std::string(rf::scheme_name(rf::kAllSchemes[c])) + ".csv";
        write_text(path, constellation_csv(sel));
        out.push_back(path);
    }
    return out;
}

// "class,token,count", every (class, token) cell.
inline std::string histogram_csv(const tok::Histogram& h) {
    std::ostringstream os;
    os << "class,token,count\n";
    for (std::size_t c = 0; c < rf::kNumClasses; ++c)
        for (std::size_t k = 0; k < static_cast<std::size_t>(tok::kCodebook); ++k)
            os << rf::scheme_name(rf::kAllSchemes[c]) << ',' << k << ',' << h[c][k] << '\n';
    return os.str();
}

// Header from `columns`, then one row per entry.
inline std::string table_csv(const std::vector<std::string>& columns, const std::vector<std::vector<double>>& rows) {
    std::ostringstream os;
    os.precision(8);
    for (std::size_t i = 0; i < columns.size(); ++i) os << (i ? "," : "") << columns[i];
    os << '\n';
    for (const auto& r : rows) {
        require(r.size() == columns.size(), "table_csv: row width mismatch");
        for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << r[i];
        os << '\n';
    }
    return os.str();
}

// Per-class codebook statistics used in reports and acceptance checks.
inline nlohmann::json usage_json(const tok::Histogram& h) {
    nlohmann::json per = nlohmann::json::object();
    for (std::size_t c = 0; c < rf::kNumClasses; ++c) {
        if (tok::total(h[c]) == 0) continue;
        per[std::string(rf::scheme_name(rf::kAllSchemes[c]))] = {{"active_codes", tok::active_codes(h[c])},
                                                                {"entropy", tok::entropy(h[c])}};
    }
    const auto pooled = tok::pooled(h);
    return {{"per_class", per},
            {"pooled_active_codes", tok::active_codes(pooled)},
            {"pooled_entropy", tok::entropy(pooled)}};
}

}  // namespace refgen::eval
