#pragma once

// Deterministic CSV output.  All floats go through the same %.10g format so
// repeated runs produce byte-identical files.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lexi {

inline std::string csv_num(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

inline std::string csv_num(std::uint64_t x) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%llu", static_cast<unsigned long long>(x));
    return buf;
}

inline std::string csv_num(long long x) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%lld", x);
    return buf;
}

inline std::string csv_num(int x) { return csv_num(static_cast<long long>(x)); }

class CsvWriter {
public:
    // append = true continues an existing file (the header is written only
    // when the file is empty or missing), used when a run resumes.
    CsvWriter(const std::string& path, const std::string& header, bool append = false)
        : out_(path, append ? std::ios::binary | std::ios::app : std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot write csv: " + path);
        if (!append || out_.tellp() == std::ofstream::pos_type(0)) out_ << header << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << "\n";
    }

    void close() {
        out_.close();
        if (out_.fail()) throw std::runtime_error("csv write failed");
    }

private:
    std::ofstream out_;
};

} // namespace lexi
