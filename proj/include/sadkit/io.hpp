#pragma once

#include <string>
#include <vector>

namespace sadkit::io {

/// Shortest decimal that round-trips a double (17 significant digits).
std::string g17(double x);

double parse_double(const std::string& s);

/// Write through a temp file and rename, so readers never see partial files.
void atomic_write_text(const std::string& path, const std::string& content);

std::string read_text(const std::string& path);

void append_text(const std::string& path, const std::string& content);

std::vector<std::string> split_csv_line(const std::string& line);

std::string join_csv(const std::vector<std::string>& fields);

/// RFC 3339 UTC timestamp for report headers.
std::string timestamp_utc();

}  // namespace sadkit::io
