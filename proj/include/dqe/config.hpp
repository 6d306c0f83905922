// Flat key-value configuration files:
//
//   # comment
//   key = value
//
// Keys mirror command-line flag names without the leading dashes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

namespace dqe {

using KeyValues = std::map<std::string, std::string>;

// Duplicate keys and lines without '=' are rejected with a ConfigError that
// names `source` and the line number.
KeyValues parse_key_values(std::istream& in, const std::string& source);
KeyValues read_config_file(const std::filesystem::path& path);

std::vector<int> parse_int_list(const std::string& s);
std::string join_ints(const std::vector<int>& v);

// SplitMix64 finaliser; derives independent stream seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace dqe
