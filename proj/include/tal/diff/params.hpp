#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tal/diff/array.hpp"

namespace tal::diff {

/// Named arrays addressed by dotted path ("enc.l1.ffn.fc1.w"). Ordered, so
/// iteration and serialization are deterministic.
class ParamSet {
 public:
  using Map = std::map<std::string, Array, std::less<>>;

  void set(std::string path, Array value) { entries_.insert_or_assign(std::move(path), std::move(value)); }
  bool contains(std::string_view path) const { return entries_.find(path) != entries_.end(); }
  const Array& get(std::string_view path) const;
  Array& get(std::string_view path);
  const Array* find(std::string_view path) const;
  void erase(std::string_view path);

  std::size_t size() const { return entries_.size(); }
  std::size_t total_values() const;
  std::vector<std::string> paths() const;

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }
  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }

  // Entries whose path starts with `prefix`.
  ParamSet subset(std::string_view prefix) const;
  void merge(const ParamSet& other);

  bool operator==(const ParamSet& other) const = default;

 private:
  Map entries_;
};

}  // namespace tal::diff
