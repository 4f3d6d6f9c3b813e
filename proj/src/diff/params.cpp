#include "tal/diff/params.hpp"

#include <stdexcept>

namespace tal::diff {

const Array& ParamSet::get(std::string_view path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("no parameter named '" + std::string(path) + "'");
  return it->second;
}

Array& ParamSet::get(std::string_view path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw std::out_of_range("no parameter named '" + std::string(path) + "'");
  return it->second;
}

const Array* ParamSet::find(std::string_view path) const {
  auto it = entries_.find(path);
  return it == entries_.end() ? nullptr : &it->second;
}

void ParamSet::erase(std::string_view path) {
  auto it = entries_.find(path);
  if (it != entries_.end()) entries_.erase(it);
}

std::size_t ParamSet::total_values() const {
  std::size_t n = 0;
  for (const auto& [path, value] : entries_) n += value.size();
  return n;
}

std::vector<std::string> ParamSet::paths() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [path, value] : entries_) out.push_back(path);
  return out;
}

ParamSet ParamSet::subset(std::string_view prefix) const {
  ParamSet out;
  for (const auto& [path, value] : entries_) {
    if (std::string_view(path).starts_with(prefix)) out.set(path, value);
  }
  return out;
}

void ParamSet::merge(const ParamSet& other) {
  for (const auto& [path, value] : other) set(path, value);
}

}  // namespace tal::diff
