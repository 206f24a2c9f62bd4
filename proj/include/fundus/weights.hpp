#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "fundus/common.hpp"
#include "fundus/tensor.hpp"

namespace fundus::model {

// Ordered, named collection of parameter tensors. The fingerprint (names +
// shapes, in order) is the structural identity: EMA, checkpoint loading and
// optimizer-moment bookkeeping all require fingerprint equality.
template <typename T>
class WeightSet {
 public:
  struct Entry {
    std::string name;
    ad::Shape shape;
    std::vector<T> v;
  };

  void add(std::string name, ad::Shape shape, std::vector<T> values = {}) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    if (values.empty()) values.assign(shape.size(), T(0));
    if (values.size() != shape.size()) {
      throw ContractError("parameter " + name + " has " + std::to_string(values.size()) +
                          " values for shape " + shape.str());
    }
    index_[name] = entries_.size();
    entries_.push_back(Entry{std::move(name), shape, std::move(values)});
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Entry& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second];
  }
  const Entry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return entries_[it->second];
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t value_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.v.size();
    return n;
  }

  std::string fingerprint() const {
    std::string f;
    for (const Entry& e : entries_) {
      f += e.name;
      f += ' ';
      f += e.shape.str();
      f += '\n';
    }
    return f;
  }

  template <typename U>
  WeightSet<U> cast() const {
    WeightSet<U> out;
    for (const Entry& e : entries_) {
      std::vector<U> v(e.v.size());
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(e.v[i]);
      out.add(e.name, e.shape, std::move(v));
    }
    return out;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Throws with the first few structural differences spelled out.
template <typename A, typename B>
void require_same_structure(const WeightSet<A>& a, const WeightSet<B>& b, const char* what) {
  if (a.fingerprint() == b.fingerprint()) return;
  std::string msg = std::string(what) + ": weight structure mismatch";
  const std::size_t n = std::max(a.size(), b.size());
  int reported = 0;
  for (std::size_t i = 0; i < n && reported < 4; ++i) {
    const std::string left =
        i < a.size() ? a.entries()[i].name + " " + a.entries()[i].shape.str() : "<missing>";
    const std::string right =
        i < b.size() ? b.entries()[i].name + " " + b.entries()[i].shape.str() : "<missing>";
    if (left != right) {
      msg += "\n  [" + std::to_string(i) + "] " + left + " vs " + right;
      ++reported;
    }
  }
  throw ContractError(msg);
}

// Binary weight archive ("FWA1"): magic, a free-form JSON metadata string,
// then each parameter as name + shape + little-endian float32 payload.
struct WeightArchive {
  WeightSet<float> weights;
  std::string meta_json;
};

void write_weight_archive(std::ostream& out, const WeightSet<float>& ws,
                          const std::string& meta_json);
WeightArchive read_weight_archive(std::istream& in);

// File variants; save writes to a temp file and renames into place.
void save_weight_archive(const std::filesystem::path& path, const WeightSet<float>& ws,
                         const std::string& meta_json);
WeightArchive load_weight_archive(const std::filesystem::path& path);

}  // namespace fundus::model
