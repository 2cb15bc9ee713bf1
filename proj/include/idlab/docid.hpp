#pragma once

#include <compare>
#include <stdexcept>
#include <string>
#include <vector>

namespace idlab {

/// Position-sliced identifier vocabulary. Position p (0-based) owns codes
/// [p*K + 1, (p+1)*K]; token 0 is begin and token L*K + 1 is end.
struct IdLayout {
  int length = 4;
  int codes_per_slice = 256;

  int numeric_codes() const { return length * codes_per_slice; }
  int vocab_size() const { return numeric_codes() + 2; }
  int bos() const { return 0; }
  int eos() const { return numeric_codes() + 1; }
  int slice_min(int pos) const { return pos * codes_per_slice + 1; }
  int slice_max(int pos) const { return (pos + 1) * codes_per_slice; }
  bool in_slice(int pos, int code) const { return code >= slice_min(pos) && code <= slice_max(pos); }
  /// Global code for a slice-local 0-based index.
  int code(int pos, int local) const { return pos * codes_per_slice + local + 1; }
  int local(int pos, int code) const { return code - pos * codes_per_slice - 1; }

  bool operator==(const IdLayout&) const = default;
};

class IdError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DocId {
  std::vector<int> codes;

  auto operator<=>(const DocId&) const = default;
  bool operator==(const DocId&) const = default;

  bool valid(const IdLayout& layout) const {
    if (static_cast<int>(codes.size()) != layout.length) return false;
    for (int p = 0; p < layout.length; ++p) {
      if (!layout.in_slice(p, codes[static_cast<std::size_t>(p)])) return false;
    }
    return true;
  }

  /// `c1,c2,c3,c4`
  std::string str() const {
    std::string out;
    for (std::size_t i = 0; i < codes.size(); ++i) {
      if (i) out += ',';
      out += std::to_string(codes[i]);
    }
    return out;
  }

  static DocId parse(const std::string& text) {
    DocId id;
    std::size_t start = 0;
    while (start <= text.size()) {
      const std::size_t comma = text.find(',', start);
      const std::string field =
          text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (field.empty()) throw IdError("malformed DocId '" + text + "'");
      std::size_t used = 0;
      int v = 0;
      try {
        v = std::stoi(field, &used);
      } catch (const std::exception&) {
        throw IdError("malformed DocId '" + text + "'");
      }
      if (used != field.size()) throw IdError("malformed DocId '" + text + "'");
      id.codes.push_back(v);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return id;
  }
};

}  // namespace idlab
