#pragma once

// key=value text parsing shared by the graph and training config readers.

#include <functional>
#include <sstream>
#include <string>
#include <string_view>

#include "fabme/tensor.hpp"

namespace fabme::kv {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline bool parse_bool(const std::string& v, const std::string& key, const std::string& context) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw Error(context + ": " + key + " expects true/false, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& v, const std::string& key, const std::string& context) {
  std::istringstream in(v);
  T out{};
  in >> out;
  if (!in || !in.eof()) throw Error(context + ": " + key + " expects a number, got '" + v + "'");
  return out;
}

/// Calls fn(key, value, line) for every non-blank line; '#' starts a comment.
/// Errors from fn get " (line N)" appended.
inline void for_each(std::string_view text, const std::string& context,
                     const std::function<void(const std::string&, const std::string&, int)>& fn) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw Error(context + " line " + std::to_string(line_no) + ": expected key=value");
    try {
      fn(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)), line_no);
    } catch (const Error& e) {
      throw Error(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
    }
  }
}

}  // namespace fabme::kv
