#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace genrec {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A generated token sequence does not spell a known item.
class MalformedGeneration : public Error {
 public:
  MalformedGeneration(std::vector<std::string> tokens, const std::string& why)
      : Error(describe(tokens, why)), tokens_(std::move(tokens)) {}
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  static std::string describe(const std::vector<std::string>& tokens, const std::string& why) {
    std::string s = "malformed generation (" + why + "):";
    for (const auto& t : tokens) s += " '" + t + "'";
    return s;
  }
  std::vector<std::string> tokens_;
};

}  // namespace genrec
