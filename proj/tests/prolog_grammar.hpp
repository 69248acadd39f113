#pragma once

#include <regex>
#include <sstream>
#include <string>
#include <vector>

namespace grammar {

// Line-by-line recogniser for docs/prolog_grammar.md, kept separate from
// the emitter on purpose.
struct Parsed {
  bool ok = true;
  std::string error;
  struct Prop {
    std::size_t relation;
    double value;
    std::string subject, object;
  };
  std::vector<Prop> props;
  std::vector<std::string> pos_objects;
  std::vector<std::string> comments;
};

inline Parsed parse_program(const std::string& text) {
  static const std::string index = "[1-9][0-9]*";
  static const std::string number = "-?[0-9]+\\.[0-9]{4}";
  static const std::regex prop("prop\\(rel_(" + index + "), (" + number + "), (ob_" + index + "), (ob_" + index + ")\\)\\.");
  static const std::regex pos("pos\\((ob_" + index + "), (" + number + "), (" + number + ")\\)\\.");
  Parsed p;
  if (!text.empty() && text.back() != '\n') {
    p.ok = false;
    p.error = "missing final newline";
    return p;
  }
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::smatch m;
    if (!line.empty() && line[0] == '%') {
      p.comments.push_back(line);
    } else if (std::regex_match(line, m, prop)) {
      p.props.push_back({std::stoul(m[1]), std::stod(m[2]), m[3], m[4]});
    } else if (std::regex_match(line, m, pos)) {
      p.pos_objects.push_back(m[1]);
    } else {
      p.ok = false;
      p.error = "line " + std::to_string(lineno) + ": " + line;
      return p;
    }
  }
  return p;
}

}  // namespace grammar
