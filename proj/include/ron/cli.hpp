#pragma once

// Command-line front end: `ron inspect | compress | eval | maxvol`.
//
// Exit codes
//   0  success
//   2  I/O, parse, checksum or unsupported-layer error, bad command line
//   3  shape error
//   4  compression plan outside its domain
//   5  numerical failure

#include <iosfwd>
#include <string>
#include <vector>

namespace ron {

// Runs one command; `args` excludes the program name. Data goes to `out`,
// diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, char** argv);

}  // namespace ron
