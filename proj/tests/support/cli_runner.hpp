#pragma once

// Shells out to the built CLI binary and captures exit code and output.

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

namespace cli {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Result run(const std::string& args,
                  const std::string& tag = "cli_last") {
  const std::string out_path = tag + ".out";
  const std::string err_path = tag + ".err";
  const std::string cmd = std::string(FOVEALNET_CLI_PATH) + " " + args + " >" +
                          out_path + " 2>" + err_path;
  const int raw = std::system(cmd.c_str());
  Result r;
  r.code = (raw == -1) ? -1 : WEXITSTATUS(raw);
  r.out = read_file(out_path);
  r.err = read_file(err_path);
  return r;
}

}  // namespace cli
