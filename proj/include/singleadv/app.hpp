#pragma once

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace singleadv {

/// An upstream artifact is missing; `prerequisite` names the subcommand that produces it.
class DependencyError : public std::runtime_error {
 public:
  DependencyError(const std::string& prerequisite, const std::filesystem::path& missing)
      : std::runtime_error("missing " + missing.string() + ": run `" + prerequisite + "` first"),
        prerequisite(prerequisite) {}
  std::string prerequisite;
};

/// Artifacts disagree about the data or run they came from.
class ProvenanceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Refusal to touch an existing output directory.
class OutputExistsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitDependency = 3,
  kExitOutputExists = 4,
  kExitProvenance = 5,
};

/// Entry point shared by the command-line tool and tests. args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace singleadv
