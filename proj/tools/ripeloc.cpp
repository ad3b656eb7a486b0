// ripeloc command line tool — subcommands are registered as the pipeline
// modules land; this stub grows into the full driver.

#include <CLI11.hpp>

#include <cstdio>

int main(int argc, char** argv) {
  CLI::App app{"ripeloc: greenhouse tomato detector pipeline"};
  app.require_subcommand(1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) != 0 ? 1 : 0;
  }
  std::fprintf(stderr, "error: no subcommands implemented yet\n");
  return 1;
}
