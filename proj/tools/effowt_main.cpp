#include "effowt/cli.hpp"

int main(int argc, char** argv) {
  return effowt::run_cli(argc, argv);
}
