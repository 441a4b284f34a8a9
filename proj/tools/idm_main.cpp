#include "idm/cli.hpp"

int main(int argc, char** argv) {
  idm::configure_allocator();
  return idm::cli::run(argc, argv);
}
