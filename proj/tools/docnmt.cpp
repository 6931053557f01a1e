#include <iostream>

#include "docnmt/cli.hpp"
#include "docnmt/training.hpp"

int main(int argc, char** argv) {
  docnmt::tune_allocator();
  return docnmt::run_cli(argc, argv, std::cout, std::cerr);
}
