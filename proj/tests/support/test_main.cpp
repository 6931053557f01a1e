#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "docnmt/training.hpp"

int main(int argc, char** argv) {
  docnmt::tune_allocator();
  doctest::Context context(argc, argv);
  return context.run();
}
