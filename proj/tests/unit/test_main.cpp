#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"
#include "hyvi/runtime.hpp"

int main(int argc, char** argv) {
  hyvi::tune_allocator();
  doctest::Context context(argc, argv);
  return context.run();
}
