#include "coseg/core.hpp"

#include <cstdio>

int main() {
  std::puts("coseg: CLI under construction");
  return 0;
}
