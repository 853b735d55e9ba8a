#include <cstdio>

int main() {
  std::printf("irmkit placeholder\n");
  return 0;
}
