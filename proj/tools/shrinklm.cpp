#include <malloc.h>

#include "shrinklm/cli.hpp"

int main(int argc, char** argv) {
  // Training allocates and frees the same multi-megabyte activation buffers
  // every step; keeping them on the heap instead of fresh mmaps avoids paying
  // page faults on each one.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
  return shrinklm::cli::run(argc, argv);
}
