#include <malloc.h>

#include "ciml/cli.hpp"

int main(int argc, char** argv) {
    // Keep large tensor buffers in the heap instead of fresh mmaps per allocation.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return ciml::cli::cli_dispatch(argc, argv);
}
