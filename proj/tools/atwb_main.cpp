#include <atwb/cli.hpp>
#include <atwb/runtime.hpp>

int main(int argc, char** argv) {
  atwb::tune_allocator();
  return atwb::cli::run(argc, argv);
}
