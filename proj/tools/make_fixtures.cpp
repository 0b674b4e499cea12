// Regenerates the toy checkpoints, datasets and embedding dumps under fixtures/toy.

#include <filesystem>
#include <iostream>

#include "qkscope/error.hpp"
#include "toy_model.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: make_fixtures <output-dir>\n";
    return 2;
  }
  try {
    qkscope::toy::write_fixture_tree(argv[1]);
  } catch (const qkscope::Error& e) {
    std::cerr << "error: " << qkscope::error_kind_name(e.kind()) << ": " << e.what() << '\n';
    return 2;
  }
  return 0;
}
