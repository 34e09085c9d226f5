#include <iostream>

#include "docqa/cli.hpp"

int main(int argc, char** argv) {
  std::ios::sync_with_stdio(false);
  return docqa::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
