// SPDX-License-Identifier: Apache-2.0
#include "dprob/cli/commands.hpp"

#include <iostream>

int main(int argc, char** argv) { return dprob::run_cli(argc, argv, std::cout, std::cerr); }
