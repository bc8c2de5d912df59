#include "cmcl/cli.hpp"

int main(int argc, char** argv) { return cmcl::dispatch(argc, argv); }
