#include "cli_app.hpp"

int main(int argc, char** argv) { return mcs_calib::cli::run(argc, argv); }
