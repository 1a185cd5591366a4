// Writes a first-order Markov interaction log for desk-scale experiments.
#include <cstdint>
#include <iostream>
#include <string>

#include "slimrec/data.hpp"

int main(int argc, char** argv) {
    slimrec::SyntheticSpec spec;
    std::string out_path = "interactions.tsv";
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        auto next = [&](const char* name) -> std::string {
            if (i + 1 >= argc) {
                std::cerr << "flag " << name << " needs a value\n";
                std::exit(1);
            }
            return argv[++i];
        };
        if (a == "--users") spec.users = std::stoi(next("--users"));
        else if (a == "--items") spec.items = std::stoi(next("--items"));
        else if (a == "--min-len") spec.min_len = std::stoi(next("--min-len"));
        else if (a == "--max-len") spec.max_len = std::stoi(next("--max-len"));
        else if (a == "--seed") spec.seed = std::stoull(next("--seed"));
        else if (a == "--out") out_path = next("--out");
        else {
            std::cerr << "usage: slimrec-synth [--users N] [--items N] [--min-len N] [--max-len N]"
                         " [--seed S] [--out FILE]\n";
            return a == "--help" || a == "-h" ? 0 : 1;
        }
    }
    try {
        slimrec::write_synthetic_markov(spec, out_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cout << "wrote " << spec.users << " users over " << spec.items << " items to " << out_path << "\n";
    return 0;
}
