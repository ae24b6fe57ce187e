// Writes a synthetic interaction log (user \t item \t timestamp) where every
// user walks one shared random cycle of items.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "genrec/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic cyclic interaction data."};
  genrec::synthetic::CyclicOptions o;
  std::string out_path = "-";
  app.add_option("--users", o.num_users)->check(CLI::PositiveNumber);
  app.add_option("--items", o.num_items)->check(CLI::PositiveNumber);
  app.add_option("--length", o.sequence_length, "interactions per user")->check(CLI::PositiveNumber);
  app.add_option("--noise", o.noise, "probability of a random substitution")->check(CLI::Range(0.0, 1.0));
  app.add_option("--seed", o.seed);
  app.add_option("-o,--out", out_path, "output file, - for stdout");
  CLI11_PARSE(app, argc, argv);

  const auto data = genrec::synthetic::cyclic(o);
  std::ofstream file;
  if (out_path != "-") {
    file.open(out_path);
    if (!file) {
      std::cerr << "cannot write " << out_path << '\n';
      return 1;
    }
  }
  std::ostream& out = out_path == "-" ? std::cout : file;
  for (const auto& x : data.interactions) out << x.user_id << '\t' << x.item_id << '\t' << x.timestamp << '\n';
  return out ? 0 : 1;
}
