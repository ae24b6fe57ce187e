// genrec preprocess|pretrain|finetune|evaluate|recommend --config PATH [...]
//
// --set KEY=VALUE overrides any config key after the file is read (relative
// paths then resolve against the working directory); --seed wins over both.
//
// Progress goes to stderr, command output to stdout, and the last stdout
// line is always "status=ok command=..." or "status=error command=...".

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "genrec/pipeline.hpp"

namespace {

void print_status(const std::string& command, const genrec::StatusFields& fields) {
  std::cout << "status=ok command=" << command;
  for (const auto& [k, v] : fields) std::cout << ' ' << k << '=' << v;
  std::cout << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative sequential recommendation: preprocess, train, evaluate, recommend."};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> from, checkpoint, out, user;
  std::vector<std::string> overrides;
  std::string phase = "test";

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--set", overrides, "override a config key (KEY=VALUE, repeatable)");
  };
  auto* pre = app.add_subcommand("preprocess", "5-core filter, leave-one-out split, vocabulary");
  add_common(pre);
  auto* pt = app.add_subcommand("pretrain", "masked-item pretraining");
  add_common(pt);
  pt->add_option("--out", out, "checkpoint path (default <workdir>/pretrain.ckpt)");
  auto* ft = app.add_subcommand("finetune", "last-item finetuning; from scratch unless --from is given");
  add_common(ft);
  ft->add_option("--from", from, "initial checkpoint");
  ft->add_option("--out", out, "checkpoint path (default <workdir>/finetune.ckpt)");
  auto* ev = app.add_subcommand("evaluate", "HR@k / NDCG@k report");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "weights (default <workdir>/finetune.ckpt)");
  ev->add_option("--phase", phase, "validation or test")->check(CLI::IsMember({"validation", "test"}));
  auto* rec = app.add_subcommand("recommend", "top beam_width next items for one user");
  add_common(rec);
  rec->add_option("--checkpoint", checkpoint, "weights (default <workdir>/finetune.ckpt)");
  rec->add_option("--user", user, "raw user id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0) std::cout << "status=error command=" << (argc > 1 ? argv[1] : "") << " message=bad arguments" << std::endl;
    return code;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    auto cfg = genrec::RunConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw genrec::Error("--set expects KEY=VALUE, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    genrec::CommandOptions opts{from, checkpoint, out, genrec::parse_phase(phase), user};
    genrec::StatusFields fields;
    if (command == "preprocess") fields = genrec::cmd_preprocess(cfg);
    else if (command == "pretrain") fields = genrec::cmd_pretrain(cfg, opts);
    else if (command == "finetune") fields = genrec::cmd_finetune(cfg, opts);
    else if (command == "evaluate") fields = genrec::cmd_evaluate(cfg, opts);
    else fields = genrec::cmd_recommend(cfg, opts);
    print_status(command, fields);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "genrec " << command << ": " << e.what() << '\n';
    std::cout << "status=error command=" << command << " message=" << e.what() << std::endl;
    return 1;
  }
}
