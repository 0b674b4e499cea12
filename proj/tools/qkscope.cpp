// qkscope: query-key interaction analysis of vision transformer checkpoints.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "qkscope/pipeline.hpp"

namespace {

struct CommandInfo {
  const char* name;
  const char* help;
};

constexpr CommandInfo kCommands[] = {
    {"modes", "decompose every selected head into singular modes -> modes.json"},
    {"cosine-trend", "weighted mode cosine per head and layer -> cosine_trend.csv"},
    {"preference", "odd-one-out attention allocation -> preference.csv"},
    {"mode-maps", "query/key overlays of the top images per mode -> overlays/*.png"},
    {"mine", "top-k images per singular mode -> mining.json"},
    {"anisotropy", "embedding anisotropy baseline and relative cosine -> anisotropy.csv"},
    {"same-object", "probability that a mode's query and key land on one object"},
    {"verify", "run the invariant suite; exit 0 when every check passes"},
};

void add_run_options(CLI::App* sub, qkscope::RunConfig& c) {
  sub->add_option("--checkpoint", c.checkpoint, "safetensors checkpoint");
  sub->add_option("--mapping", c.mapping, "mapping config JSON for the checkpoint family");
  sub->add_option("--images", c.images, "dataset directory");
  sub->add_option("--masks", c.masks, "directory with <id>/target.png and <id>/distractor.png");
  sub->add_option("--labels", c.labels, "directory with <id>.png label maps");
  sub->add_option("--layer", c.layer, "layer selector: all, or e.g. 0,3,5-7")->capture_default_str();
  sub->add_option("--head", c.head, "head selector")->capture_default_str();
  sub->add_option("--mode", c.mode, "mode selector (default 0; all for same-object)");
  sub->add_option("--top-k", c.top_k, "images kept per mode")->capture_default_str();
  sub->add_option("--seed", c.seed, "random seed")->capture_default_str();
  sub->add_option("--threads", c.threads, "worker threads (0 = all cores)")->capture_default_str();
  sub->add_option("--out", c.out, "output directory")->required();
  sub->add_option("--cache", c.cache, "embedding cache directory");
  sub->add_option("--cache-mb", c.cache_mb, "in-memory embedding budget in MiB")->capture_default_str();
  sub->add_flag("--negative", c.negative, "also rank and render the (-u, -v) orientation");
  sub->add_option("--confidence", c.confidence, "null interval confidence")->capture_default_str();
  sub->add_option("--null-samples", c.null_samples, "null interval Monte Carlo draws")
      ->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Query-key interaction analysis for vision transformers"};
  app.set_version_flag("--version", std::string(qkscope::kToolVersion));
  app.require_subcommand(1);
  qkscope::RunConfig config;
  for (const auto& cmd : kCommands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    add_run_options(sub, config);
    sub->callback([&config, name = std::string(cmd.name)] { config.command = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: InvalidArgument: " << e.what() << '\n';
    return 2;
  }
  return qkscope::run(config, std::cerr);
}
