#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "elusive/corpus.hpp"
#include "elusive/errors.hpp"
#include "elusive/io.hpp"
#include "elusive/pipeline.hpp"
#include "elusive/plot.hpp"

namespace fs = std::filesystem;
using namespace elusive;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

int gen_corpus(int n, const std::string& layout, std::uint64_t seed, const fs::path& out) {
  const auto records = generate_biographies(EntityPools::bundled(), n, parse_layout(layout), seed);
  fs::create_directories(out);
  write_biographies(out / "biographies.jsonl", records);
  write_qa(out / "qa.jsonl", generate_qa(records));
  std::cerr << "wrote " << records.size() << " biographies and " << records.size() * kFactFields.size()
            << " questions to " << out.string() << "\n";
  return 0;
}

int run(const fs::path& config_path, const fs::path& out) {
  const auto config = RunConfig::load(config_path);
  const auto start = std::chrono::steady_clock::now();
  const auto summary = run_pipeline(config, out, [&](std::string_view msg) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "%8.1fs  %.*s\n", t, static_cast<int>(msg.size()), msg.data());
  });
  std::cout << summary.to_csv();
  return 0;
}

int plot(const fs::path& in, const fs::path& out) {
  const auto svg = plot_csv(read_text(in), in.stem().string());
  write_text(out, svg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-contrast token-dropout experiments on synthetic biographies"};
  app.require_subcommand(1);

  int n = 100;
  std::string layout = "fixed";
  std::uint64_t seed = 0;
  std::string corpus_out;
  auto* gen = app.add_subcommand("gen-corpus", "Write a biography corpus and its QA pairs");
  gen->add_option("--n", n, "number of people")->required()->check(CLI::NonNegativeNumber);
  gen->add_option("--layout", layout, "fixed or random_position")->check(CLI::IsMember({"fixed", "random_position"}));
  gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--out", corpus_out, "output directory")->required();

  std::string config_path, run_out = "run";
  auto* pipe = app.add_subcommand("pipeline", "Run the full experiment");
  pipe->add_option("--config", config_path, "run configuration JSON")->required();
  pipe->add_option("--out", run_out, "run directory")->capture_default_str();

  std::string plot_in, plot_out;
  auto* plt = app.add_subcommand("plot", "Render a constitution or distance CSV as SVG");
  plt->add_option("--in", plot_in, "input CSV")->required();
  plt->add_option("--out", plot_out, "output SVG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) return gen_corpus(n, layout, seed, corpus_out);
    if (*pipe) return run(config_path, run_out);
    if (*plt) return plot(plot_in, plot_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
