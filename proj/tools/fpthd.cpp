// fpthd: page transcription pipeline and training front end.

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fpthd/formats.hpp"
#include "fpthd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fpthd;

namespace {

// Flags that mirror config keys. Values are appended to the INI text as an
// extra section, so they go through the same parser and validation.
struct KeyFlag {
  const char* flag;
  const char* section;
  const char* key;
  const char* help;
};

const KeyFlag kPipelineFlags[] = {
    {"--run-layout", "PAGE_PARSER", "RUN_LAYOUT_PARSER", "yes/no"},
    {"--run-cropper", "PAGE_PARSER", "RUN_LINE_CROPPER", "yes/no"},
    {"--run-ocr", "PAGE_PARSER", "RUN_OCR", "yes/no"},
    {"--detection-threshold", "LAYOUT_PARSER_1", "DETECTION_THRESHOLD", "baseline probability threshold"},
    {"--downsample", "LAYOUT_PARSER_1", "DOWNSAMPLE", "layout map downsampling factor"},
    {"--max-megapixels", "LAYOUT_PARSER_1", "MAX_MEGAPIXELS", "page size limit before layout analysis"},
    {"--line-end-weight", "LAYOUT_PARSER_1", "LINE_END_WEIGHT", ""},
    {"--vertical-connection-range", "LAYOUT_PARSER_1", "VERTICAL_LINE_CONNECTION_RANGE", ""},
    {"--merge-lines", "LAYOUT_PARSER_1", "MERGE_LINES", "yes/no"},
    {"--adjust-heights", "LAYOUT_PARSER_1", "ADJUST_HEIGHTS", "yes/no"},
    {"--smooth-line-predictions", "LAYOUT_PARSER_1", "SMOOTH_LINE_PREDICTIONS", "yes/no"},
    {"--detect-regions", "LAYOUT_PARSER_1", "DETECT_REGIONS", "yes/no"},
    {"--line-height", "LINE_CROPPER", "LINE_HEIGHT", "crop height in pixels"},
    {"--line-scale", "LINE_CROPPER", "LINE_SCALE", ""},
    {"--interp", "LINE_CROPPER", "INTERP", "0 nearest, 1 linear, 2 quadratic"},
};

const KeyFlag kTrainFlags[] = {
    {"--max-lr", "TRAIN", "MAX_LR", ""},
    {"--train-batch", "TRAIN", "TRAIN_BATCH", ""},
    {"--val-batch", "TRAIN", "VAL_BATCH", ""},
    {"--weight-decay", "TRAIN", "WEIGHT_DECAY", ""},
    {"--mask-ratio", "TRAIN", "MASK_RATIO", ""},
    {"--attn-mask-ratio", "TRAIN", "ATTN_MASK_RATIO", ""},
    {"--max-span", "TRAIN", "MAX_SPAN", ""},
    {"--image-size", "TRAIN", "IMAGE_SIZE", "WIDTH x HEIGHT"},
    {"--morph-max-kernel", "TRAIN", "MORPH_MAX_KERNEL", ""},
    {"--morph-iterations", "TRAIN", "MORPH_ITERATIONS", ""},
    {"--sample-prob", "TRAIN", "SAMPLE_PROB", ""},
    {"--alpha", "TRAIN", "ALPHA", ""},
    {"--iterations", "TRAIN", "TOTAL_ITERATIONS", ""},
    {"--sam-rho", "TRAIN", "SAM_RHO", ""},
    {"--seed", "TRAIN", "SEED", ""},
    {"--optimizer", "TRAIN", "OPTIMIZER", "sgd or adamw"},
    {"--validation-interval", "TRAIN", "VALIDATION_INTERVAL", "0: automatic"},
    {"--rotation-degrees", "TRAIN", "ROTATION_DEGREES", ""},
    {"--token-dim", "TRAIN", "TOKEN_DIM", ""},
    {"--blocks", "TRAIN", "BLOCKS", ""},
    {"--heads", "TRAIN", "HEADS", ""},
};

struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;  // SECTION.KEY=VALUE
  std::map<std::string, std::string> flags;
  std::vector<std::pair<const KeyFlag*, std::string*>> bound;
};

template <std::size_t N>
void add_key_flags(CLI::App* app, ConfigArgs& args, const KeyFlag (&table)[N], const std::string& group) {
  for (const auto& f : table) {
    auto* slot = &args.flags[f.flag];
    args.bound.emplace_back(&f, slot);
    app->add_option(f.flag, *slot, std::string(f.help).empty() ? std::string("[") + f.section + "] " + f.key
                                                                 : std::string(f.help))
        ->group(group);
  }
}

void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("-c,--config", args.path, "INI configuration (default: $FPTHD_CONFIG)");
  app->add_option("--set", args.sets, "override any config key, SECTION.KEY=VALUE")->take_all();
}

// Exits with kExitConfig on failure.
PipelineConfig resolve_config(const ConfigArgs& args) {
  std::string text;
  std::string path = args.path;
  if (path.empty())
    if (const char* env = std::getenv("FPTHD_CONFIG")) path = env;
  if (!path.empty()) text = read_file(path) + "\n";
  for (const auto& [flag, value] : args.bound)
    if (!value->empty()) text += std::string("[") + flag->section + "]\n" + flag->key + " = " + *value + "\n";
  for (const auto& s : args.sets) {
    const auto dot = s.find('.');
    const auto eq = s.find('=');
    if (dot == std::string::npos || eq == std::string::npos || dot > eq)
      throw Error("--set expects SECTION.KEY=VALUE, got '" + s + "'");
    text += "[" + s.substr(0, dot) + "]\n" + s.substr(dot + 1) + "\n";
  }
  auto res = parse_config(text);
  for (const auto& w : res.warnings) log_warn("config: " + w);
  return res.config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Page transcription: layout analysis, line cropping, OCR and PAGE/Markdown/TXT output"};
  app.require_subcommand(1);
  bool quiet = false, verbose = false;
  app.add_flag("-q,--quiet", quiet, "only print errors");
  app.add_flag("-v,--verbose", verbose, "print debug messages");

  ConfigArgs cfg_args;
  TranscribeOptions topt;
  bool no_keep_crops = false;

  auto add_page_command = [&](const char* name, const char* help, bool needs_ocr, bool needs_layout) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->add_option("inputs", topt.inputs, "page images or directories")->required()->check(CLI::ExistingPath);
    cmd->add_option("-o,--out", topt.out_dir, "output directory")->required();
    if (needs_layout) cmd->add_option("--layout-model", topt.layout_checkpoint, "layout network checkpoint");
    if (needs_ocr) cmd->add_option("--ocr-model", topt.ocr_checkpoint, "recognizer checkpoint");
    cmd->add_option("--page-xml-dir", topt.page_xml_dir, "PAGE XML used when layout analysis is skipped");
    cmd->add_option("--crop-dir", topt.crop_dir, "line crop directory (default: OUT/crops)");
    cmd->add_option("-j,--jobs", topt.jobs, "pages processed in parallel (default: all cores)");
    if (needs_ocr) cmd->add_flag("--no-keep-crops", no_keep_crops, "do not write line crops");
    add_config_options(cmd, cfg_args);
    add_key_flags(cmd, cfg_args, kPipelineFlags, "Config overrides");
    return cmd;
  };
  auto* transcribe = add_page_command("transcribe", "full pipeline: PAGE XML, Markdown and TXT per page", true, true);
  auto* layout = add_page_command("layout", "layout analysis only: PAGE XML per page", false, true);
  auto* crop = add_page_command("crop", "line crops from existing PAGE XML", false, false);

  TrainCommandOptions train_opt;
  auto* train = app.add_subcommand("train", "train a line recognizer");
  train->add_option("--train", train_opt.train_manifest, "TSV manifest or directory of .png/.txt pairs")->required();
  train->add_option("--val", train_opt.val_manifest, "validation manifest");
  train->add_option("-o,--out", train_opt.checkpoint, "checkpoint to write")->required();
  train->add_option("--log", train_opt.log_csv, "metrics CSV (default: OUT.csv)");
  train->add_option("--state", train_opt.state, "resume state (default: OUT.state)");
  train->add_flag("--resume", train_opt.resume, "continue from the state file");
  add_config_options(train, cfg_args);
  add_key_flags(train, cfg_args, kTrainFlags, "Config overrides");

  EvaluateOptions eval_opt;
  auto* evaluate = app.add_subcommand("evaluate", "CER/WER of hypothesis .txt files against references");
  evaluate->add_option("hyp", eval_opt.hyp_dir, "hypothesis directory")->required();
  evaluate->add_option("ref", eval_opt.ref_dir, "reference directory")->required();
  evaluate->add_option("--csv", eval_opt.csv, "write per-page scores");

  TrainLayoutOptions tl_opt;
  auto* train_layout = app.add_subcommand("train-layout", "train the layout network on images with PAGE XML");
  train_layout->add_option("data", tl_opt.data_dir, "directory of page images and sibling .xml files")->required();
  train_layout->add_option("-o,--out", tl_opt.checkpoint, "checkpoint to write")->required();
  train_layout->add_option("--iterations", tl_opt.config.iterations);
  train_layout->add_option("--lr", tl_opt.config.lr);
  train_layout->add_option("--seed", tl_opt.config.seed);
  train_layout->add_option("--downsample", tl_opt.downsample)->check(CLI::Range(1, 64));

  SynthOptions synth_opt;
  auto* synth = app.add_subcommand("synth", "render a synthetic line corpus and test pages");
  synth->add_option("-o,--out", synth_opt.out_dir, "output directory")->required();
  synth->add_option("--train-lines", synth_opt.train_lines);
  synth->add_option("--val-lines", synth_opt.val_lines);
  synth->add_option("--pages", synth_opt.pages);
  synth->add_option("--seed", synth_opt.seed);

  CLI11_PARSE(app, argc, argv);
  if (quiet) set_log_level(LogLevel::error);
  if (verbose) set_log_level(LogLevel::debug);

  const bool page_cmd = transcribe->parsed() || layout->parsed() || crop->parsed();
  if (page_cmd || train->parsed()) {
    PipelineConfig cfg;
    try {
      cfg = resolve_config(cfg_args);
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitConfig;
    }
    if (page_cmd) {
      topt.config = cfg;
      topt.keep_crops = !no_keep_crops;
      if (transcribe->parsed()) return cmd_transcribe(topt, std::cerr);
      if (layout->parsed()) return cmd_layout(topt, std::cerr);
      return cmd_crop(topt, std::cerr);
    }
    train_opt.config = cfg.train;
    return cmd_train(train_opt, std::cout, std::cerr);
  }
  if (evaluate->parsed()) return cmd_evaluate(eval_opt, std::cout, std::cerr);
  if (train_layout->parsed()) return cmd_train_layout(tl_opt, std::cout, std::cerr);
  if (synth->parsed()) return cmd_synth(synth_opt, std::cout, std::cerr);
  return kExitConfig;
}
