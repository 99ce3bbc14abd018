#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "fpthd/pipeline.hpp"
#include "fpthd/synth.hpp"

using namespace fpthd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::vector<fs::path> listing(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

// Random small models and two synthetic pages.
struct Fixture {
  TempDir dir;
  fs::path layout_ckpt, ocr_ckpt, pages;
  explicit Fixture(const std::string& name) : dir(name) {
    LayoutNetConfig lc;
    lc.widths = {4, 4, 4, 4, 4};
    LayoutNet<float> net(lc, 3);
    // Bias the baseline logit up so random weights still produce lines.
    for (const auto& e : net.params().entries())
      if (e.name == "head.bias") net.params().values()[e.offset] = 1.0F;
    layout_ckpt = dir.path / "layout.ckpt";
    save_layout_checkpoint(layout_ckpt, net);
    TrainConfig tc;
    tc.token_dim = 16;
    tc.blocks = 1;
    tc.heads = 2;
    OcrModel<float> ocr(tc.model_config(), Charset(std::u32string(U" ") + U"acdeimnosñ"), 4);
    ocr_ckpt = dir.path / "ocr.ckpt";
    save_ocr_checkpoint(ocr_ckpt, ocr);
    pages = dir.path / "pages";
    fs::create_directories(pages);
    for (int i = 0; i < 2; ++i) {
      Rng rng(static_cast<std::uint64_t>(10 + i));
      const auto page = synth::render_page("pg" + std::to_string(i), rng, {}, {});
      save_png(pages / ("pg" + std::to_string(i) + ".png"), page.image);
    }
  }
  TranscribeOptions options(const fs::path& out) const {
    TranscribeOptions o;
    o.inputs = {pages};
    o.out_dir = out;
    o.layout_checkpoint = layout_ckpt;
    o.ocr_checkpoint = ocr_ckpt;
    o.jobs = 2;
    return o;
  }
};

}  // namespace

TEST(Manifest, TsvAndTreeAgree) {
  TempDir dir("fpthd_manifest");
  fs::create_directories(dir.path / "lines");
  const std::vector<std::string> texts = {"mano", "dñi", "n\xCC\x83o"};
  std::string tsv;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const std::string name = "l" + std::to_string(i);
    save_png(dir.path / "lines" / (name + ".png"), Raster(20, 10, 0.5F));
    write_file_atomic(dir.path / "lines" / (name + ".txt"), texts[i] + "\n");
    tsv += "lines/" + name + ".png\t" + texts[i] + "\n";
  }
  write_file_atomic(dir.path / "m.tsv", tsv);
  const auto a = load_manifest(dir.path / "m.tsv");
  const auto b = load_manifest(dir.path / "lines");
  ASSERT_EQ(a.entries.size(), 3u);
  EXPECT_EQ(a.entries, b.entries);
  EXPECT_EQ(a.charset, b.charset);
  EXPECT_EQ(a.charset.chars(), U"adimnoñ");
  EXPECT_EQ(a.entries[2].text, "ño");
}

TEST(Manifest, MissingFileNamesRow) {
  TempDir dir("fpthd_manifest_missing");
  save_png(dir.path / "a.png", Raster(4, 4, 0.5F));
  write_file_atomic(dir.path / "m.tsv", "a.png\tab\nmissing.png\tcd\n");
  try {
    load_manifest(dir.path / "m.tsv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos) << e.what();
  }
  write_file_atomic(dir.path / "bad.tsv", "a.png\t\xff\xfe\n");
  EXPECT_THROW(load_manifest(dir.path / "bad.tsv"), Error);
}

TEST(Transcribe, BlankPage) {
  Fixture fx("fpthd_blank");
  fs::create_directories(fx.dir.path / "blank");
  save_png(fx.dir.path / "blank" / "white.png", Raster(300, 200, 1.0F));
  LayoutNetConfig lc;
  lc.widths = {4, 4, 4, 4, 4};
  LayoutNet<float> net(lc, 3);
  std::fill(net.params().values().begin(), net.params().values().end(), 0.0F);
  for (const auto& e : net.params().entries())
    if (e.name == "head.bias")
      for (std::size_t k = 0; k < e.size; ++k) net.params().values()[e.offset + k] = -8.0F;
  save_layout_checkpoint(fx.layout_ckpt, net);
  auto o = fx.options(fx.dir.path / "out");
  o.inputs = {fx.dir.path / "blank"};
  std::ostringstream err;
  EXPECT_EQ(cmd_transcribe(o, err), kExitOk) << err.str();
  EXPECT_EQ(read_file(fx.dir.path / "out" / "white.txt"), "");
  EXPECT_EQ(read_file(fx.dir.path / "out" / "white.md"), "# white\n");
  EXPECT_NE(read_file(fx.dir.path / "out" / "white.xml").find("imageWidth=\"300\""), std::string::npos);
}

TEST(Transcribe, UnreadablePageIsIsolated) {
  Fixture fx("fpthd_faulty");
  write_file_atomic(fx.pages / "broken.png", "not a png");
  std::ostringstream err;
  const auto out = fx.dir.path / "out";
  EXPECT_EQ(cmd_transcribe(fx.options(out), err), kExitPartial);
  EXPECT_NE(err.str().find("broken.png"), std::string::npos);
  EXPECT_EQ(err.str().find("pg0.png"), std::string::npos);
  for (const char* name : {"pg0.xml", "pg0.md", "pg0.txt", "pg1.xml", "pg1.md", "pg1.txt"})
    EXPECT_TRUE(fs::exists(out / name)) << name;
  EXPECT_FALSE(fs::exists(out / "broken.xml"));
}

TEST(Transcribe, CorruptCheckpointIsGlobal) {
  Fixture fx("fpthd_corrupt");
  write_file_atomic(fx.ocr_ckpt, "FPTHD-O");
  std::ostringstream err;
  EXPECT_EQ(cmd_transcribe(fx.options(fx.dir.path / "out"), err), kExitConfig);
  EXPECT_FALSE(fs::exists(fx.dir.path / "out" / "pg0.xml"));
}

TEST(Transcribe, DeterministicAndComposable) {
  Fixture fx("fpthd_compose");
  std::ostringstream err;
  const auto full = fx.dir.path / "full";
  const auto again = fx.dir.path / "again";
  ASSERT_EQ(cmd_transcribe(fx.options(full), err), kExitOk) << err.str();
  auto single = fx.options(again);
  single.jobs = 1;
  ASSERT_EQ(cmd_transcribe(single, err), kExitOk);
  ASSERT_EQ(listing(full), listing(again));
  for (const auto& f : listing(full)) EXPECT_EQ(read_file(full / f), read_file(again / f)) << f;
  EXPECT_GT(read_file(full / "pg0.xml").find("TextLine"), 0u);

  // Layout from the XML written by the full run.
  auto skip = fx.options(fx.dir.path / "skip");
  skip.config.flags.run_layout = false;
  skip.page_xml_dir = full;
  ASSERT_EQ(cmd_transcribe(skip, err), kExitOk) << err.str();
  for (const auto& f : listing(full)) EXPECT_EQ(read_file(full / f), read_file(fx.dir.path / "skip" / f)) << f;

  // OCR over crops written by the full run.
  auto ocr_only = fx.options(fx.dir.path / "ocr_only");
  ocr_only.config.flags = {false, false, true, false};
  ocr_only.page_xml_dir = full;
  ocr_only.crop_dir = full / "crops";
  ASSERT_EQ(cmd_transcribe(ocr_only, err), kExitOk) << err.str();
  for (const char* f : {"pg0.txt", "pg1.md"})
    EXPECT_EQ(read_file(full / f), read_file(fx.dir.path / "ocr_only" / f)) << f;
}

TEST(Transcribe, LayoutAndCropCommands) {
  Fixture fx("fpthd_stages");
  std::ostringstream err;
  const auto out = fx.dir.path / "out";
  ASSERT_EQ(cmd_layout(fx.options(out), err), kExitOk) << err.str();
  EXPECT_EQ(listing(out), (std::vector<fs::path>{"pg0.xml", "pg1.xml"}));
  auto crop = fx.options(out);
  crop.page_xml_dir = out;
  ASSERT_EQ(cmd_crop(crop, err), kExitOk) << err.str();
  const auto files = listing(out / "crops");
  ASSERT_FALSE(files.empty());
  for (const auto& f : files) {
    EXPECT_TRUE(parse_line_image_name(f.string()).has_value()) << f;
    EXPECT_EQ(load_image(out / "crops" / f).height, 50);
  }
}

TEST(Transcribe, NoKeepCrops) {
  Fixture fx("fpthd_nokeep");
  auto o = fx.options(fx.dir.path / "out");
  o.keep_crops = false;
  std::ostringstream err;
  ASSERT_EQ(cmd_transcribe(o, err), kExitOk);
  EXPECT_FALSE(fs::exists(fx.dir.path / "out" / "crops"));
}

TEST(Evaluate, Directories) {
  TempDir dir("fpthd_eval");
  fs::create_directories(dir.path / "ref");
  fs::create_directories(dir.path / "hyp");
  std::string ref(100, 'a'), hyp = ref;
  hyp[3] = 'b';
  hyp.erase(10, 1);
  write_file_atomic(dir.path / "ref" / "p.txt", ref);
  write_file_atomic(dir.path / "hyp" / "p.txt", hyp);
  std::ostringstream out, err;
  EvaluateOptions o{dir.path / "hyp", dir.path / "ref", dir.path / "r.csv"};
  ASSERT_EQ(cmd_evaluate(o, out, err), kExitOk) << err.str();
  EXPECT_NE(read_file(dir.path / "r.csv").find("TOTAL,0.020000,"), std::string::npos) << read_file(dir.path / "r.csv");

  EvaluateOptions same{dir.path / "ref", dir.path / "ref", {}};
  ASSERT_EQ(cmd_evaluate(same, out, err), kExitOk);
  EXPECT_NE(out.str().find("CER: 0.00%"), std::string::npos) << out.str();

  write_file_atomic(dir.path / "hyp" / "extra.txt", "x");
  write_file_atomic(dir.path / "ref" / "lonely.txt", "y");
  std::ostringstream err2;
  EXPECT_NE(cmd_evaluate(o, out, err2), kExitOk);
  EXPECT_NE(err2.str().find("extra"), std::string::npos);
  EXPECT_NE(err2.str().find("lonely"), std::string::npos);
}

TEST(TrainCommand, ValidationCharsetViolation) {
  TempDir dir("fpthd_train_cmd");
  save_png(dir.path / "a.png", Raster(60, 50, 0.9F));
  write_file_atomic(dir.path / "train.tsv", "a.png\tab\n");
  write_file_atomic(dir.path / "val.tsv", "a.png\tabz\n");
  TrainCommandOptions o;
  o.train_manifest = dir.path / "train.tsv";
  o.val_manifest = dir.path / "val.tsv";
  o.checkpoint = dir.path / "m.ckpt";
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train(o, out, err), kExitConfig);
  EXPECT_NE(err.str().find("z"), std::string::npos);
  EXPECT_NE(err.str().find("a.png"), std::string::npos);
}

TEST(TrainCommand, ZeroIterationsWritesInitialization) {
  TempDir dir("fpthd_train_zero_cmd");
  SynthOptions so;
  so.out_dir = dir.path;
  so.train_lines = 6;
  so.val_lines = 2;
  so.pages = 0;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_synth(so, out, err), kExitOk) << err.str();
  TrainCommandOptions o;
  o.train_manifest = dir.path / "lines" / "train.tsv";
  o.val_manifest = dir.path / "lines" / "val.tsv";
  o.checkpoint = dir.path / "m.ckpt";
  o.config.total_iterations = 0;
  o.config.token_dim = 16;
  o.config.blocks = 1;
  o.config.heads = 2;
  ASSERT_EQ(cmd_train(o, out, err), kExitOk) << err.str();
  const auto m = load_manifest(o.train_manifest);
  OcrModel<float> init(o.config.model_config(), m.charset, o.config.seed);
  EXPECT_EQ(read_file(o.checkpoint), serialize_ocr_checkpoint(init));
  EXPECT_EQ(read_file(dir.path / "m.ckpt.csv"), train_log_header());
}

TEST(TrainCommand, LogRowsPerValidation) {
  TempDir dir("fpthd_train_rows");
  SynthOptions so;
  so.out_dir = dir.path;
  so.train_lines = 8;
  so.val_lines = 2;
  so.pages = 0;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_synth(so, out, err), kExitOk);
  TrainCommandOptions o;
  o.train_manifest = dir.path / "lines" / "train.tsv";
  o.val_manifest = dir.path / "lines" / "val.tsv";
  o.checkpoint = dir.path / "m.ckpt";
  o.config.total_iterations = 6;
  o.config.validation_interval = 3;
  o.config.train_batch = 2;
  o.config.token_dim = 16;
  o.config.blocks = 1;
  o.config.heads = 2;
  ASSERT_EQ(cmd_train(o, out, err), kExitOk) << err.str();
  EXPECT_TRUE(fs::exists(o.checkpoint));
  const auto csv = read_file(dir.path / "m.ckpt.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}
