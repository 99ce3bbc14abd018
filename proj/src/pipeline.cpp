#include "fpthd/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <ostream>
#include <set>
#include <thread>

#include "fpthd/metrics.hpp"
#include "fpthd/synth.hpp"
#include "fpthd/unicode.hpp"

namespace fs = std::filesystem;

namespace fpthd {

namespace {

std::string strip_newlines(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

std::string checked_text(const std::string& raw, const std::string& where) {
  if (!unicode::is_valid_utf8(raw)) throw Error(where + ": text is not valid UTF-8");
  return unicode::nfc(raw);
}

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Rounds coordinates to the integer grid PAGE XML stores, so a layout read
/// back from XML crops exactly like the one it was written from.
void quantize_layout(PageLayout& layout) {
  for (auto& r : layout.regions) {
    for (auto& p : r.polygon) p = {std::round(p.x), std::round(p.y)};
    std::vector<TextLineGeom> kept;
    for (auto& l : r.lines) {
      for (auto& p : l.polygon) p = {std::round(p.x), std::round(p.y)};
      std::vector<Point> pts;
      for (const auto& p : l.baseline.points) {
        const Point q{std::round(p.x), std::round(p.y)};
        if (pts.empty() || q.x > pts.back().x) pts.push_back(q);
      }
      l.baseline.points = std::move(pts);
      if (l.baseline.points.size() >= 2) kept.push_back(std::move(l));
    }
    r.lines = std::move(kept);
  }
}

struct Counter {
  std::mutex mu;
  std::ostream& err;
  int failures = 0;
  void fail(const std::string& what) {
    std::lock_guard lock(mu);
    ++failures;
    err << "error: " << what << "\n";
  }
};

template <class Fn>
void run_pool(std::size_t n, int jobs, Fn&& fn) {
  const int workers = std::max(1, std::min<int>(jobs > 0 ? jobs : static_cast<int>(std::thread::hardware_concurrency()),
                                                static_cast<int>(n)));
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) fn(i);
  };
  if (workers == 1) {
    work();
    return;
  }
  std::vector<std::thread> pool;
  for (int i = 0; i < workers; ++i) pool.emplace_back(work);
  for (auto& t : pool) t.join();
}

enum class Mode { transcribe, layout, crop };

int process_pages(const TranscribeOptions& o, Mode mode, std::ostream& err) {
  PipelineConfig cfg = o.config;
  if (mode == Mode::layout) {
    cfg.flags = {true, false, false, cfg.flags.run_decoder};
  } else if (mode == Mode::crop) {
    cfg.flags = {false, true, false, cfg.flags.run_decoder};
  }
  std::optional<LayoutNet<float>> layout_net;
  std::optional<OcrModel<float>> ocr;
  std::vector<fs::path> images;
  try {
    cfg.validate();
    if (o.out_dir.empty()) throw Error("no output directory given");
    if (cfg.flags.run_ocr && !cfg.flags.run_cropper && o.crop_dir.empty() && !fs::is_directory(o.out_dir / "crops"))
      throw Error("OCR without the line cropper needs an existing crop directory");
    images = collect_images(o.inputs);
    if (images.empty()) throw Error("no input images found");
    if (cfg.flags.run_layout) {
      if (o.layout_checkpoint.empty()) throw Error("layout analysis needs a layout checkpoint (--layout-model)");
      layout_net = load_layout_checkpoint(o.layout_checkpoint);
      if (layout_net->config().downsample != cfg.downsample)
        log_warn("layout checkpoint was trained with DOWNSAMPLE " + std::to_string(layout_net->config().downsample) +
                 "; using it instead of " + std::to_string(cfg.downsample));
    }
    if (cfg.flags.run_ocr) {
      const fs::path p = !o.ocr_checkpoint.empty() ? o.ocr_checkpoint : fs::path(cfg.ocr_model_path);
      if (p.empty()) throw Error("OCR needs a recognizer checkpoint (--ocr-model)");
      ocr = load_ocr_checkpoint(p);
    }
    fs::create_directories(o.out_dir);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  const fs::path crop_dir = o.crop_dir.empty() ? o.out_dir / "crops" : o.crop_dir;
  const bool save_crops = cfg.flags.run_cropper && (o.keep_crops || mode == Mode::crop);
  if (save_crops) fs::create_directories(crop_dir);

  Counter counter{{}, err};
  run_pool(images.size(), o.jobs, [&](std::size_t i) {
    const fs::path& path = images[i];
    try {
      const std::string page_id = sanitize_page_id(path.stem().string());
      const Raster image = load_image(path);
      std::optional<PageLayout> given;
      if (!cfg.flags.run_layout) {
        const fs::path dir = o.page_xml_dir.empty() ? o.out_dir : o.page_xml_dir;
        fs::path xml = dir / (path.stem().string() + ".xml");
        if (!fs::exists(xml)) xml = dir / (page_id + ".xml");
        auto parsed = parse_page_xml(read_file(xml));
        for (const auto& w : parsed.warnings) log_warn(xml.string() + ": " + w);
        given = std::move(parsed.page.layout);
        given->page_id = page_id;
      }
      TranscribedPage page;
      std::vector<LineCrop> crops;
      if (cfg.flags.run_cropper || !cfg.flags.run_ocr) {
        page = transcribe_page(image, page_id, cfg, layout_net ? &*layout_net : nullptr, ocr ? &*ocr : nullptr,
                               given ? &*given : nullptr, &crops);
      } else {
        // OCR over crops written by an earlier run.
        page.layout = *given;
        for (std::size_t r = 0; r < page.layout.regions.size(); ++r)
          for (std::size_t l = 0; l < page.layout.regions[r].lines.size(); ++l) {
            const auto ref = make_line_ref(page_id, static_cast<int>(r + 1), static_cast<int>(l + 1));
            const auto& id = page.layout.regions[r].lines[l].id;
            const auto rec = recognize_line(*ocr, load_image(crop_dir / ref.file_name));
            page.texts[id] = rec.text;
            page.confidences[id] = rec.confidence;
          }
      }
      page.image_filename = path.filename().string();
      if (save_crops)
        for (const auto& c : crops) save_png(crop_dir / c.ref.file_name, c.image);
      if (mode != Mode::crop) write_file_atomic(o.out_dir / (page_id + ".xml"), emit_page_xml(page));
      if (mode == Mode::transcribe) {
        write_file_atomic(o.out_dir / (page_id + ".md"), emit_markdown(page));
        write_file_atomic(o.out_dir / (page_id + ".txt"), emit_txt(page));
      }
      log_info(path.filename().string() + ": " + std::to_string(page.layout.line_count()) + " lines");
    } catch (const std::exception& e) {
      counter.fail(path.string() + ": " + e.what());
    }
  });
  if (counter.failures > 0) {
    err << counter.failures << " of " << images.size() << " pages failed\n";
    return kExitPartial;
  }
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------- data

DatasetManifest load_manifest(const fs::path& source) {
  DatasetManifest m;
  if (fs::is_directory(source)) {
    std::vector<fs::path> pngs;
    for (const auto& e : fs::recursive_directory_iterator(source))
      if (e.is_regular_file() && e.path().extension() == ".png") pngs.push_back(e.path());
    std::sort(pngs.begin(), pngs.end());
    for (const auto& p : pngs) {
      fs::path txt = p;
      txt.replace_extension(".txt");
      if (!fs::exists(txt)) throw Error("'" + p.string() + "' has no matching .txt file");
      m.entries.push_back({fs::weakly_canonical(p), checked_text(strip_newlines(read_file(txt)), txt.string())});
    }
  } else if (fs::is_regular_file(source)) {
    const std::string content = read_file(source);
    const fs::path base = source.parent_path();
    std::size_t pos = 0;
    int row = 0;
    while (pos < content.size()) {
      auto nl = content.find('\n', pos);
      if (nl == std::string::npos) nl = content.size();
      std::string line = content.substr(pos, nl - pos);
      pos = nl + 1;
      ++row;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      const std::string where = source.string() + " row " + std::to_string(row);
      if (tab == std::string::npos) throw Error(where + ": expected path<TAB>text");
      const fs::path img = base / line.substr(0, tab);
      if (!fs::is_regular_file(img)) throw Error(where + ": missing image '" + img.string() + "'");
      m.entries.push_back({fs::weakly_canonical(img), checked_text(line.substr(tab + 1), where)});
    }
    std::stable_sort(m.entries.begin(), m.entries.end(),
                     [](const DatasetEntry& a, const DatasetEntry& b) { return a.image < b.image; });
  } else {
    throw Error("manifest '" + source.string() + "' does not exist");
  }
  std::vector<std::string> texts;
  for (const auto& e : m.entries) texts.push_back(e.text);
  m.charset = Charset::from_texts(texts);
  return m;
}

std::vector<LineSample> load_samples(const DatasetManifest& manifest) {
  std::vector<LineSample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back({e.image.string(), load_image(e.image), e.text});
  return out;
}

std::vector<fs::path> collect_images(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file() && is_image_file(e.path())) found.push_back(e.path());
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(in);
    }
  }
  return out;
}

// ---------------------------------------------------------------- pipeline

RecognizedLine recognize_line(const OcrModel<float>& model, const Raster& line) {
  Rng rng(0);
  const auto out = forward_logits(line, model, false, rng);
  RecognizedLine r;
  r.text = model.charset().decode(ctc::greedy_decode(out.logprobs, out.valid_tokens));
  double sum = 0.0;
  for (int t = 0; t < out.valid_tokens; ++t) sum += out.logprobs.row(t).maxCoeff();
  r.confidence = out.valid_tokens > 0 ? std::exp(sum / out.valid_tokens) : 0.0;
  return r;
}

std::vector<LineCrop> crop_lines(const Raster& image, const PageLayout& layout, const CropperConfig& cfg) {
  std::vector<LineCrop> out;
  if (layout.line_count() == 0) return out;
  const float background = median_border(image);
  for (std::size_t r = 0; r < layout.regions.size(); ++r)
    for (std::size_t l = 0; l < layout.regions[r].lines.size(); ++l) {
      const auto& line = layout.regions[r].lines[l];
      LineCrop c;
      c.ref = make_line_ref(layout.page_id, static_cast<int>(r + 1), static_cast<int>(l + 1));
      c.line_id = line.id;
      c.image = rectify_and_crop(image, line, cfg.line_height, cfg.line_scale, cfg.interp, background).image;
      out.push_back(std::move(c));
    }
  return out;
}

TranscribedPage transcribe_page(const Raster& image, const std::string& page_id, const PipelineConfig& cfg,
                                const LayoutNet<float>* layout_net, const OcrModel<float>* ocr,
                                const PageLayout* given_layout, std::vector<LineCrop>* crops) {
  if (image.empty()) throw Error("empty page image");
  TranscribedPage page;
  if (given_layout != nullptr) {
    page.layout = *given_layout;
  } else {
    if (layout_net == nullptr) throw Error("layout analysis requested without a layout model");
    const auto maps = predict_maps(image, *layout_net, cfg.decoder.max_megapixels);
    page.layout = decode_baselines(maps, cfg.decoder);
    quantize_layout(page.layout);
  }
  page.layout.page_id = page_id;
  page.layout.width = image.width;
  page.layout.height = image.height;
  if (!cfg.flags.run_cropper) return page;
  auto lines = crop_lines(image, page.layout, cfg.cropper);
  if (cfg.flags.run_ocr) {
    if (ocr == nullptr) throw Error("OCR requested without a recognizer");
    for (const auto& c : lines) {
      const auto rec = recognize_line(*ocr, c.image);
      page.texts[c.line_id] = rec.text;
      page.confidences[c.line_id] = rec.confidence;
    }
  }
  if (crops) *crops = std::move(lines);
  return page;
}

// ---------------------------------------------------------------- commands

int cmd_transcribe(const TranscribeOptions& options, std::ostream& err) {
  return process_pages(options, Mode::transcribe, err);
}

int cmd_layout(TranscribeOptions options, std::ostream& err) { return process_pages(options, Mode::layout, err); }

int cmd_crop(TranscribeOptions options, std::ostream& err) { return process_pages(options, Mode::crop, err); }

int cmd_train(const TrainCommandOptions& o, std::ostream& out, std::ostream& err) {
  DatasetManifest train, val;
  try {
    o.config.validate();
    if (o.checkpoint.empty()) throw Error("no output checkpoint given");
    train = load_manifest(o.train_manifest);
    if (train.entries.empty()) throw Error("training manifest is empty");
    if (!o.val_manifest.empty()) val = load_manifest(o.val_manifest);
    std::string offenders;
    for (const auto& e : val.entries) {
      const auto miss = train.charset.missing(e.text);
      if (!miss.empty()) offenders += "  " + e.image.string() + ": " + unicode::encode_utf8(miss) + "\n";
    }
    if (!offenders.empty())
      throw Error("validation characters absent from the training charset:\n" + offenders);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  try {
    const auto train_samples = load_samples(train);
    const auto val_samples = load_samples(val);
    OcrModel<float> model(o.config.model_config(), train.charset, o.config.seed);
    TrainOptions topt;
    topt.checkpoint_path = o.checkpoint;
    topt.log_path = o.log_csv.empty() ? fs::path(o.checkpoint.string() + ".csv") : o.log_csv;
    topt.state_path = o.state.empty() ? fs::path(o.checkpoint.string() + ".state") : o.state;
    topt.resume = o.resume;
    const auto res = train_loop(model, train_samples, val_samples, o.config, topt);
    out << "iterations: " << res.iterations_run << "\n";
    if (!res.log.empty()) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "best validation CER: %.4f\n", res.best_cer);
      out << buf;
    }
    out << "checkpoint: " << o.checkpoint.string() << "\nlog: " << topt.log_path.string() << "\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitPartial;
  }
  return kExitOk;
}

int cmd_evaluate(const EvaluateOptions& o, std::ostream& out, std::ostream& err) {
  auto stems = [](const fs::path& dir) {
    std::set<std::string> s;
    if (!fs::is_directory(dir)) throw Error("'" + dir.string() + "' is not a directory");
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".txt") s.insert(e.path().stem().string());
    return s;
  };
  try {
    const auto hyp = stems(o.hyp_dir);
    const auto ref = stems(o.ref_dir);
    std::string missing;
    for (const auto& s : ref)
      if (!hyp.contains(s)) missing += "  " + s + " (no hypothesis)\n";
    for (const auto& s : hyp)
      if (!ref.contains(s)) missing += "  " + s + " (no reference)\n";
    if (!missing.empty()) {
      err << "error: unmatched files:\n" << missing;
      return kExitPartial;
    }
    std::vector<metrics::PagePair> pairs;
    for (const auto& s : ref)
      pairs.push_back({s, read_file(o.ref_dir / (s + ".txt")), read_file(o.hyp_dir / (s + ".txt"))});
    const auto report = metrics::evaluate_pages(pairs);
    out << metrics::report_summary(report);
    if (!o.csv.empty()) write_file_atomic(o.csv, metrics::report_csv(report));
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

int cmd_train_layout(const TrainLayoutOptions& o, std::ostream& out, std::ostream& err) {
  try {
    std::vector<LayoutSample> corpus;
    for (const auto& img : collect_images({o.data_dir})) {
      fs::path xml = img;
      xml.replace_extension(".xml");
      if (!fs::exists(xml)) continue;
      LayoutSample s;
      s.image = load_image(img);
      const auto parsed = parse_page_xml(read_file(xml));
      s.target = rasterize_targets(parsed.page.layout, s.image.width, s.image.height, o.downsample);
      corpus.push_back(std::move(s));
    }
    if (corpus.empty()) throw Error("no image/PAGE XML pairs in '" + o.data_dir.string() + "'");
    LayoutNetConfig ncfg;
    ncfg.downsample = o.downsample;
    LayoutNet<float> net(ncfg, o.config.seed);
    const auto res = train_layout_net(net, corpus, o.config);
    save_layout_checkpoint(o.checkpoint, net);
    if (!res.losses.empty()) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "pages: %zu\nloss: %.4f -> %.4f\n", corpus.size(), res.losses.front(),
                    res.losses.back());
      out << buf;
    }
    out << "checkpoint: " << o.checkpoint.string() << "\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

int cmd_synth(const SynthOptions& o, std::ostream& out, std::ostream& err) {
  try {
    const synth::Style style;
    auto write_lines = [&](const std::string& split, int count, std::uint64_t seed) {
      const fs::path dir = o.out_dir / "lines" / split;
      fs::create_directories(dir);
      std::string tsv;
      for (const auto& s : synth::make_line_corpus(count, seed, style, 50, "")) {
        save_png(dir / (s.id + ".png"), s.image);
        write_file_atomic(dir / (s.id + ".txt"), s.text + "\n");
        tsv += split + "/" + s.id + ".png\t" + s.text + "\n";
      }
      write_file_atomic(o.out_dir / "lines" / (split + ".tsv"), tsv);
    };
    write_lines("train", o.train_lines, derive_seed(o.seed, 1));
    write_lines("val", o.val_lines, derive_seed(o.seed, 2));
    const fs::path pages = o.out_dir / "pages";
    fs::create_directories(pages);
    for (int i = 0; i < o.pages; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "page-%03d", i + 1);
      Rng rng(derive_seed(o.seed, 3, static_cast<std::uint64_t>(i)));
      const auto page = synth::render_page(name, rng, style, {});
      save_png(pages / (std::string(name) + ".png"), page.image);
      write_file_atomic(pages / (std::string(name) + ".xml"), emit_page_xml(page.truth));
      write_file_atomic(pages / (std::string(name) + ".txt"), page.text);
    }
    out << "wrote " << o.train_lines << " train lines, " << o.val_lines << " validation lines and " << o.pages
        << " pages to " << o.out_dir.string() << "\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}

}  // namespace fpthd
