#include "dva/commands.hpp"

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <fmt/format.h>

#include "dva/eval_bench.hpp"
#include "dva/service.hpp"

namespace dva {

namespace fs = std::filesystem;

namespace {

void require_file(const std::string& path, std::string_view what) {
  if (path.empty()) throw InputError(fmt::format("paths.{} is not set", what));
  if (!fs::exists(path)) throw InputError(fmt::format("{} not found: {}", what, path));
}

CorpusFormat corpus_format(const AppConfig& c) { return parse_corpus_format(c.paths.corpus_format); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError(fmt::format("cannot write {}", path.string()));
  f << text;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open {}", path));
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    line = normalize_whitespace(line);
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

template <class F>
int report_errors(std::ostream& err, F&& f) {
  try {
    return f();
  } catch (const TrainingError& e) {
    err << "error: training diverged: " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
  }
  return 1;
}

}  // namespace

Pipeline Runtime::pipeline() const {
  Pipeline p;
  p.model = &model;
  p.vocab = &vocab;
  if (index && !documents.empty()) {
    p.index = &*index;
    p.documents = &documents;
    p.sampler = sampler;
    p.sampler_config = sampler_config;
  }
  return p;
}

Pipeline Runtime::token_only() const {
  Pipeline p;
  p.model = &model;
  p.vocab = &vocab;
  return p;
}

std::unique_ptr<Runtime> load_runtime(const AppConfig& config) {
  auto owned = std::make_unique<Runtime>();
  Runtime& rt = *owned;
  require_file(config.paths.vocab, "vocab");
  require_file(config.paths.checkpoint, "checkpoint");
  rt.vocab = StaticVocab::load(config.paths.vocab);
  rt.model = DvaModel::load(config.paths.checkpoint, rt.vocab.fingerprint());
  rt.sampler_config = config.sampler;
  rt.sampler = SamplerRegistry::global().create(to_string(config.sampler.strategy), rt.vocab);
  if (!config.paths.index.empty()) {
    require_file(config.paths.index, "index");
    require_file(config.paths.corpus, "corpus");
    rt.index = RetrievalIndex::load(config.paths.index);
    if (rt.index->embedder_fingerprint() != rt.model.fingerprint())
      throw InputError(fmt::format("index {} was built for a different checkpoint", config.paths.index));
    rt.documents = load_corpus(config.paths.corpus, corpus_format(config));
  }
  return owned;
}

int cmd_train(const AppConfig& config, std::ostream& out, std::ostream& err) {
  return report_errors(err, [&] {
    config.validate();
    require_file(config.paths.corpus, "corpus");
    if (config.paths.checkpoint.empty()) throw InputError("paths.checkpoint is not set");
    const DocumentSet corpus = load_corpus(config.paths.corpus, corpus_format(config));
    if (corpus.empty()) throw InputError(fmt::format("corpus {} has no documents", config.paths.corpus));
    const std::string log_path =
        config.paths.train_log.empty() ? config.paths.checkpoint + ".train.jsonl" : config.paths.train_log;
    for (const auto& p : {config.paths.vocab, config.paths.checkpoint, config.paths.index, log_path}) {
      if (!p.empty() && fs::path(p).has_parent_path()) fs::create_directories(fs::path(p).parent_path());
    }

    StaticVocab vocab;
    if (!config.paths.vocab.empty() && fs::exists(config.paths.vocab)) {
      vocab = StaticVocab::load(config.paths.vocab);
    } else {
      vocab = train_static_vocab(corpus, config.model.vocab_size ? config.model.vocab_size : 4096);
      if (!config.paths.vocab.empty()) vocab.save(config.paths.vocab);
    }

    ModelConfig mc = config.model;
    mc.vocab_size = vocab.size();
    DvaModel model(mc, vocab.fingerprint(), config.train.seed);

    std::ofstream log(log_path);
    if (!log) throw InputError(fmt::format("cannot write {}", log_path));
    const auto steps = train(model, corpus, vocab, config.train, &log);
    model.save(config.paths.checkpoint);
    out << fmt::format("trained {} steps ({}), final loss {:.4f}\ncheckpoint: {}\nlog: {}\n", steps.size(),
                       to_string(config.train.mode), steps.empty() ? 0.0 : steps.back().loss,
                       config.paths.checkpoint, log_path);

    if (!config.paths.index.empty()) {
      // Built from the saved weights, which is what inference loads.
      const DvaModel saved = DvaModel::load(config.paths.checkpoint, vocab.fingerprint());
      RetrievalIndex::build(corpus, saved, vocab).save(config.paths.index);
      out << fmt::format("index: {} ({} documents)\n", config.paths.index, corpus.size());
    }
    return 0;
  });
}

int cmd_eval(const AppConfig& config, bool benchmark, std::ostream& out, std::ostream& err) {
  return report_errors(err, [&] {
    config.validate();
    require_file(config.paths.test, "test");
    const auto runtime = load_runtime(config);
    const Runtime& rt = *runtime;
    std::vector<std::string> texts = read_lines(config.paths.test);
    if (config.eval.max_texts > 0 && texts.size() > static_cast<std::size_t>(config.eval.max_texts))
      texts.resize(static_cast<std::size_t>(config.eval.max_texts));

    const MetricsReport report = evaluate(rt.pipeline(), texts, config.generation, {config.eval.prefix_words});
    nlohmann::json result = {{"metrics", report.to_json()}};
    std::string tables = report.to_table();

    std::vector<ThroughputRow> rows;
    std::vector<StageRow> stages;
    if (benchmark) {
      std::vector<std::string> prefixes;
      for (const auto& t : texts) {
        const auto words = split_words(t);
        const std::size_t n = std::min(words.size(), static_cast<std::size_t>(config.eval.prefix_words));
        prefixes.push_back(join_words(std::vector<std::string>(words.begin(), words.begin() + n)));
      }
      const BenchmarkOptions opts{config.eval.batch_sizes, config.eval.forced_length, config.eval.repetitions};
      rows = benchmark_throughput(rt.pipeline(), prefixes, config.generation, opts, "dva");
      const auto base = benchmark_throughput(rt.token_only(), prefixes, config.generation, opts, "token-only");
      rows.insert(rows.end(), base.begin(), base.end());
      stages = profile_inference(rt.pipeline(), prefixes, config.generation, opts);
      result["throughput"] = to_json(rows);
      result["stages"] = to_json(stages);
      tables += "\n" + throughput_table(rows) + "\n" + stage_table(stages);
    }

    out << result.dump(2) << "\n\n" << tables;
    if (!config.paths.output_dir.empty()) {
      const fs::path dir = config.paths.output_dir;
      fs::create_directories(dir);
      write_text(dir / "metrics.json", result.dump(2) + "\n");
      write_text(dir / "metrics.txt", tables);
      if (benchmark) {
        write_text(dir / "throughput.svg", throughput_svg(rows));
        write_text(dir / "stages.svg", stage_svg(stages));
      }
    }
    return 0;
  });
}

std::string render_marked(const GenerationSession& session, const StaticVocab& vocab) {
  std::string out;
  for (MixedId id : session.ids) {
    if (!out.empty()) out += ' ';
    const std::string& s = surface_of(id, session.table, vocab);
    out += is_token_id(id, vocab) ? s : "[[" + s + "]]";
  }
  return out;
}

int cmd_chat(const AppConfig& config, std::istream& in, std::ostream& out, std::ostream& err) {
  return report_errors(err, [&] {
    config.validate();
    const auto runtime = load_runtime(config);
    const Runtime& rt = *runtime;
    const Pipeline pipeline = rt.pipeline();
    std::optional<std::vector<std::string>> phrases;
    for (std::string line; std::getline(in, line);) {
      const std::string text = normalize_whitespace(line);
      if (text.empty()) continue;
      if (text == "/quit") return 0;
      if (text.starts_with("/phrases")) {
        std::vector<std::string> list;
        std::string rest = text.substr(8);
        for (std::size_t start = 0; start <= rest.size();) {
          const auto semi = std::min(rest.find(';', start), rest.size());
          const std::string p = normalize_whitespace(rest.substr(start, semi - start));
          if (!p.empty()) list.push_back(p);
          start = semi + 1;
        }
        if (list.empty()) {
          phrases.reset();
          out << "phrases cleared\n";
        } else {
          phrases = list;
          out << fmt::format("phrases set ({})\n", list.size());
        }
        continue;
      }
      try {
        const auto session = generate_single(text, phrases, pipeline, config.generation);
        out << text << " " << render_marked(session, rt.vocab) << "\n";
      } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
      }
      out.flush();
    }
    return 0;
  });
}

namespace {
HttpServer* g_server = nullptr;
extern "C" void stop_server(int) {
  if (g_server) g_server->stop();
}
}  // namespace

int cmd_serve(const AppConfig& config, std::ostream& out, std::ostream& err) {
  return report_errors(err, [&] {
    config.validate();
    const auto runtime = load_runtime(config);
    const Runtime& rt = *runtime;
    Service service(rt.pipeline(), config.generation, static_cast<std::size_t>(config.server.session_capacity));
    HttpServer server(service);
    const int port = server.bind(config.server.host, config.server.port);
    if (port < 0) throw InputError(fmt::format("cannot bind {}:{} (port in use?)", config.server.host, config.server.port));
    g_server = &server;
    std::signal(SIGINT, stop_server);
    std::signal(SIGTERM, stop_server);
    out << fmt::format("serving on http://{}:{}\n", config.server.host, port) << std::flush;
    server.serve();
    g_server = nullptr;
    return 0;
  });
}

}  // namespace dva
