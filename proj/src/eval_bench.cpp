#include "dva/eval_bench.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include <fmt/format.h>

namespace dva {

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double safe_div(double a, double b) { return b > 0.0 ? a / b : 0.0; }

}  // namespace

double rep_n(std::span<const int> tokens, int n) {
  if (n < 1) throw std::invalid_argument("rep_n: n must be >= 1");
  if (tokens.size() < static_cast<std::size_t>(n)) return 0.0;
  std::set<std::vector<int>> unique;
  const std::size_t total = tokens.size() - static_cast<std::size_t>(n) + 1;
  for (std::size_t i = 0; i < total; ++i) unique.emplace(tokens.begin() + i, tokens.begin() + i + n);
  return 100.0 * (1.0 - static_cast<double>(unique.size()) / static_cast<double>(total));
}

double diversity_from_reps(double rep2, double rep3, double rep4) {
  return 100.0 * (1.0 - rep2 / 100.0) * (1.0 - rep3 / 100.0) * (1.0 - rep4 / 100.0);
}

double diversity(std::span<const int> tokens) {
  if (tokens.size() < 5) throw std::invalid_argument("diversity needs at least 5 tokens");
  return diversity_from_reps(rep_n(tokens, 2), rep_n(tokens, 3), rep_n(tokens, 4));
}

double perplexity_from_log_probs(std::span<const double> log_probs) {
  if (log_probs.empty()) throw std::invalid_argument("perplexity needs at least one target");
  double sum = 0.0;
  for (double lp : log_probs) sum += lp;
  return std::exp(-sum / static_cast<double>(log_probs.size()));
}

double perplexity(const DvaModel& model, const StaticVocab& vocab, std::span<const std::string> texts) {
  const std::size_t max_ids = static_cast<std::size_t>(model.config().max_seq_len);
  std::vector<double> log_probs;
  for (const auto& text : texts) {
    std::vector<TokenId> ids = encode_static(text, vocab);
    if (ids.size() + 1 > max_ids) ids.resize(max_ids - 1);
    std::vector<int> input{vocab.bos_id()};
    input.insert(input.end(), ids.begin(), ids.end());
    std::vector<int> target(ids.begin(), ids.end());
    target.push_back(vocab.eos_id());

    const Matrix hidden = backbone_hidden(model, model.input_embeddings(), input);
    const Matrix logits = hidden * model.output_embeddings().transpose();
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      const double mx = logits.row(t).maxCoeff();
      const double lse = mx + std::log((logits.row(t).array() - mx).exp().sum());
      log_probs.push_back(logits(t, target[static_cast<std::size_t>(t)]) - lse);
    }
  }
  return perplexity_from_log_probs(log_probs);
}

double nsl(std::size_t emitted_ids, std::size_t baseline_token_count) {
  if (baseline_token_count == 0) throw std::invalid_argument("nsl: empty baseline");
  return static_cast<double>(emitted_ids) / static_cast<double>(baseline_token_count);
}

double nsl(std::span<const MixedId> ids, const PhraseTable& table, const StaticVocab& vocab) {
  return nsl(ids.size(), encode_static(decode(ids, table, vocab), vocab).size());
}

double bytes_per_token(std::string_view text, std::size_t id_count) {
  if (id_count == 0) throw std::invalid_argument("bytes_per_token: no ids");
  return static_cast<double>(text.size()) / static_cast<double>(id_count);
}

RougeL rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = split_words(candidate);
  const auto r = split_words(reference);
  if (c.empty() || r.empty()) return {};
  std::vector<std::size_t> prev(r.size() + 1, 0), cur(r.size() + 1, 0);
  for (std::size_t i = 1; i <= c.size(); ++i) {
    for (std::size_t j = 1; j <= r.size(); ++j)
      cur[j] = c[i - 1] == r[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[r.size()]);
  RougeL out;
  out.precision = lcs / static_cast<double>(c.size());
  out.recall = lcs / static_cast<double>(r.size());
  out.f1 = lcs > 0 ? 2 * out.precision * out.recall / (out.precision + out.recall) : 0.0;
  return out;
}

nlohmann::json MetricsReport::to_json() const {
  return {{"mauve", nullptr},
          {"mauve_note", "not computed: needs an external scoring model"},
          {"rep_2", rep_2},
          {"rep_3", rep_3},
          {"rep_4", rep_4},
          {"diversity", diversity},
          {"ppl", ppl},
          {"nsl", nsl},
          {"bytes_per_token", bytes_per_token},
          {"rouge_l", {{"p", rouge_l_p}, {"r", rouge_l_r}, {"f", rouge_l_f}}},
          {"samples", samples}};
}

std::string MetricsReport::to_table() const {
  const std::vector<std::string> head{"MAUVE", "Rep-2", "Rep-3", "Rep-4", "Diversity", "PPL",
                                      "NSL",   "Bytes/Token", "ROUGE-L P", "ROUGE-L R", "ROUGE-L F"};
  const std::vector<std::string> vals{"n/a",
                                      fmt::format("{:.2f}", rep_2),
                                      fmt::format("{:.2f}", rep_3),
                                      fmt::format("{:.2f}", rep_4),
                                      fmt::format("{:.2f}", diversity),
                                      fmt::format("{:.2f}", ppl),
                                      fmt::format("{:.3f}", nsl),
                                      fmt::format("{:.2f}", bytes_per_token),
                                      fmt::format("{:.3f}", rouge_l_p),
                                      fmt::format("{:.3f}", rouge_l_r),
                                      fmt::format("{:.3f}", rouge_l_f)};
  std::string a, b;
  for (std::size_t i = 0; i < head.size(); ++i) {
    const std::size_t w = std::max(head[i].size(), vals[i].size());
    a += fmt::format("{:>{}}{}", head[i], w, i + 1 < head.size() ? "  " : "\n");
    b += fmt::format("{:>{}}{}", vals[i], w, i + 1 < head.size() ? "  " : "\n");
  }
  return a + b;
}

MetricsReport evaluate(const Pipeline& pipeline, std::span<const std::string> texts, const GenerationConfig& config,
                       const EvalOptions& options) {
  if (!pipeline.model || !pipeline.vocab) throw std::invalid_argument("evaluate: pipeline needs a model and vocab");
  if (options.prefix_words < 1) throw std::invalid_argument("evaluate: prefix_words must be >= 1");
  const StaticVocab& vocab = *pipeline.vocab;

  std::vector<std::string> prefixes, references;
  for (const auto& text : texts) {
    const auto words = split_words(text);
    if (words.size() <= static_cast<std::size_t>(options.prefix_words)) continue;
    const auto cut = words.begin() + options.prefix_words;
    prefixes.push_back(join_words(std::vector<std::string>(words.begin(), cut)));
    references.push_back(join_words(std::vector<std::string>(cut, words.end())));
  }
  if (prefixes.empty()) throw InputError("evaluate: no text is longer than the prefix");

  MetricsReport report;
  double reps[3] = {0, 0, 0};
  std::size_t ids_total = 0, static_total = 0, bytes_total = 0;
  constexpr std::size_t kChunk = 8;
  for (std::size_t at = 0; at < prefixes.size(); at += kChunk) {
    const std::size_t n = std::min(kChunk, prefixes.size() - at);
    const auto result = generate_batch(std::span(prefixes).subspan(at, n), pipeline, config);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = result.sessions[i];
      const std::string text = s.text(vocab);
      const auto tokens = encode_static(text, vocab);
      for (int k = 0; k < 3; ++k) reps[k] += rep_n(tokens, k + 2);
      ids_total += s.ids.size();
      static_total += tokens.size();
      bytes_total += text.size();
      const RougeL r = rouge_l(text, references[at + i]);
      report.rouge_l_p += r.precision;
      report.rouge_l_r += r.recall;
      report.rouge_l_f += r.f1;
    }
  }
  const double count = static_cast<double>(prefixes.size());
  report.samples = prefixes.size();
  report.rep_2 = reps[0] / count;
  report.rep_3 = reps[1] / count;
  report.rep_4 = reps[2] / count;
  report.diversity = diversity_from_reps(report.rep_2, report.rep_3, report.rep_4);
  report.rouge_l_p /= count;
  report.rouge_l_r /= count;
  report.rouge_l_f /= count;
  report.nsl = static_total ? nsl(ids_total, static_total) : 0.0;
  report.bytes_per_token = safe_div(static_cast<double>(bytes_total), static_cast<double>(ids_total));
  report.ppl = perplexity(*pipeline.model, vocab, texts);
  return report;
}

namespace {

struct Measurement {
  std::vector<double> retrieval, sampling, generation;
  std::size_t ids = 0;
  std::size_t bytes = 0;
};

std::map<int, Measurement> measure(const Pipeline& pipeline, std::span<const std::string> prefixes,
                                   const GenerationConfig& config, const BenchmarkOptions& options) {
  if (prefixes.empty()) throw std::invalid_argument("benchmark needs at least one prefix");
  if (options.forced_length < 1 || options.repetitions < 1)
    throw std::invalid_argument("benchmark: forced_length and repetitions must be >= 1");
  GenerationConfig cfg = config;
  cfg.min_new_ids = cfg.max_new_ids = options.forced_length;
  cfg.validate();

  std::map<int, Measurement> out;
  // Repetitions are interleaved across batch sizes so slow drift hits all equally.
  for (int rep = 0; rep < options.repetitions; ++rep) {
    for (int b : options.batch_sizes) {
      if (b < 1) throw std::invalid_argument("benchmark: batch sizes must be >= 1");
      std::vector<std::string> batch;
      for (int i = 0; i < b; ++i) batch.push_back(prefixes[static_cast<std::size_t>(i) % prefixes.size()]);
      const auto result = generate_batch(batch, pipeline, cfg);
      auto& m = out[b];
      m.retrieval.push_back(result.timings.retrieval);
      m.sampling.push_back(result.timings.sampling);
      m.generation.push_back(result.timings.generation);
      if (rep == 0) {
        for (const auto& s : result.sessions) {
          m.ids += s.ids.size();
          m.bytes += s.text(*pipeline.vocab).size();
        }
      }
    }
  }
  return out;
}

StageTimings medians(const Measurement& m) {
  return {median(m.retrieval), median(m.sampling), median(m.generation)};
}

}  // namespace

std::vector<ThroughputRow> benchmark_throughput(const Pipeline& pipeline, std::span<const std::string> prefixes,
                                                const GenerationConfig& config, const BenchmarkOptions& options,
                                                std::string_view variant) {
  std::vector<ThroughputRow> rows;
  for (const auto& [b, m] : measure(pipeline, prefixes, config, options)) {
    const StageTimings t = medians(m);
    ThroughputRow row;
    row.variant = std::string(variant);
    row.batch_size = b;
    row.seconds = t.generation;
    row.ids_per_second = safe_div(static_cast<double>(m.ids), t.generation);
    row.bytes_per_second = safe_div(static_cast<double>(m.bytes), t.generation);
    row.retrieval_fraction = safe_div(t.retrieval, t.total());
    row.sampling_fraction = safe_div(t.sampling, t.total());
    row.generation_fraction = safe_div(t.generation, t.total());
    rows.push_back(row);
  }
  return rows;
}

std::vector<StageRow> profile_inference(const Pipeline& pipeline, std::span<const std::string> prefixes,
                                        const GenerationConfig& config, const BenchmarkOptions& options) {
  std::vector<StageRow> rows;
  for (const auto& [b, m] : measure(pipeline, prefixes, config, options)) {
    StageRow row;
    row.batch_size = b;
    row.seconds = medians(m);
    const double total = row.seconds.total();
    row.retrieval_fraction = safe_div(row.seconds.retrieval, total);
    row.sampling_fraction = safe_div(row.seconds.sampling, total);
    row.generation_fraction = safe_div(row.seconds.generation, total);
    rows.push_back(row);
  }
  return rows;
}

nlohmann::json to_json(std::span<const ThroughputRow> rows) {
  auto out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"variant", r.variant},
                   {"batch_size", r.batch_size},
                   {"seconds", r.seconds},
                   {"ids_per_second", r.ids_per_second},
                   {"bytes_per_second", r.bytes_per_second},
                   {"retrieval_fraction", r.retrieval_fraction},
                   {"sampling_fraction", r.sampling_fraction},
                   {"generation_fraction", r.generation_fraction}});
  return out;
}

nlohmann::json to_json(std::span<const StageRow> rows) {
  auto out = nlohmann::json::array();
  for (const auto& r : rows)
    out.push_back({{"batch_size", r.batch_size},
                   {"retrieval_seconds", r.seconds.retrieval},
                   {"sampling_seconds", r.seconds.sampling},
                   {"generation_seconds", r.seconds.generation},
                   {"retrieval_fraction", r.retrieval_fraction},
                   {"sampling_fraction", r.sampling_fraction},
                   {"generation_fraction", r.generation_fraction}});
  return out;
}

std::string throughput_table(std::span<const ThroughputRow> rows) {
  std::string out = fmt::format("{:<12} {:>6} {:>10} {:>12} {:>12}\n", "variant", "batch", "seconds", "ids/sec",
                                "bytes/sec");
  for (const auto& r : rows)
    out += fmt::format("{:<12} {:>6} {:>10.4f} {:>12.1f} {:>12.1f}\n", r.variant, r.batch_size, r.seconds,
                       r.ids_per_second, r.bytes_per_second);
  return out;
}

std::string stage_table(std::span<const StageRow> rows) {
  std::string out = fmt::format("{:>6} {:>10} {:>10} {:>10}\n", "batch", "retrieval", "sampling", "generation");
  for (const auto& r : rows)
    out += fmt::format("{:>6} {:>10.3f} {:>10.3f} {:>10.3f}\n", r.batch_size, r.retrieval_fraction,
                       r.sampling_fraction, r.generation_fraction);
  return out;
}

namespace {

constexpr const char* kPalette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};

std::string svg_open(int w, int h) {
  return fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n",
      w, h);
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string throughput_svg(std::span<const ThroughputRow> rows) {
  std::vector<std::string> variants;
  std::vector<int> batches;
  for (const auto& r : rows) {
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
    if (std::find(batches.begin(), batches.end(), r.batch_size) == batches.end()) batches.push_back(r.batch_size);
  }
  std::sort(batches.begin(), batches.end());

  const int panel_w = 360, panel_h = 260, margin = 50;
  const int width = 2 * panel_w + 3 * margin, height = panel_h + 2 * margin + 20;
  std::string svg = svg_open(width, height);

  auto panel = [&](int x0, const char* title, auto value) {
    double top = 0.0;
    for (const auto& r : rows) top = std::max(top, value(r));
    if (top <= 0.0) top = 1.0;
    const int y0 = margin;
    svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x0 + panel_w / 2, y0 - 15, title);
    svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", x0, y0,
                       y0 + panel_h);
    svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", x0, y0 + panel_h,
                       x0 + panel_w);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.0f}</text>\n", x0 - 4, y0 + 4, top);
    const double group_w = static_cast<double>(panel_w) / std::max<std::size_t>(batches.size(), 1);
    const double bar_w = group_w * 0.8 / std::max<std::size_t>(variants.size(), 1);
    for (std::size_t g = 0; g < batches.size(); ++g) {
      const double gx = x0 + g * group_w + group_w * 0.1;
      svg += fmt::format("<text x=\"{:.1f}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", gx + group_w * 0.4,
                         y0 + panel_h + 15, batches[g]);
      for (std::size_t v = 0; v < variants.size(); ++v) {
        for (const auto& r : rows) {
          if (r.batch_size != batches[g] || r.variant != variants[v]) continue;
          const double h = panel_h * value(r) / top;
          svg += fmt::format(
              "<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\"><title>{} b={}: "
              "{:.1f}</title></rect>\n",
              gx + v * bar_w, y0 + panel_h - h, bar_w, h, kPalette[v % 6], escape(r.variant), r.batch_size,
              value(r));
        }
      }
    }
    svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">batch size</text>\n", x0 + panel_w / 2,
                       y0 + panel_h + 32);
  };
  panel(margin, "ids / second", [](const ThroughputRow& r) { return r.ids_per_second; });
  panel(2 * margin + panel_w, "bytes / second", [](const ThroughputRow& r) { return r.bytes_per_second; });

  for (std::size_t v = 0; v < variants.size(); ++v) {
    const int lx = margin + static_cast<int>(v) * 140, ly = height - 14;
    svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n", lx, ly - 9,
                       kPalette[v % 6]);
    svg += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", lx + 14, ly, escape(variants[v]));
  }
  return svg + "</svg>\n";
}

std::string stage_svg(std::span<const StageRow> rows) {
  const int margin = 50, bar_w = 50, gap = 30, plot_h = 260;
  const int width = std::max(360, margin * 2 + static_cast<int>(rows.size()) * (bar_w + gap)) + 120;
  const int height = plot_h + 2 * margin + 20;
  std::string svg = svg_open(width, height);
  const char* names[] = {"retrieval", "sampling", "generation"};
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">stage share of latency</text>\n", width / 2,
                     margin - 15);
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", margin, margin,
                     margin + plot_h);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">1.0</text>\n", margin - 4, margin + 4);
  svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>\n", margin - 4, margin + plot_h + 4);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double fr[] = {r.retrieval_fraction, r.sampling_fraction, r.generation_fraction};
    const int x = margin + gap / 2 + static_cast<int>(i) * (bar_w + gap);
    double y = margin + plot_h;
    for (int s = 0; s < 3; ++s) {
      const double h = plot_h * fr[s];
      y -= h;
      svg += fmt::format(
          "<rect x=\"{}\" y=\"{:.1f}\" width=\"{}\" height=\"{:.1f}\" fill=\"{}\"><title>{} b={}: {:.3f}</title>"
          "</rect>\n",
          x, y, bar_w, h, kPalette[s], names[s], r.batch_size, fr[s]);
    }
    svg += fmt::format("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n", x + bar_w / 2,
                       margin + plot_h + 15, r.batch_size);
  }
  svg += fmt::format("<text x=\"{}\" y=\"{}\">batch size</text>\n", margin, margin + plot_h + 32);
  for (int s = 0; s < 3; ++s) {
    const int lx = width - 110, ly = margin + 20 * s + 10;
    svg += fmt::format("<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n", lx, ly - 9, kPalette[s]);
    svg += fmt::format("<text x=\"{}\" y=\"{}\">{}</text>\n", lx + 14, ly, names[s]);
  }
  return svg + "</svg>\n";
}

}  // namespace dva
