#include "icl/tracer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace icl::tracer {

namespace {

Vector row_vector(const model::Mat& m, Eigen::Index r) {
  Vector out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<std::size_t>(c)] = m(r, c);
  return out;
}

Range3 range_of(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  Range3 r;
  r.min = *std::min_element(xs.begin(), xs.end());
  r.max = *std::max_element(xs.begin(), xs.end());
  r.avg = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  return r;
}

std::set<std::size_t> top_positions(const std::vector<ExtractionPoint>& pts, std::size_t n, bool by_norm) {
  std::vector<std::size_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return by_norm ? pts[a].norm > pts[b].norm : pts[a].alpha > pts[b].alpha;
  });
  std::set<std::size_t> out;
  for (std::size_t i = 0; i < std::min(n, idx.size()); ++i) out.insert(pts[idx[i]].position);
  return out;
}

}  // namespace

std::vector<TokenContribution> decompose_head(const model::LayerTape& layer, int head, const model::Mat& output,
                                              std::span<const corpus::TokenId> tokens, const Matrix* basis) {
  const auto T = layer.values.rows();
  if (T == 0 || layer.attn_last.cols() != T) throw TapeError("decompose_head: tape lacks value vectors or attention rows");
  if (head < 0 || head >= layer.attn_last.rows()) throw TapeError("decompose_head: head index outside captured heads");
  if (static_cast<Eigen::Index>(tokens.size()) != T) throw TapeError("decompose_head: token count does not match tape");
  const auto dh = output.rows();
  const auto d = output.cols();
  if (layer.values.cols() < (head + 1) * dh) throw TapeError("decompose_head: value capture too narrow for head");
  if (basis && basis->rows() != static_cast<std::size_t>(d)) throw numkit::ShapeError("decompose_head: basis dimension");

  std::vector<TokenContribution> out;
  out.reserve(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) {
    TokenContribution c;
    c.position = static_cast<std::size_t>(t);
    c.token = tokens[static_cast<std::size_t>(t)];
    c.alpha = layer.attn_last(head, t);
    const model::Mat e = layer.values.block(t, head * dh, 1, dh) * output;
    c.extracted = row_vector(e, 0);
    c.weighted = numkit::scaled(c.extracted, c.alpha);
    if (basis) c.projected = numkit::matvec_t(*basis, c.extracted);
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<TokenContribution> decompose_head(const model::ActivationTape& tape, const model::Checkpoint& ckpt,
                                              HeadId head, std::span<const corpus::TokenId> tokens,
                                              const Matrix* basis) {
  ckpt.check_head(head);
  if (static_cast<std::size_t>(head.layer) >= tape.layers.size()) throw TapeError("decompose_head: layer not captured");
  return decompose_head(tape.layers[static_cast<std::size_t>(head.layer)], head.head, ckpt.output_matrix(head), tokens,
                        basis);
}

double reconstruction_error(const std::vector<TokenContribution>& parts, std::span<const double> head_output) {
  Vector sum(head_output.size(), 0.0);
  for (const auto& p : parts) numkit::axpy(1.0, p.weighted, sum);
  return numkit::norm(numkit::subtract(sum, head_output));
}

ExtractionProfile extraction_profile(const model::Checkpoint& ckpt, const corpus::RenderedPrompt& prompt, HeadId head,
                                     const Matrix& basis) {
  model::ActivationTape tape;
  model::forward(ckpt, prompt.tokens, &tape);
  const auto parts = decompose_head(tape, ckpt, head, prompt.tokens, &basis);
  ExtractionProfile out;
  out.head = head;
  out.y_positions = prompt.y_positions;
  const std::set<std::size_t> ys(prompt.y_positions.begin(), prompt.y_positions.end());
  for (const auto& p : parts) {
    out.points.push_back({p.position, p.token, ys.contains(p.position), numkit::norm(p.projected), p.alpha});
  }
  if (!ys.empty()) {
    out.norm_peaks_at_y = top_positions(out.points, ys.size(), true) == ys;
    out.alpha_peaks_at_y = top_positions(out.points, ys.size(), false) == ys;
  }
  return out;
}

Vector projected_task_direction(const patchlab::HeadVectorTable& table, HeadId head, int k, const Matrix& basis,
                                std::span<const double> center) {
  const auto hk = table.task_mean(head, k);
  Vector p = numkit::matvec_t(basis, center.empty() ? Vector(hk.begin(), hk.end()) : numkit::subtract(hk, center));
  const double n = numkit::norm(p);
  if (n > 0)
    for (double& x : p) x /= n;
  return p;
}

DirectionProfile direction_profile(const model::Checkpoint& ckpt, const corpus::PromptSpec& spec,
                                   const corpus::Vocabulary& vocab, HeadId head,
                                   const subspace::SubspaceBasis& basis, const patchlab::HeadVectorTable& table) {
  const auto prompt = corpus::render(spec, vocab);
  model::ActivationTape tape;
  model::forward(ckpt, prompt.tokens, &tape);
  const auto parts = decompose_head(tape, ckpt, head, prompt.tokens, &basis.basis);

  DirectionProfile out;
  out.head = head;
  out.tasks = table.tasks();
  std::vector<Vector> dirs;
  for (int k : out.tasks) dirs.push_back(projected_task_direction(table, head, k, basis.basis, basis.mean));
  out.inner = Matrix(prompt.y_positions.size(), out.tasks.size());
  for (std::size_t i = 0; i < prompt.y_positions.size(); ++i) {
    out.demo_k.push_back(spec.k_for_demo(i));
    const auto& proj = parts[prompt.y_positions[i]].projected;
    for (std::size_t j = 0; j < dirs.size(); ++j) out.inner(i, j) = numkit::dot(proj, dirs[j]);
    const int best = out.tasks[model::argmax(out.inner.row(i))];
    out.argmax_k.push_back(best);
    if (best == out.demo_k.back()) ++out.matches;
  }
  return out;
}

nlohmann::json CorrelationReport::to_json() const {
  nlohmann::json per_task = nlohmann::json::array();
  for (const auto& t : tasks) {
    per_task.push_back({{"k", t.k}, {"neg_sum", t.neg_sum}, {"pos_sum", t.pos_sum}, {"skipped", t.skipped},
                        {"n_pairs", t.pairs.size()}});
  }
  auto r3 = [](const Range3& r) { return nlohmann::json{{"min", r.min}, {"avg", r.avg}, {"max", r.max}}; };
  return {{"source", source},
          {"head", {head.layer, head.head}},
          {"abs_neg_sum", r3(abs_neg_sum)},
          {"pos_sum", r3(pos_sum)},
          {"skipped_pairs", skipped_pairs},
          {"tasks", per_task}};
}

CorrelationReport correlation_report(const std::map<int, Matrix>& signals, HeadId head) {
  CorrelationReport out;
  out.head = head;
  std::vector<double> negs, poss;
  for (const auto& [k, s] : signals) {
    if (s.rows() < 2) throw numkit::InsufficientDataError("correlation_report: need at least 2 prompts per task");
    TaskCorrelation tc;
    tc.k = k;
    for (std::size_t i = 0; i < s.cols(); ++i) {
      for (std::size_t j = i + 1; j < s.cols(); ++j) {
        try {
          const double r = numkit::pearson(s.col(i), s.col(j));
          tc.pairs.push_back({static_cast<int>(i), static_cast<int>(j), r});
          (r < 0 ? tc.neg_sum : tc.pos_sum) += r;
        } catch (const numkit::DegenerateCorrelationError&) {
          ++tc.skipped;
        }
      }
    }
    out.skipped_pairs += tc.skipped;
    negs.push_back(std::abs(tc.neg_sum));
    poss.push_back(tc.pos_sum);
    out.tasks.push_back(std::move(tc));
  }
  out.abs_neg_sum = range_of(negs);
  out.pos_sum = range_of(poss);
  return out;
}

std::map<int, Matrix> task_signals(const model::Checkpoint& ckpt, HeadId head, const subspace::SubspaceBasis& basis,
                                   const patchlab::HeadVectorTable& table, const corpus::TaskFamily& family,
                                   const std::vector<int>& tasks, std::size_t n_prompts, std::uint64_t seed) {
  const auto vocab = family.vocabulary();
  const model::Mat out_h = ckpt.output_matrix(head);
  std::map<int, Matrix> out;
  for (int k : tasks) {
    const Vector dir = projected_task_direction(table, head, k, basis.basis, basis.mean);
    Matrix s(n_prompts, corpus::kShots);
    const auto specs = corpus::gen_task_prompts(k, n_prompts, family.x, corpus::mix_seed(seed, 0x7AC3 + k));
    for (std::size_t p = 0; p < specs.size(); ++p) {
      const auto prompt = corpus::render(specs[p], vocab);
      model::ActivationTape tape;
      model::forward(ckpt, prompt.tokens, &tape);
      const auto parts = decompose_head(tape.layers[static_cast<std::size_t>(head.layer)], head.head, out_h,
                                        prompt.tokens, &basis.basis);
      for (std::size_t i = 0; i < prompt.y_positions.size(); ++i)
        s(p, i) = numkit::dot(parts[prompt.y_positions[i]].projected, dir);
    }
    out.emplace(k, std::move(s));
  }
  return out;
}

CorrelationReport self_correction_stats(const model::Checkpoint& ckpt, HeadId head,
                                        const subspace::SubspaceBasis& basis, const patchlab::HeadVectorTable& table,
                                        const corpus::TaskFamily& family, const std::vector<int>& tasks,
                                        std::size_t n_prompts, std::uint64_t seed) {
  if (n_prompts < 2) throw numkit::InsufficientDataError("self_correction_stats: need at least 2 prompts per task");
  return correlation_report(task_signals(ckpt, head, basis, table, family, tasks, n_prompts, seed), head);
}

std::map<int, Matrix> planted_signals(const std::vector<int>& tasks, std::size_t n_prompts, bool sum_to_zero,
                                      std::uint64_t seed) {
  std::map<int, Matrix> out;
  for (int k : tasks) {
    std::mt19937_64 rng(corpus::mix_seed(seed, 0x5160 + static_cast<std::uint64_t>(k)));
    std::normal_distribution<double> normal(0.0, 1.0);
    const double mu = 1.0 + 0.1 * k;
    Matrix s(n_prompts, corpus::kShots);
    for (std::size_t p = 0; p < n_prompts; ++p) {
      Vector eps(corpus::kShots);
      for (double& e : eps) e = normal(rng);
      if (sum_to_zero) {
        const double m = std::accumulate(eps.begin(), eps.end(), 0.0) / corpus::kShots;
        for (double& e : eps) e -= m;
      }
      for (std::size_t i = 0; i < eps.size(); ++i) s(p, i) = mu + eps[i];
    }
    out.emplace(k, std::move(s));
  }
  return out;
}

std::string extraction_csv(const std::vector<ExtractionProfile>& profiles) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,prompt,position,token,is_y,norm,alpha\n";
  for (const auto& p : profiles)
    for (const auto& pt : p.points)
      os << p.head.layer << ',' << p.head.head << ',' << p.prompt << ',' << pt.position << ',' << pt.token << ',' << (pt.is_y ? 1 : 0)
         << ',' << pt.norm << ',' << pt.alpha << '\n';
  return os.str();
}

std::string direction_csv(const std::vector<DirectionProfile>& profiles) {
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,prompt,demo,demo_k,k,inner\n";
  for (const auto& p : profiles)
    for (std::size_t i = 0; i < p.inner.rows(); ++i)
      for (std::size_t j = 0; j < p.inner.cols(); ++j)
        os << p.head.layer << ',' << p.head.head << ',' << p.prompt << ',' << i << ',' << p.demo_k[i] << ',' << p.tasks[j] << ','
           << p.inner(i, j) << '\n';
  return os.str();
}

std::string correlation_pairs_csv(const std::vector<CorrelationReport>& reports) {
  std::ostringstream os;
  os.precision(17);
  os << "source,layer,head,k,i,j,r\n";
  for (const auto& rep : reports)
    for (const auto& t : rep.tasks)
      for (const auto& pc : t.pairs)
        os << rep.source << ',' << rep.head.layer << ',' << rep.head.head << ',' << t.k << ',' << pc.i << ',' << pc.j << ',' << pc.r
           << '\n';
  return os.str();
}

std::string correlation_summary_csv(const std::vector<CorrelationReport>& reports) {
  std::ostringstream os;
  os.precision(17);
  os << "source,layer,head,k,neg_sum,pos_sum,skipped\n";
  for (const auto& rep : reports)
    for (const auto& t : rep.tasks)
      os << rep.source << ',' << rep.head.layer << ',' << rep.head.head << ',' << t.k << ',' << t.neg_sum << ',' << t.pos_sum << ','
         << t.skipped << '\n';
  return os.str();
}

}  // namespace icl::tracer
