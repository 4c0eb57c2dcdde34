#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "xpool/checkpoint.hpp"
#include "xpool/corpus.hpp"
#include "xpool/errors.hpp"
#include "xpool/objective.hpp"
#include "xpool/parallel.hpp"
#include "xpool/pooling.hpp"

namespace xpool {

enum class PoolingKind { Mean, TopK, XPool };

/// Temporal aggregation selector: `mean`, `topk:<k>` or `xpool`.
struct PoolingMethod {
  PoolingKind kind = PoolingKind::Mean;
  std::size_t k = 0;

  static PoolingMethod parse(const std::string& s) {
    if (s == "mean") return {PoolingKind::Mean, 0};
    if (s == "xpool") return {PoolingKind::XPool, 0};
    if (s.rfind("topk:", 0) == 0) {
      const std::string num = s.substr(5);
      if (num.empty() || !std::all_of(num.begin(), num.end(), [](char c) { return c >= '0' && c <= '9'; }) || std::stoul(num) == 0) {
        throw ParameterError("invalid top-k specifier '" + s + "' (expected topk:<k>, k >= 1)");
      }
      return {PoolingKind::TopK, std::stoul(num)};
    }
    throw ParameterError("unknown pooling method '" + s + "' (expected mean | topk:<k> | xpool)");
  }

  std::string name() const {
    switch (kind) {
      case PoolingKind::Mean: return "mean";
      case PoolingKind::TopK: return "topk:" + std::to_string(k);
      case PoolingKind::XPool: return "xpool";
    }
    return "?";
  }
};

enum class Direction { T2V, V2T };

inline Direction parse_direction(const std::string& s) {
  if (s == "t2v") return Direction::T2V;
  if (s == "v2t") return Direction::V2T;
  throw ParameterError("unknown direction '" + s + "' (expected t2v | v2t)");
}

inline std::string to_string(Direction d) { return d == Direction::T2V ? "t2v" : "v2t"; }

/// s(t, v) under one pooling method. The head-forward counter is shared and
/// thread-safe so evaluation cost can be asserted.
class SimilarityScorer {
 public:
  static SimilarityScorer mean() { return SimilarityScorer(PoolingMethod{PoolingKind::Mean, 0}, nullptr); }
  static SimilarityScorer top_k(std::size_t k) { return SimilarityScorer(PoolingMethod{PoolingKind::TopK, k}, nullptr); }
  static SimilarityScorer xpool(const XPoolHead<float>& head) {
    head.validate();
    return SimilarityScorer(PoolingMethod{PoolingKind::XPool, 0}, &head);
  }
  static SimilarityScorer from_method(const PoolingMethod& m, const XPoolHead<float>* head) {
    if (m.kind == PoolingKind::XPool) {
      if (head == nullptr) throw ParameterError("xpool pooling requires a checkpoint");
      return xpool(*head);
    }
    return SimilarityScorer(m, nullptr);
  }

  const PoolingMethod& method() const noexcept { return method_; }

  float score(std::span<const float> text, const Matrix<float>& frames) const {
    switch (method_.kind) {
      case PoolingKind::Mean: return cosine_sim<float>(text, mean_pool(frames).values());
      case PoolingKind::TopK: return cosine_sim<float>(text, top_k_pool(frames, text, method_.k).embedding.values());
      case PoolingKind::XPool: {
        counter_->fetch_add(1, std::memory_order_relaxed);
        return cosine_sim<float>(text, xpool_forward(*head_, frames, text).embedding.values());
      }
    }
    return 0.0f;
  }

  std::size_t head_forwards() const noexcept { return counter_->load(); }
  void reset_counter() const noexcept { counter_->store(0); }

 private:
  SimilarityScorer(PoolingMethod m, const XPoolHead<float>* head)
      : method_(m), head_(head), counter_(std::make_shared<std::atomic<std::size_t>>(0)) {}

  PoolingMethod method_;
  const XPoolHead<float>* head_;
  std::shared_ptr<std::atomic<std::size_t>> counter_;
};

struct RankedItem {
  std::string id;
  float score = 0.0f;

  friend bool operator==(const RankedItem&, const RankedItem&) = default;
};

/// Descending score; equal scores in ascending id order.
inline bool ranks_before(float score_a, const std::string& id_a, float score_b, const std::string& id_b) {
  if (score_a != score_b) return score_a > score_b;
  return id_a < id_b;
}

inline void sort_ranked(std::vector<RankedItem>& items) {
  std::sort(items.begin(), items.end(), [](const RankedItem& a, const RankedItem& b) { return ranks_before(a.score, a.id, b.score, b.id); });
}

inline std::vector<RankedItem> rank_t2v(const SimilarityScorer& scorer, std::span<const float> query,
                                        const std::vector<EmbeddingRecord>& videos) {
  if (videos.empty()) throw InputError("rank_t2v: empty index");
  std::vector<RankedItem> out;
  out.reserve(videos.size());
  for (const auto& v : videos) out.push_back({v.id, scorer.score(query, v.values)});
  sort_ranked(out);
  return out;
}

inline std::vector<RankedItem> rank_t2v(const XPoolHead<float>& head, std::span<const float> query,
                                        const std::vector<EmbeddingRecord>& videos) {
  return rank_t2v(SimilarityScorer::xpool(head), query, videos);
}

/// Each candidate text conditions its own pooling of the query video.
inline std::vector<RankedItem> rank_v2t(const SimilarityScorer& scorer, const Matrix<float>& video,
                                        const std::vector<EmbeddingRecord>& texts) {
  if (texts.empty()) throw InputError("rank_v2t: empty index");
  std::vector<RankedItem> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back({t.id, scorer.score(t.values.row(0), video)});
  sort_ranked(out);
  return out;
}

inline std::vector<RankedItem> rank_v2t(const XPoolHead<float>& head, const Matrix<float>& video,
                                        const std::vector<EmbeddingRecord>& texts) {
  return rank_v2t(SimilarityScorer::xpool(head), video, texts);
}

struct QueryRank {
  std::string query_id;
  std::string target_id;
  std::size_t rank = 0;  // 1-indexed

  friend bool operator==(const QueryRank&, const QueryRank&) = default;
};

struct RankingReport {
  std::vector<QueryRank> queries;
  std::size_t index_size = 0;
  std::map<std::size_t, double> recall_at;  // {1, 5, 10}
  double median_rank = 0.0;
  double mean_rank = 0.0;

  double recall(std::size_t k) const { return recall_at.at(k); }

  friend bool operator==(const RankingReport&, const RankingReport&) = default;
};

/// R@{1,5,10}, median (mean of the middle pair for even counts) and mean rank.
inline RankingReport summarize_ranks(std::vector<QueryRank> queries, std::size_t index_size) {
  if (queries.empty()) throw DataError("no ground-truth pairs to evaluate");
  RankingReport r;
  r.queries = std::move(queries);
  r.index_size = index_size;
  std::vector<std::size_t> ranks;
  ranks.reserve(r.queries.size());
  for (const auto& q : r.queries) ranks.push_back(q.rank);
  const double n = static_cast<double>(ranks.size());
  for (std::size_t k : {1u, 5u, 10u}) {
    r.recall_at[k] = static_cast<double>(std::count_if(ranks.begin(), ranks.end(), [k](std::size_t x) { return x <= k; })) / n;
  }
  std::sort(ranks.begin(), ranks.end());
  const std::size_t m = ranks.size() / 2;
  r.median_rank = ranks.size() % 2 == 1 ? static_cast<double>(ranks[m]) : 0.5 * static_cast<double>(ranks[m - 1] + ranks[m]);
  r.mean_rank = static_cast<double>(std::accumulate(ranks.begin(), ranks.end(), std::uint64_t{0})) / n;
  return r;
}

/// Full text x video score matrix; rows follow corpus.texts(), columns corpus.videos().
inline Matrix<float> score_matrix(const SimilarityScorer& scorer, const RetrievalCorpus& corpus, std::size_t threads = 1) {
  const auto& texts = corpus.texts();
  const auto& videos = corpus.videos();
  if (scorer.method().kind == PoolingKind::TopK && scorer.method().k > corpus.min_frames()) {
    throw ParameterError("top-k k=" + std::to_string(scorer.method().k) + " exceeds the shortest video (" +
                         std::to_string(corpus.min_frames()) + " frames)");
  }
  Matrix<float> s(texts.size(), videos.size());
  parallel_for(texts.size(), threads, [&](std::size_t t) {
    for (std::size_t v = 0; v < videos.size(); ++v) s(t, v) = scorer.score(texts[t].values.row(0), videos[v].values);
  });
  return s;
}

/// Every ground-truth pair is its own query instance. t2v ranks the pair's
/// video among all videos for the caption; v2t ranks the caption among all
/// captions for the video.
inline RankingReport evaluate(const SimilarityScorer& scorer, const RetrievalCorpus& corpus, Direction direction,
                              std::size_t threads = 1) {
  if (corpus.pairs().empty()) throw DataError("evaluate: corpus has no ground-truth pairs");
  if (corpus.videos().empty() || corpus.texts().empty()) throw InputError("evaluate: empty index");
  const Matrix<float> s = score_matrix(scorer, corpus, threads);
  const auto& texts = corpus.texts();
  const auto& videos = corpus.videos();
  std::vector<QueryRank> queries;
  queries.reserve(corpus.pairs().size());
  for (const auto& p : corpus.pairs()) {
    const std::size_t t = corpus.text_position(p.text_id);
    const std::size_t v = corpus.video_position(p.video_id);
    std::size_t rank = 1;
    if (direction == Direction::T2V) {
      for (std::size_t o = 0; o < videos.size(); ++o)
        if (o != v && ranks_before(s(t, o), videos[o].id, s(t, v), videos[v].id)) ++rank;
      queries.push_back({p.text_id, p.video_id, rank});
    } else {
      for (std::size_t o = 0; o < texts.size(); ++o)
        if (o != t && ranks_before(s(o, v), texts[o].id, s(t, v), texts[t].id)) ++rank;
      queries.push_back({p.video_id, p.text_id, rank});
    }
  }
  return summarize_ranks(std::move(queries), direction == Direction::T2V ? videos.size() : texts.size());
}

inline RankingReport evaluate(const XPoolHead<float>& head, const RetrievalCorpus& corpus, Direction direction,
                              std::size_t threads = 1) {
  return evaluate(SimilarityScorer::xpool(head), corpus, direction, threads);
}

struct TwoStageConfig {
  std::size_t candidates = 100;  // P
};

/// Mean-pooled video embeddings for candidate generation.
struct MeanPoolIndex {
  std::vector<std::string> ids;
  std::vector<Matrix<float>> embeddings;

  static MeanPoolIndex build(const std::vector<EmbeddingRecord>& videos) {
    MeanPoolIndex idx;
    for (const auto& v : videos) {
      idx.ids.push_back(v.id);
      idx.embeddings.push_back(mean_pool(v.values));
    }
    return idx;
  }
};

/// Stage 1 ranks by cosine against mean-pooled embeddings and keeps the top P;
/// stage 2 re-scores only those P with `rerank`. The result is the re-ranked
/// candidates followed by the remaining videos in stage-1 order.
inline std::vector<RankedItem> two_stage_rank(const SimilarityScorer& rerank, std::span<const float> query,
                                              const std::vector<EmbeddingRecord>& videos, const MeanPoolIndex& index,
                                              const TwoStageConfig& cfg) {
  if (videos.empty()) throw InputError("two_stage_rank: empty index");
  if (index.ids.size() != videos.size()) throw ShapeError("two_stage_rank: mean-pool index does not match video index");
  if (cfg.candidates < 1 || cfg.candidates > videos.size()) {
    throw ParameterError("two_stage_rank: P=" + std::to_string(cfg.candidates) + " outside [1, " + std::to_string(videos.size()) + "]");
  }
  std::vector<std::size_t> order(videos.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<float> stage1(videos.size());
  for (std::size_t v = 0; v < videos.size(); ++v) stage1[v] = cosine_sim<float>(query, index.embeddings[v].values());
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return ranks_before(stage1[a], videos[a].id, stage1[b], videos[b].id); });

  std::vector<RankedItem> head_part;
  head_part.reserve(cfg.candidates);
  for (std::size_t i = 0; i < cfg.candidates; ++i) {
    const auto& v = videos[order[i]];
    head_part.push_back({v.id, rerank.score(query, v.values)});
  }
  sort_ranked(head_part);
  for (std::size_t i = cfg.candidates; i < order.size(); ++i) head_part.push_back({videos[order[i]].id, stage1[order[i]]});
  return head_part;
}

inline RankingReport evaluate_two_stage(const SimilarityScorer& rerank, const RetrievalCorpus& corpus, const TwoStageConfig& cfg,
                                        std::size_t threads = 1) {
  if (corpus.pairs().empty()) throw DataError("evaluate_two_stage: corpus has no ground-truth pairs");
  const MeanPoolIndex index = MeanPoolIndex::build(corpus.videos());
  std::vector<QueryRank> queries(corpus.pairs().size());
  parallel_for(queries.size(), threads, [&](std::size_t q) {
    const auto& p = corpus.pairs()[q];
    const auto ranked = two_stage_rank(rerank, corpus.text(p.text_id).row(0), corpus.videos(), index, cfg);
    const auto it = std::find_if(ranked.begin(), ranked.end(), [&](const RankedItem& r) { return r.id == p.video_id; });
    queries[q] = {p.text_id, p.video_id, static_cast<std::size_t>(it - ranked.begin()) + 1};
  });
  return summarize_ranks(std::move(queries), corpus.videos().size());
}

/// For each ground-truth pair, the k in [1, F] whose top-k pooling maximizes
/// the cosine with the caption (smallest k on ties), tallied into a histogram.
inline std::map<std::size_t, std::size_t> optimal_k_histogram(const RetrievalCorpus& corpus) {
  std::map<std::size_t, std::size_t> hist;
  for (const auto& p : corpus.pairs()) {
    const auto text = corpus.text(p.text_id).row(0);
    const Matrix<float>& frames = corpus.video(p.video_id);
    std::size_t best_k = 1;
    float best = -2.0f;
    for (std::size_t k = 1; k <= frames.rows(); ++k) {
      const float s = cosine_sim<float>(text, top_k_pool(frames, text, k).embedding.values());
      if (s > best) {
        best = s;
        best_k = k;
      }
    }
    ++hist[best_k];
  }
  return hist;
}

struct AttentionRecord {
  std::string query_id;
  std::string video_id;
  std::size_t frame = 0;
  double weight = 0.0;
};

/// Per-frame attention of the head for each (text, video) pair.
inline std::vector<AttentionRecord> export_attention(const XPoolHead<float>& head, const RetrievalCorpus& corpus,
                                                     const std::vector<GroundTruthPair>& pairs) {
  require_head_dim(head, corpus.dim());
  std::vector<AttentionRecord> out;
  for (const auto& p : pairs) {
    const auto res = xpool_forward(head, corpus.video(p.video_id), corpus.text(p.text_id).row(0));
    for (std::size_t f = 0; f < res.trace.weights.size(); ++f) {
      out.push_back({p.text_id, p.video_id, res.trace.frame_ids[f], res.trace.weights[f]});
    }
  }
  return out;
}

}  // namespace xpool
