#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xpool/errors.hpp"
#include "xpool/io.hpp"
#include "xpool/matrix.hpp"

namespace xpool {

/// One id plus its F x D embedding rows (F == 1 for captions).
struct EmbeddingRecord {
  std::string id;
  Matrix<float> values;

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct EmbeddingCollection {
  std::size_t dim = 0;
  std::vector<EmbeddingRecord> records;

  friend bool operator==(const EmbeddingCollection&, const EmbeddingCollection&) = default;
};

struct GroundTruthPair {
  std::string text_id;
  std::string video_id;

  friend bool operator==(const GroundTruthPair&, const GroundTruthPair&) = default;
};

inline constexpr char kEmbeddingMagic[] = "XPE1";
inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline std::vector<char> encode_embeddings(const EmbeddingCollection& c) {
  ByteWriter w;
  w.bytes(kEmbeddingMagic);
  w.le<std::uint32_t>(kEmbeddingVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.dim));
  w.le<std::uint64_t>(c.records.size());
  for (const auto& rec : c.records) {
    if (rec.values.cols() != c.dim) {
      throw DataError("record '" + rec.id + "' has dimension " + std::to_string(rec.values.cols()) + ", collection has " +
                      std::to_string(c.dim));
    }
    if (rec.id.size() > std::numeric_limits<std::uint16_t>::max()) throw DataError("record id too long: " + rec.id.substr(0, 32));
    w.le<std::uint16_t>(static_cast<std::uint16_t>(rec.id.size()));
    w.bytes(rec.id);
    w.le<std::uint32_t>(static_cast<std::uint32_t>(rec.values.rows()));
    for (float v : rec.values.values()) w.f32(v);
  }
  return w.buffer();
}

inline void check_nonzero_rows(const EmbeddingRecord& rec) {
  for (std::size_t r = 0; r < rec.values.rows(); ++r) {
    const auto row = rec.values.row(r);
    if (std::all_of(row.begin(), row.end(), [](float v) { return v == 0.0f; })) {
      throw DataError("record '" + rec.id + "' row " + std::to_string(r) + " has zero norm");
    }
  }
}

/// Parses an XPE1 byte stream. `source` names the input in error messages.
inline EmbeddingCollection decode_embeddings(std::vector<char> bytes, const std::string& source = "<memory>") {
  ByteReader in(std::move(bytes));
  const std::string magic = in.bytes(4, "magic");
  if (magic != kEmbeddingMagic) throw FormatError(source + ": bad magic (expected XPE1)");
  const auto version = in.le<std::uint32_t>("format_version");
  if (version != kEmbeddingVersion) throw FormatError(source + ": unsupported XPE1 version " + std::to_string(version));
  EmbeddingCollection c;
  c.dim = in.le<std::uint32_t>("dimension");
  const auto count = in.le<std::uint64_t>("record_count");
  if (c.dim == 0 && count > 0) throw DataError(source + ": zero embedding dimension");
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t record_start = in.offset();
    if (in.at_end()) {
      throw CorruptionError(source + ": declared " + std::to_string(count) + " records but found " + std::to_string(i), record_start);
    }
    EmbeddingRecord rec;
    const auto id_len = in.le<std::uint16_t>("id_length");
    rec.id = in.bytes(id_len, "id");
    const auto frames = in.le<std::uint32_t>("frame_count");
    const std::size_t payload = static_cast<std::size_t>(frames) * c.dim;
    if (in.remaining() / sizeof(float) < payload) {
      throw CorruptionError(source + ": truncated payload in record '" + rec.id + "'", in.offset());
    }
    std::vector<float> values(payload);
    for (auto& v : values) v = in.f32("payload");
    rec.values = Matrix<float>(frames, c.dim, std::move(values));
    if (!rec.values.all_finite()) throw DataError(source + ": record '" + rec.id + "' contains non-finite values");
    check_nonzero_rows(rec);
    c.records.push_back(std::move(rec));
  }
  if (!in.at_end()) throw CorruptionError(source + ": trailing bytes after last record", in.offset());
  return c;
}

inline EmbeddingCollection read_embeddings(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("embedding file not found: '" + path.string() + "'");
  return decode_embeddings(read_file_bytes(path), path.string());
}

inline void write_embeddings(const std::filesystem::path& path, const EmbeddingCollection& c) {
  write_file_atomic(path, encode_embeddings(c));
}

/// Manifest lines: `pair <text_id> <video_id>`; blank lines and `#` comments ignored.
inline std::vector<GroundTruthPair> parse_manifest(const std::string& text, const std::string& source = "<memory>") {
  std::vector<GroundTruthPair> pairs;
  std::istringstream lines(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream fields(line);
    std::string kind;
    if (!(fields >> kind)) continue;
    GroundTruthPair p;
    std::string extra;
    if (kind != "pair" || !(fields >> p.text_id >> p.video_id) || (fields >> extra)) {
      throw DataError(source + ":" + std::to_string(lineno) + ": expected `pair <text_id> <video_id>`");
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline std::vector<GroundTruthPair> read_manifest(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("manifest not found: '" + path.string() + "'");
  return parse_manifest(read_file_text(path), path.string());
}

inline std::string format_manifest(const std::vector<GroundTruthPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) out += "pair " + p.text_id + " " + p.video_id + "\n";
  return out;
}

/// Captions, videos and their ground-truth matches over a shared dimension D.
class RetrievalCorpus {
 public:
  RetrievalCorpus() = default;

  RetrievalCorpus(std::size_t dim, std::vector<EmbeddingRecord> texts, std::vector<EmbeddingRecord> videos,
                  std::vector<GroundTruthPair> pairs)
      : dim_(dim), texts_(std::move(texts)), videos_(std::move(videos)), pairs_(std::move(pairs)) {
    index(texts_, text_pos_, "text");
    index(videos_, video_pos_, "video");
    for (const auto& t : texts_) {
      if (t.values.rows() != 1) throw DataError("text '" + t.id + "' must have exactly one row");
    }
    for (const auto& p : pairs_) {
      if (!text_pos_.contains(p.text_id)) throw DataError("pair references unknown text id '" + p.text_id + "'");
      if (!video_pos_.contains(p.video_id)) throw DataError("pair references unknown video id '" + p.video_id + "'");
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  const std::vector<EmbeddingRecord>& texts() const noexcept { return texts_; }
  const std::vector<EmbeddingRecord>& videos() const noexcept { return videos_; }
  const std::vector<GroundTruthPair>& pairs() const noexcept { return pairs_; }

  std::size_t text_position(const std::string& id) const { return lookup(text_pos_, id, "text"); }
  std::size_t video_position(const std::string& id) const { return lookup(video_pos_, id, "video"); }
  const Matrix<float>& text(const std::string& id) const { return texts_[text_position(id)].values; }
  const Matrix<float>& video(const std::string& id) const { return videos_[video_position(id)].values; }

  std::size_t min_frames() const {
    std::size_t m = std::numeric_limits<std::size_t>::max();
    for (const auto& v : videos_) m = std::min(m, v.values.rows());
    return videos_.empty() ? 0 : m;
  }

  /// Same texts and pairs over replacement videos (ids and order preserved).
  RetrievalCorpus with_videos(std::vector<EmbeddingRecord> videos) const {
    return RetrievalCorpus(dim_, texts_, std::move(videos), pairs_);
  }

  friend bool operator==(const RetrievalCorpus& a, const RetrievalCorpus& b) {
    return a.dim_ == b.dim_ && a.texts_ == b.texts_ && a.videos_ == b.videos_ && a.pairs_ == b.pairs_;
  }

 private:
  void index(const std::vector<EmbeddingRecord>& recs, std::unordered_map<std::string, std::size_t>& pos, const char* kind) {
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto& r = recs[i];
      if (r.values.cols() != dim_) {
        throw DataError(std::string(kind) + " '" + r.id + "' has dimension " + std::to_string(r.values.cols()) +
                        ", expected " + std::to_string(dim_));
      }
      if (r.values.rows() == 0) throw DataError(std::string(kind) + " '" + r.id + "' has no rows");
      check_nonzero_rows(r);
      if (!pos.emplace(r.id, i).second) throw DataError(std::string("duplicate ") + kind + " id '" + r.id + "'");
    }
  }

  static std::size_t lookup(const std::unordered_map<std::string, std::size_t>& pos, const std::string& id, const char* kind) {
    auto it = pos.find(id);
    if (it == pos.end()) throw DataError(std::string("unknown ") + kind + " id '" + id + "'");
    return it->second;
  }

  std::size_t dim_ = 0;
  std::vector<EmbeddingRecord> texts_;
  std::vector<EmbeddingRecord> videos_;
  std::vector<GroundTruthPair> pairs_;
  std::unordered_map<std::string, std::size_t> text_pos_;
  std::unordered_map<std::string, std::size_t> video_pos_;
};

inline RetrievalCorpus load_corpus(const std::filesystem::path& texts_path, const std::filesystem::path& videos_path,
                                   const std::filesystem::path& manifest_path) {
  auto texts = read_embeddings(texts_path);
  auto videos = read_embeddings(videos_path);
  auto pairs = read_manifest(manifest_path);
  if (texts.dim != videos.dim && !texts.records.empty() && !videos.records.empty()) {
    throw DataError("text dimension " + std::to_string(texts.dim) + " differs from video dimension " + std::to_string(videos.dim));
  }
  const std::size_t dim = texts.records.empty() ? videos.dim : texts.dim;
  return RetrievalCorpus(dim, std::move(texts.records), std::move(videos.records), std::move(pairs));
}

inline void save_corpus(const RetrievalCorpus& corpus, const std::filesystem::path& texts_path,
                        const std::filesystem::path& videos_path, const std::filesystem::path& manifest_path) {
  write_embeddings(texts_path, {corpus.dim(), corpus.texts()});
  write_embeddings(videos_path, {corpus.dim(), corpus.videos()});
  write_file_atomic(manifest_path, format_manifest(corpus.pairs()));
}

/// Frame indices spaced uniformly over [0, F-1]: i -> round(i (F-1) / (target-1)).
inline std::vector<std::size_t> uniform_frame_indices(std::size_t frame_count, std::size_t target) {
  if (frame_count == 0 || target == 0) throw ParameterError("uniform_frame_indices: counts must be positive");
  std::vector<std::size_t> idx;
  if (target >= frame_count) {
    for (std::size_t i = 0; i < frame_count; ++i) idx.push_back(i);
    return idx;
  }
  if (target == 1) return {0};
  const std::size_t span = frame_count - 1;
  const std::size_t steps = target - 1;
  for (std::size_t i = 0; i < target; ++i) idx.push_back((2 * i * span + steps) / (2 * steps));  // round half up
  return idx;
}

template <typename T>
Matrix<T> subsample_frames(const Matrix<T>& frames, std::size_t target) {
  if (frames.rows() == 0) throw InputError("subsample_frames: empty frame set");
  const auto idx = uniform_frame_indices(frames.rows(), target);
  if (idx.size() == frames.rows()) return frames;
  Matrix<T> out(idx.size(), frames.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy(frames.row(idx[i]).begin(), frames.row(idx[i]).end(), out.row(i).begin());
  return out;
}

/// Applies subsample_frames to every video; target 0 keeps all frames.
inline RetrievalCorpus subsample_corpus(const RetrievalCorpus& corpus, std::size_t target) {
  if (target == 0) return corpus;
  std::vector<EmbeddingRecord> videos;
  videos.reserve(corpus.videos().size());
  for (const auto& v : corpus.videos()) videos.push_back({v.id, subsample_frames(v.values, target)});
  return corpus.with_videos(std::move(videos));
}

struct AugmentationSpec {
  std::size_t num_transitions = 0;
  std::uint64_t donor_selection_seed = 0;
  std::uint64_t insertion_seed = 0;
};

/// Splices `num_transitions` donor videos into every video as contiguous
/// blocks, each at its own interior boundary of the host sequence. Donors are
/// drawn from the original corpus, distinct and never the host itself while
/// enough other videos exist. Captions and pairs are unchanged.
inline RetrievalCorpus inject_transitions(const RetrievalCorpus& corpus, const AugmentationSpec& spec) {
  if (spec.num_transitions == 0) return corpus;
  const auto& videos = corpus.videos();
  if (videos.size() < 2) throw InputError("inject_transitions: need at least 2 videos to inject transitions");

  std::mt19937_64 donor_rng(spec.donor_selection_seed);
  std::mt19937_64 insert_rng(spec.insertion_seed);
  std::vector<EmbeddingRecord> out;
  out.reserve(videos.size());
  for (std::size_t host = 0; host < videos.size(); ++host) {
    std::vector<std::size_t> candidates;
    for (std::size_t v = 0; v < videos.size(); ++v)
      if (v != host) candidates.push_back(v);
    std::vector<std::size_t> donors;
    std::size_t pool = 0;
    for (std::size_t n = 0; n < spec.num_transitions; ++n) {
      if (pool == 0) pool = candidates.size();  // every other video used once; refill
      std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
      const std::size_t k = pick(donor_rng);
      donors.push_back(candidates[k]);
      std::swap(candidates[k], candidates[--pool]);
    }

    const Matrix<float>& host_frames = videos[host].values;
    const std::size_t f = host_frames.rows();
    const std::size_t lo = f >= 2 ? 1 : 0;
    const std::size_t hi = f >= 2 ? f - 1 : f;
    std::vector<std::pair<std::size_t, std::size_t>> placements;  // (boundary, donor)
    for (std::size_t d : donors) {
      std::uniform_int_distribution<std::size_t> at(lo, hi);
      placements.emplace_back(at(insert_rng), d);
    }
    std::stable_sort(placements.begin(), placements.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

    std::size_t total = f;
    for (const auto& [_, d] : placements) total += videos[d].values.rows();
    Matrix<float> spliced(total, corpus.dim());
    std::size_t row = 0;
    std::size_t next_placement = 0;
    auto copy_row = [&](const Matrix<float>& src, std::size_t r) {
      std::copy(src.row(r).begin(), src.row(r).end(), spliced.row(row++).begin());
    };
    for (std::size_t boundary = 0; boundary <= f; ++boundary) {
      while (next_placement < placements.size() && placements[next_placement].first == boundary) {
        const Matrix<float>& donor = videos[placements[next_placement++].second].values;
        for (std::size_t r = 0; r < donor.rows(); ++r) copy_row(donor, r);
      }
      if (boundary < f) copy_row(host_frames, boundary);
    }
    out.push_back({videos[host].id, std::move(spliced)});
  }
  return corpus.with_videos(std::move(out));
}

}  // namespace xpool
