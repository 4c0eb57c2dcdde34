#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "xpool/corpus.hpp"

namespace xpool {

/// Planted text-video structure with a known alignment. Every caption is an
/// anchor direction plus noise; its video holds `relevant_frames` noisy copies
/// of that anchor as one segment, and `distractor_segments` segments of
/// `segment_frames` frames around unrelated directions. The relevant segment
/// sits at a random segment slot.
struct PlantedCorpusConfig {
  std::size_t pairs = 64;
  std::size_t dim = 32;
  std::size_t relevant_frames = 1;
  std::size_t distractor_segments = 3;
  std::size_t segment_frames = 3;
  double text_noise = 0.05;
  double frame_noise = 0.05;
  std::uint64_t seed = 0;
};

inline std::string synthetic_id(char prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%04zu", prefix, i);
  return buf;
}

inline RetrievalCorpus make_planted_corpus(const PlantedCorpusConfig& cfg) {
  if (cfg.pairs == 0 || cfg.dim == 0 || cfg.relevant_frames == 0) throw ParameterError("planted corpus: counts must be positive");
  std::mt19937_64 gen(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double unit = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  auto direction = [&] {
    std::vector<double> v(cfg.dim);
    for (auto& x : v) x = normal(gen) * unit;
    return v;
  };
  auto noisy_row = [&](const std::vector<double>& base, double noise, std::span<float> out) {
    for (std::size_t c = 0; c < cfg.dim; ++c) out[c] = static_cast<float>(base[c] + noise * unit * normal(gen));
  };

  std::vector<EmbeddingRecord> texts;
  std::vector<EmbeddingRecord> videos;
  std::vector<GroundTruthPair> pairs;
  const std::size_t frame_count = cfg.relevant_frames + cfg.distractor_segments * cfg.segment_frames;
  for (std::size_t i = 0; i < cfg.pairs; ++i) {
    const auto anchor = direction();
    Matrix<float> text(1, cfg.dim);
    noisy_row(anchor, cfg.text_noise, text.row(0));

    std::uniform_int_distribution<std::size_t> slot_pick(0, cfg.distractor_segments);
    const std::size_t relevant_slot = slot_pick(gen);
    Matrix<float> frames(frame_count, cfg.dim);
    std::size_t row = 0;
    for (std::size_t slot = 0; slot <= cfg.distractor_segments; ++slot) {
      if (slot == relevant_slot) {
        for (std::size_t f = 0; f < cfg.relevant_frames; ++f) noisy_row(anchor, cfg.frame_noise, frames.row(row++));
      }
      if (slot < cfg.distractor_segments) {
        const auto distractor = direction();
        for (std::size_t f = 0; f < cfg.segment_frames; ++f) noisy_row(distractor, cfg.frame_noise, frames.row(row++));
      }
    }
    texts.push_back({synthetic_id('t', i), std::move(text)});
    videos.push_back({synthetic_id('v', i), std::move(frames)});
    pairs.push_back({texts.back().id, videos.back().id});
  }
  return RetrievalCorpus(cfg.dim, std::move(texts), std::move(videos), std::move(pairs));
}

}  // namespace xpool
