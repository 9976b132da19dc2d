// Copyright 2026 The sffn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sffn/model.hpp"
#include "sffn/numeric.hpp"

// Token file: "TOKS", u16 version, u16 token width in bytes (2 or 4),
// u64 count, then count little-endian ids.

namespace sffn {

class TokenStreamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TokenStream {
 public:
  TokenStream() = default;
  explicit TokenStream(std::vector<Token> tokens, unsigned width_bytes = 2, std::string path = {})
      : tokens_(std::move(tokens)), width_(width_bytes), path_(std::move(path)) {
    if (width_ != 2 && width_ != 4) throw TokenStreamError("token width must be 2 or 4 bytes");
    if (width_ == 2) {
      for (Token t : tokens_) {
        if (t > 0xffff) throw TokenStreamError("token id " + std::to_string(t) + " does not fit 16 bits");
      }
    }
  }

  static TokenStream open(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw TokenStreamError("cannot open token file " + path);
    std::array<unsigned char, 16> h{};
    is.read(reinterpret_cast<char*>(h.data()), h.size());
    if (!is || h[0] != 'T' || h[1] != 'O' || h[2] != 'K' || h[3] != 'S') {
      throw TokenStreamError(path + ": not a token file (bad magic)");
    }
    const unsigned version = h[4] | (h[5] << 8);
    const unsigned width = h[6] | (h[7] << 8);
    if (version != 1) throw TokenStreamError(path + ": unsupported version " + std::to_string(version));
    if (width != 2 && width != 4) throw TokenStreamError(path + ": bad token width " + std::to_string(width));
    std::uint64_t count = 0;
    for (int i = 0; i < 8; ++i) count |= static_cast<std::uint64_t>(h[8 + i]) << (8 * i);
    std::vector<unsigned char> raw(count * width);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::uint64_t>(is.gcount()) != raw.size()) throw TokenStreamError(path + ": truncated");
    std::vector<Token> tokens(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      Token t = 0;
      for (unsigned b = 0; b < width; ++b) t |= static_cast<Token>(raw[i * width + b]) << (8 * b);
      tokens[i] = t;
    }
    return TokenStream(std::move(tokens), width, path);
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw TokenStreamError("cannot write " + path);
    const std::uint64_t n = tokens_.size();
    std::array<unsigned char, 16> h{'T', 'O', 'K', 'S', 1, 0, static_cast<unsigned char>(width_), 0};
    for (int i = 0; i < 8; ++i) h[8 + i] = static_cast<unsigned char>(n >> (8 * i));
    os.write(reinterpret_cast<const char*>(h.data()), h.size());
    std::vector<unsigned char> raw(tokens_.size() * width_);
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      for (unsigned b = 0; b < width_; ++b) raw[i * width_ + b] = static_cast<unsigned char>(tokens_[i] >> (8 * b));
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!os) throw TokenStreamError("write failed for " + path);
  }

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  unsigned width() const { return width_; }
  const std::string& path() const { return path_; }
  std::span<const Token> tokens() const { return tokens_; }

  Token max_id() const { return tokens_.empty() ? 0 : *std::max_element(tokens_.begin(), tokens_.end()); }

  void check_vocab(std::size_t vocab) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (tokens_[i] >= vocab) {
        throw TokenStreamError("token id " + std::to_string(tokens_[i]) + " at offset " + std::to_string(i) +
                               " >= vocab " + std::to_string(vocab));
      }
    }
  }

  TokenStream slice(std::size_t begin, std::size_t end) const {
    end = std::min(end, tokens_.size());
    begin = std::min(begin, end);
    return TokenStream(std::vector<Token>(tokens_.begin() + begin, tokens_.begin() + end), width_, path_);
  }

  /// Splits off the trailing `fraction` as a held-out stream.
  std::pair<TokenStream, TokenStream> split(double fraction) const {
    const auto cut = static_cast<std::size_t>(static_cast<double>(size()) * (1.0 - fraction));
    return {slice(0, cut), slice(cut, size())};
  }

 private:
  std::vector<Token> tokens_;
  unsigned width_ = 2;
  std::string path_;
};

// ---------------------------------------------------------------------------
// Byte-level corpora: ids 0..255 are bytes, 256 ends a document.

inline constexpr Token kByteEos = 256;
inline constexpr std::size_t kByteVocab = 257;

inline TokenStream bytes_to_stream(std::string_view text) {
  std::vector<Token> t(text.size());
  std::transform(text.begin(), text.end(), t.begin(), [](char c) { return static_cast<Token>(static_cast<unsigned char>(c)); });
  return TokenStream(std::move(t), 2);
}

/// Deterministic English-like text: documents of templated sentences over
/// a fixed word list, each followed by the end-of-document id.
inline TokenStream synthetic_byte_corpus(std::size_t n_tokens, std::uint64_t seed = 7) {
  static const std::vector<std::string_view> det{"the", "a", "every", "some", "this", "that", "no", "each"};
  static const std::vector<std::string_view> adj{
      "small", "large", "quiet", "bright", "old", "new", "green", "heavy", "quick", "slow", "warm", "cold",
      "narrow", "wide", "clever", "simple", "dense", "sparse", "early", "late"};
  static const std::vector<std::string_view> noun{
      "river", "model", "garden", "teacher", "engine", "window", "market", "letter", "forest", "signal",
      "village", "matrix", "student", "bridge", "station", "kernel", "harbor", "record", "machine", "story",
      "layer", "mountain", "question", "network", "painter", "lantern", "ocean", "table", "farmer", "city"};
  static const std::vector<std::string_view> verb{
      "sees", "builds", "follows", "carries", "finds", "moves", "opens", "writes", "trains", "watches",
      "measures", "crosses", "paints", "reads", "holds", "answers", "computes", "visits", "repairs", "keeps"};
  static const std::vector<std::string_view> prep{"near", "under", "behind", "beside", "across", "inside", "above", "beyond"};
  static const std::vector<std::string_view> conj{"and then", "because", "while", "although", "so"};

  Rng rng(seed);
  // Zipf-like preference for low indices.
  auto pick = [&](const std::vector<std::string_view>& words) {
    const double u = rng.uniform();
    return words[static_cast<std::size_t>(static_cast<double>(words.size()) * u * u)];
  };
  auto phrase = [&](std::string& s) {
    s += pick(det);
    s += ' ';
    if (rng.uniform() < 0.5) {
      s += pick(adj);
      s += ' ';
    }
    s += pick(noun);
  };

  std::vector<Token> out;
  out.reserve(n_tokens);
  std::string doc;
  while (out.size() < n_tokens) {
    doc.clear();
    const std::size_t sentences = 3 + rng.below(8);
    for (std::size_t k = 0; k < sentences; ++k) {
      std::string s;
      phrase(s);
      s += ' ';
      s += pick(verb);
      s += ' ';
      phrase(s);
      if (rng.uniform() < 0.4) {
        s += ' ';
        s += pick(prep);
        s += ' ';
        phrase(s);
      }
      if (rng.uniform() < 0.25) {
        s += ' ';
        s += pick(conj);
        s += ' ';
        phrase(s);
        s += ' ';
        s += pick(verb);
      }
      s[0] = static_cast<char>(s[0] - 'a' + 'A');
      s += rng.uniform() < 0.1 ? "? " : ". ";
      doc += s;
    }
    doc.back() = '\n';
    for (char ch : doc) {
      if (out.size() == n_tokens) break;
      out.push_back(static_cast<Token>(static_cast<unsigned char>(ch)));
    }
    if (out.size() < n_tokens) out.push_back(kByteEos);
  }
  return TokenStream(std::move(out), 2);
}

}  // namespace sffn
