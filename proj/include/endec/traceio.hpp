#pragma once

// SPDX-License-Identifier: Apache-2.0

/**
 * @file traceio.hpp
 * @brief Binary layer-logit trace format ("LLTRACE1").
 *
 * A trace stores, for every generation step, the vocabulary logits produced
 * by projecting a set of captured layers through the model's output head.
 * The byte layout is documented in docs/trace-format.md. All integers and
 * floats are little-endian; the writer is deterministic (same trace, same
 * bytes).
 *
 * The last captured layer is the model's final layer.
 */

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace endec::trace {

inline constexpr std::array<char, 8> kMagic = {'L', 'L', 'T', 'R', 'A', 'C', 'E', '1'};
inline constexpr std::uint16_t kVersion = 1;
/// Sentinel context length marking "no context recorded".
inline constexpr std::uint32_t kNoContext = 0xFFFFFFFFu;
/// Fixed part of the header, before tokenizer id and layer indices.
inline constexpr std::size_t kFixedHeaderBytes = 36;
/// Per-step framing before the payload: step index (u64) + context length (u32).
inline constexpr std::size_t kStepFramingBytes = 12;

enum class Encoding : std::uint8_t { dense_f32 = 0, topk_sparse = 1 };

struct TraceHeader {
  std::uint16_t version = kVersion;
  std::uint32_t vocab_size = 0;
  std::vector<std::uint16_t> layer_indices;  // ascending; back() is the final layer
  Encoding encoding = Encoding::dense_f32;
  std::uint32_t topk = 0;
  std::string tokenizer_id;
  std::uint64_t step_count = 0;

  std::size_t num_layers() const noexcept { return layer_indices.size(); }
  std::uint16_t final_layer() const { return layer_indices.back(); }
  /// Position of a model layer index among the captured layers, if captured.
  std::optional<std::size_t> position_of(std::uint16_t layer) const noexcept;
  /// Entries per layer row in a step payload (V when dense, topk when sparse).
  std::size_t row_width() const noexcept;
  /// Serialized size of the header in bytes.
  std::size_t encoded_size() const noexcept;
  /// Serialized size of a step record with the given context length.
  std::size_t step_encoded_size(std::optional<std::size_t> context_len) const noexcept;

  /// Throws InvalidTrace when an invariant does not hold.
  void validate() const;

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

struct SparseEntry {
  std::uint32_t token = 0;
  float logit = 0.0f;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

struct StepRecord {
  std::uint64_t step_index = 0;
  std::optional<std::vector<std::uint32_t>> context_token_ids;
  /// dense_f32: num_layers * V logits, layer-major.
  std::vector<float> dense;
  /// topk_sparse: num_layers * topk entries, layer-major, sorted by token per layer.
  std::vector<SparseEntry> sparse;

  std::span<const float> dense_row(const TraceHeader& header, std::size_t position) const;
  std::span<const SparseEntry> sparse_row(const TraceHeader& header, std::size_t position) const;

  /// Throws InvalidTrace when the record does not fit the header.
  void validate(const TraceHeader& header) const;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

struct LayerTrace {
  TraceHeader header;
  std::vector<StepRecord> steps;

  void validate() const;

  friend bool operator==(const LayerTrace&, const LayerTrace&) = default;
};

/// Expands a sparse record to num_layers * V logits; unlisted entries get `fill`.
/// Throws InvalidInput when the header is not topk_sparse.
std::vector<float> densify(const StepRecord& record, const TraceHeader& header, float fill);

/// Logits of one captured layer (by position) as a dense row of length V.
/// Sparse rows are expanded with `fill`.
std::vector<float> layer_logits(const StepRecord& record, const TraceHeader& header,
                                std::size_t position, float fill);

/// Streams a trace header followed by step records to an output stream.
class TraceWriter {
 public:
  /// Validates and writes the header immediately.
  TraceWriter(std::ostream& sink, TraceHeader header);

  void write_step(const StepRecord& record);
  /// Checks that header.step_count records were written; returns total bytes.
  std::uint64_t finish();

  std::uint64_t bytes_written() const noexcept { return bytes_; }
  const TraceHeader& header() const noexcept { return header_; }

 private:
  void put(const void* data, std::size_t n);

  std::ostream& sink_;
  TraceHeader header_;
  std::uint64_t steps_written_ = 0;
  std::uint64_t bytes_ = 0;
  std::vector<unsigned char> scratch_;
};

/// Reads a trace one step at a time; memory is bounded by a single record.
class TraceReader {
 public:
  /// Reads and validates the header.
  explicit TraceReader(std::istream& source);

  const TraceHeader& header() const noexcept { return header_; }
  /// Next record, or nullopt after header.step_count records.
  std::optional<StepRecord> next();
  std::uint64_t steps_read() const noexcept { return steps_read_; }

 private:
  void get(void* data, std::size_t n, const char* what);

  std::istream& source_;
  TraceHeader header_;
  std::uint64_t steps_read_ = 0;
  std::vector<unsigned char> scratch_;
};

std::uint64_t write_trace(const LayerTrace& trace, std::ostream& sink);
LayerTrace read_trace(std::istream& source);

void write_trace_file(const LayerTrace& trace, const std::string& path);
LayerTrace read_trace_file(const std::string& path);

/// Convenience: serialize to an in-memory byte string.
std::string to_bytes(const LayerTrace& trace);
LayerTrace from_bytes(const std::string& bytes);

const char* to_string(Encoding encoding) noexcept;

}  // namespace endec::trace
