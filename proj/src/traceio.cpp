// SPDX-License-Identifier: Apache-2.0

#include "endec/traceio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "endec/errors.hpp"

namespace endec::trace {

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

constexpr std::size_t kMaxTokenizerIdBytes = 1u << 16;
// Large payloads are read in pieces so a corrupted size field fails on the
// short read instead of on a giant allocation.
constexpr std::size_t kReadChunkBytes = 1u << 20;

// --- little-endian encoding ---------------------------------------------------

class ByteSink {
 public:
  explicit ByteSink(std::vector<unsigned char>& buf) : buf_(buf) { buf_.clear(); }

  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }

 private:
  std::vector<unsigned char>& buf_;
};

std::uint16_t load_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
std::uint32_t load_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
std::uint64_t load_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
float load_f32(const unsigned char* p) { return std::bit_cast<float>(load_u32(p)); }

bool all_finite(std::span<const float> xs) {
  return std::all_of(xs.begin(), xs.end(), [](float v) { return std::isfinite(v); });
}

}  // namespace

// --- header -------------------------------------------------------------------

std::optional<std::size_t> TraceHeader::position_of(std::uint16_t layer) const noexcept {
  const auto it = std::lower_bound(layer_indices.begin(), layer_indices.end(), layer);
  if (it == layer_indices.end() || *it != layer) return std::nullopt;
  return static_cast<std::size_t>(it - layer_indices.begin());
}

std::size_t TraceHeader::row_width() const noexcept {
  return encoding == Encoding::dense_f32 ? vocab_size : topk;
}

std::size_t TraceHeader::encoded_size() const noexcept {
  return kFixedHeaderBytes + tokenizer_id.size() + 2 * layer_indices.size();
}

std::size_t TraceHeader::step_encoded_size(std::optional<std::size_t> context_len) const noexcept {
  const std::size_t entry = encoding == Encoding::dense_f32 ? 4 : 8;
  return kStepFramingBytes + 4 * context_len.value_or(0) + num_layers() * row_width() * entry;
}

void TraceHeader::validate() const {
  if (version != kVersion) throw InvalidTrace("unsupported version " + std::to_string(version));
  if (vocab_size == 0) throw InvalidTrace("vocab_size must be positive");
  if (layer_indices.empty()) throw InvalidTrace("at least one layer (the final layer) must be captured");
  if (layer_indices.size() > 0xFFFFu) throw InvalidTrace("too many layers");
  for (std::size_t i = 1; i < layer_indices.size(); ++i) {
    if (layer_indices[i] <= layer_indices[i - 1]) {
      throw InvalidTrace("layer_indices must be strictly ascending");
    }
  }
  if (encoding == Encoding::topk_sparse) {
    if (topk == 0) throw InvalidTrace("topk_sparse encoding requires topk >= 1");
    if (topk > vocab_size) throw InvalidTrace("topk exceeds vocab_size");
  } else if (encoding == Encoding::dense_f32) {
    if (topk != 0) throw InvalidTrace("dense_f32 encoding requires topk == 0");
  } else {
    throw InvalidTrace("unknown encoding");
  }
  if (tokenizer_id.size() > kMaxTokenizerIdBytes) throw InvalidTrace("tokenizer_id too long");
}

// --- records ------------------------------------------------------------------

std::span<const float> StepRecord::dense_row(const TraceHeader& header, std::size_t position) const {
  const std::size_t v = header.vocab_size;
  return std::span<const float>(dense).subspan(position * v, v);
}

std::span<const SparseEntry> StepRecord::sparse_row(const TraceHeader& header,
                                                    std::size_t position) const {
  const std::size_t k = header.topk;
  return std::span<const SparseEntry>(sparse).subspan(position * k, k);
}

void StepRecord::validate(const TraceHeader& header) const {
  const std::size_t cells = header.num_layers() * header.row_width();
  if (header.encoding == Encoding::dense_f32) {
    if (dense.size() != cells || !sparse.empty()) {
      throw InvalidTrace("dense payload must hold num_layers * vocab_size logits");
    }
    if (!all_finite(dense)) throw InvalidTrace("non-finite logit in dense payload");
  } else {
    if (sparse.size() != cells || !dense.empty()) {
      throw InvalidTrace("sparse payload must hold num_layers * topk entries");
    }
    for (std::size_t pos = 0; pos < header.num_layers(); ++pos) {
      const auto row = sparse_row(header, pos);
      for (std::size_t i = 0; i < row.size(); ++i) {
        if (row[i].token >= header.vocab_size) throw InvalidTrace("sparse token id out of range");
        if (!std::isfinite(row[i].logit)) throw InvalidTrace("non-finite logit in sparse payload");
        if (i > 0 && row[i].token <= row[i - 1].token) {
          throw InvalidTrace("sparse entries must be sorted by unique token id");
        }
      }
    }
  }
  if (context_token_ids && context_token_ids->size() >= kNoContext) {
    throw InvalidTrace("context too long");
  }
}

void LayerTrace::validate() const {
  header.validate();
  if (steps.size() != header.step_count) {
    throw InvalidTrace("step_count " + std::to_string(header.step_count) + " but " +
                       std::to_string(steps.size()) + " steps present");
  }
  for (std::size_t i = 0; i < steps.size(); ++i) {
    try {
      steps[i].validate(header);
    } catch (Error& e) {
      e.set_step(i);
      throw;
    }
  }
}

std::vector<float> densify(const StepRecord& record, const TraceHeader& header, float fill) {
  if (header.encoding != Encoding::topk_sparse) {
    throw InvalidInput("densify requires a topk_sparse trace");
  }
  const std::size_t v = header.vocab_size;
  std::vector<float> out(header.num_layers() * v, fill);
  for (std::size_t pos = 0; pos < header.num_layers(); ++pos) {
    for (const SparseEntry& e : record.sparse_row(header, pos)) out[pos * v + e.token] = e.logit;
  }
  return out;
}

std::vector<float> layer_logits(const StepRecord& record, const TraceHeader& header,
                                std::size_t position, float fill) {
  if (header.encoding == Encoding::dense_f32) {
    const auto row = record.dense_row(header, position);
    return {row.begin(), row.end()};
  }
  std::vector<float> out(header.vocab_size, fill);
  for (const SparseEntry& e : record.sparse_row(header, position)) out[e.token] = e.logit;
  return out;
}

// --- writer -------------------------------------------------------------------

TraceWriter::TraceWriter(std::ostream& sink, TraceHeader header)
    : sink_(sink), header_(std::move(header)) {
  header_.validate();
  ByteSink out(scratch_);
  out.bytes(kMagic.data(), kMagic.size());
  out.u16(header_.version);
  out.u8(static_cast<std::uint8_t>(header_.encoding));
  out.u8(0);
  out.u32(header_.vocab_size);
  out.u16(static_cast<std::uint16_t>(header_.num_layers()));
  out.u16(0);
  out.u32(header_.topk);
  out.u64(header_.step_count);
  out.u32(static_cast<std::uint32_t>(header_.tokenizer_id.size()));
  out.bytes(header_.tokenizer_id.data(), header_.tokenizer_id.size());
  for (const std::uint16_t l : header_.layer_indices) out.u16(l);
  put(scratch_.data(), scratch_.size());
}

void TraceWriter::put(const void* data, std::size_t n) {
  sink_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!sink_) throw IoError("write failed after " + std::to_string(bytes_) + " bytes");
  bytes_ += n;
}

void TraceWriter::write_step(const StepRecord& record) {
  if (steps_written_ >= header_.step_count) {
    throw InvalidTrace("more steps written than header.step_count", steps_written_);
  }
  try {
    record.validate(header_);
  } catch (Error& e) {
    e.set_step(steps_written_);
    throw;
  }
  ByteSink out(scratch_);
  out.u64(record.step_index);
  if (record.context_token_ids) {
    out.u32(static_cast<std::uint32_t>(record.context_token_ids->size()));
    for (const std::uint32_t t : *record.context_token_ids) out.u32(t);
  } else {
    out.u32(kNoContext);
  }
  if (header_.encoding == Encoding::dense_f32) {
    if constexpr (std::endian::native == std::endian::little) {
      out.bytes(record.dense.data(), record.dense.size() * sizeof(float));
    } else {
      for (const float f : record.dense) out.f32(f);
    }
  } else {
    for (const SparseEntry& e : record.sparse) {
      out.u32(e.token);
      out.f32(e.logit);
    }
  }
  put(scratch_.data(), scratch_.size());
  ++steps_written_;
}

std::uint64_t TraceWriter::finish() {
  if (steps_written_ != header_.step_count) {
    throw InvalidTrace("header declares " + std::to_string(header_.step_count) + " steps but " +
                       std::to_string(steps_written_) + " were written");
  }
  sink_.flush();
  if (!sink_) throw IoError("flush failed");
  return bytes_;
}

// --- reader -------------------------------------------------------------------

void TraceReader::get(void* data, std::size_t n, const char* what) {
  source_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(source_.gcount()) != n) {
    throw TruncatedError(std::string("unexpected end of data while reading ") + what);
  }
}

TraceReader::TraceReader(std::istream& source) : source_(source) {
  unsigned char fixed[kFixedHeaderBytes];
  source_.read(reinterpret_cast<char*>(fixed), 8);
  if (source_.gcount() != 8) throw TruncatedError("unexpected end of data while reading magic");
  if (std::memcmp(fixed, kMagic.data(), kMagic.size()) != 0) {
    throw FormatError("bad magic, not an LLTRACE1 file");
  }
  get(fixed + 8, 2, "header");
  header_.version = load_u16(fixed + 8);
  if (header_.version != kVersion) {
    throw VersionError("unsupported trace version " + std::to_string(header_.version));
  }
  get(fixed + 10, kFixedHeaderBytes - 10, "header");
  const std::uint8_t encoding = fixed[10];
  if (encoding > 1) throw FormatError("unknown encoding " + std::to_string(encoding));
  if (fixed[11] != 0 || load_u16(fixed + 18) != 0) throw FormatError("reserved header bytes set");
  header_.encoding = static_cast<Encoding>(encoding);
  header_.vocab_size = load_u32(fixed + 12);
  const std::uint16_t num_layers = load_u16(fixed + 16);
  header_.topk = load_u32(fixed + 20);
  header_.step_count = load_u64(fixed + 24);
  const std::uint32_t tok_len = load_u32(fixed + 32);
  if (tok_len > kMaxTokenizerIdBytes) throw FormatError("tokenizer_id length out of range");
  header_.tokenizer_id.resize(tok_len);
  if (tok_len > 0) get(header_.tokenizer_id.data(), tok_len, "tokenizer id");
  scratch_.resize(2 * static_cast<std::size_t>(num_layers));
  if (num_layers > 0) get(scratch_.data(), scratch_.size(), "layer indices");
  header_.layer_indices.resize(num_layers);
  for (std::size_t i = 0; i < num_layers; ++i) header_.layer_indices[i] = load_u16(&scratch_[2 * i]);
  try {
    header_.validate();
  } catch (const InvalidTrace& e) {
    throw FormatError("invalid header: " + e.message());
  }
}

std::optional<StepRecord> TraceReader::next() {
  if (steps_read_ >= header_.step_count) return std::nullopt;
  const std::uint64_t ordinal = steps_read_;
  StepRecord rec;
  try {
    unsigned char framing[kStepFramingBytes];
    get(framing, sizeof framing, "step framing");
    rec.step_index = load_u64(framing);
    const std::uint32_t ctx = load_u32(framing + 8);
    if (ctx != kNoContext) {
      std::vector<std::uint32_t> ids;
      std::size_t remaining = ctx;
      while (remaining > 0) {
        const std::size_t n = std::min(remaining, kReadChunkBytes / 4);
        scratch_.resize(4 * n);
        get(scratch_.data(), scratch_.size(), "context token ids");
        for (std::size_t i = 0; i < n; ++i) ids.push_back(load_u32(&scratch_[4 * i]));
        remaining -= n;
      }
      rec.context_token_ids = std::move(ids);
    }
    const std::size_t cells = header_.num_layers() * header_.row_width();
    const std::size_t entry = header_.encoding == Encoding::dense_f32 ? 4 : 8;
    const std::size_t per_chunk = kReadChunkBytes / entry;
    std::size_t done = 0;
    while (done < cells) {
      const std::size_t n = std::min(cells - done, per_chunk);
      scratch_.resize(n * entry);
      get(scratch_.data(), scratch_.size(), "logit payload");
      if (header_.encoding == Encoding::dense_f32) {
        for (std::size_t i = 0; i < n; ++i) rec.dense.push_back(load_f32(&scratch_[4 * i]));
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          rec.sparse.push_back({load_u32(&scratch_[8 * i]), load_f32(&scratch_[8 * i + 4])});
        }
      }
      done += n;
    }
    try {
      rec.validate(header_);
    } catch (const InvalidTrace& e) {
      throw FormatError("invalid step record: " + e.message());
    }
  } catch (Error& e) {
    e.set_step(ordinal);
    throw;
  }
  ++steps_read_;
  return rec;
}

// --- whole-trace helpers ------------------------------------------------------

std::uint64_t write_trace(const LayerTrace& trace, std::ostream& sink) {
  if (trace.steps.size() != trace.header.step_count) {
    throw InvalidTrace("step_count " + std::to_string(trace.header.step_count) + " but " +
                       std::to_string(trace.steps.size()) + " steps present");
  }
  TraceWriter writer(sink, trace.header);
  for (const StepRecord& s : trace.steps) writer.write_step(s);
  return writer.finish();
}

LayerTrace read_trace(std::istream& source) {
  TraceReader reader(source);
  LayerTrace out;
  out.header = reader.header();
  while (auto rec = reader.next()) out.steps.push_back(std::move(*rec));
  return out;
}

void write_trace_file(const LayerTrace& trace, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  write_trace(trace, f);
}

LayerTrace read_trace_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  return read_trace(f);
}

std::string to_bytes(const LayerTrace& trace) {
  std::ostringstream os(std::ios::binary);
  write_trace(trace, os);
  return std::move(os).str();
}

LayerTrace from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  return read_trace(is);
}

const char* to_string(Encoding encoding) noexcept {
  return encoding == Encoding::dense_f32 ? "dense_f32" : "topk_sparse";
}

}  // namespace endec::trace
