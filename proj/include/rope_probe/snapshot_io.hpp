#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "rope_probe/snapshot.hpp"
#include "rope_probe/toy_task.hpp"

// Binary interchange container:
//
//   "RPRB1\0"  magic, 6 bytes
//   u32        format version (= 1)
//   char[4]    record kind: "EMB ", "QKV ", "ATTN"
//   u32        metadata length, then that many bytes of UTF-8 JSON
//   repeated until EOF:
//     u32      record payload length in bytes
//     payload
//
// All integers and floats little-endian.
//   QKV  payload: u32 s, u32 d, f32 q[d], f32 K[s*d], f32 V[s*d], u32 positions[s]
//   ATTN payload: u32 n_rows, u32 seq_len, u32 spans[5], f32 rows[n_rows*seq_len]
//   EMB  payload: u32 n, u32 d, f64 Q[n*d], f64 K[n*d], f64 V[n*d]
namespace rope_probe::io {

inline constexpr std::array<char, 6> kMagic = {'R', 'P', 'R', 'B', '1', '\0'};
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kDefaultAllocationCap = std::size_t{1} << 30;

enum class RecordKind : std::uint8_t { kEmbedding, kQkv, kAttention };

std::string_view kind_tag(RecordKind kind);

struct QkvRecord {
  std::uint32_t s = 0;
  std::uint32_t d = 0;
  std::vector<float> q;
  std::vector<float> keys;
  std::vector<float> values;
  std::vector<std::uint32_t> positions;
};

struct AttnRecord {
  std::uint32_t n_rows = 0;
  std::uint32_t seq_len = 0;
  std::array<std::uint32_t, 5> spans{};
  std::vector<float> rows;
};

struct EmbRecord {
  std::uint32_t n = 0;
  std::uint32_t d = 0;
  std::vector<double> q;
  std::vector<double> k;
  std::vector<double> v;
};

using Record = std::variant<EmbRecord, QkvRecord, AttnRecord>;

struct Container {
  RecordKind kind = RecordKind::kQkv;
  std::string metadata = "{}";  // raw JSON text, preserved byte-for-byte
  std::vector<Record> records;
};

struct ReadOptions {
  std::size_t allocation_cap = kDefaultAllocationCap;
  double row_sum_tolerance = 1e-3;
};

struct ReadResult {
  Container container;
  std::vector<std::string> warnings;  // e.g. attention rows not summing to 1
};

std::vector<std::byte> encode(const Container& container);
ReadResult decode(std::span<const std::byte> bytes, const ReadOptions& options = {});

// Throws FormatError on mixed record kinds, IoError if the file cannot be written.
void write_snapshots(const std::filesystem::path& path, const Container& container);
// Throws IoError if unreadable, FormatError on any validation failure.
ReadResult read_snapshots(const std::filesystem::path& path, const ReadOptions& options = {});

// Typed conversions between records and analysis types.
Container make_qkv_container(const SnapshotHead& head);
SnapshotHead to_snapshot_head(const Container& container);

Container make_attn_container(const std::vector<AttentionRecord>& records, const std::string& model);
std::vector<AttentionRecord> to_attention_records(const Container& container);

Container make_embedding_container(const EmbeddingStore& store, const TaskConfig& config);
EmbeddingStore to_embedding_store(const Container& container);
// Recovers the task settings saved alongside a checkpoint.
TaskConfig checkpoint_config(const Container& container);

}  // namespace rope_probe::io
