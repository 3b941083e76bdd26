#include "rope_probe/snapshot_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fmt/format.h>
#include <fstream>
#include <iterator>
#include <limits>
#include <json.hpp>

#include "rope_probe/errors.hpp"

namespace rope_probe::io {

using nlohmann::json;

std::string_view kind_tag(RecordKind kind) {
  switch (kind) {
    case RecordKind::kEmbedding: return "EMB ";
    case RecordKind::kQkv: return "QKV ";
    case RecordKind::kAttention: return "ATTN";
  }
  return "????";
}

namespace {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(std::string_view s) {
    for (char c : s) out_.push_back(static_cast<std::byte>(c));
  }
  std::size_t size() const { return out_.size(); }
  std::vector<std::byte>& bytes() { return out_; }

 private:
  std::vector<std::byte> out_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::byte> bytes, std::size_t base) : bytes_(bytes), base_(base) {}

  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, std::string_view what) const {
    if (remaining() < n) {
      throw FormatError(fmt::format("truncated {} at byte offset {}: need {} bytes, {} available", what,
                                    offset(), n, remaining()));
    }
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::to_integer<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::to_integer<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  void skip(std::size_t n) {
    need(n, "bytes");
    pos_ += n;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n, "bytes");
    std::string s(n, '\0');
    std::memcpy(s.data(), bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::byte> bytes_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

RecordKind kind_of(const Record& r) {
  if (std::holds_alternative<EmbRecord>(r)) return RecordKind::kEmbedding;
  if (std::holds_alternative<QkvRecord>(r)) return RecordKind::kQkv;
  return RecordKind::kAttention;
}

void encode_payload(ByteWriter& w, const Record& record) {
  if (const auto* r = std::get_if<QkvRecord>(&record)) {
    const std::size_t sd = std::size_t{r->s} * r->d;
    if (r->q.size() != r->d || r->keys.size() != sd || r->values.size() != sd || r->positions.size() != r->s) {
      throw FormatError("QKV record arrays do not match (s, d)");
    }
    w.u32(r->s);
    w.u32(r->d);
    for (float x : r->q) w.f32(x);
    for (float x : r->keys) w.f32(x);
    for (float x : r->values) w.f32(x);
    for (auto p : r->positions) w.u32(p);
  } else if (const auto* r = std::get_if<AttnRecord>(&record)) {
    if (r->rows.size() != std::size_t{r->n_rows} * r->seq_len) {
      throw FormatError("ATTN record rows do not match (n_rows, seq_len)");
    }
    w.u32(r->n_rows);
    w.u32(r->seq_len);
    for (auto s : r->spans) w.u32(s);
    for (float x : r->rows) w.f32(x);
  } else {
    const auto& e = std::get<EmbRecord>(record);
    const std::size_t nd = std::size_t{e.n} * e.d;
    if (e.q.size() != nd || e.k.size() != nd || e.v.size() != nd) {
      throw FormatError("EMB record tables do not match (n, d)");
    }
    w.u32(e.n);
    w.u32(e.d);
    for (double x : e.q) w.f64(x);
    for (double x : e.k) w.f64(x);
    for (double x : e.v) w.f64(x);
  }
}

void check_payload_size(std::uint64_t expected, std::size_t actual, std::size_t offset) {
  if (expected != actual) {
    throw FormatError(fmt::format("record at byte offset {} declares {} bytes but its shape needs {}",
                                  offset, actual, expected));
  }
}

template <typename T>
void require_finite(const std::vector<T>& xs, std::size_t offset) {
  for (auto x : xs) {
    if (!std::isfinite(x)) throw FormatError(fmt::format("non-finite payload in record at byte offset {}", offset));
  }
}

Record decode_payload(RecordKind kind, std::span<const std::byte> payload, std::size_t offset,
                      const ReadOptions& options, std::vector<std::string>& warnings) {
  ByteReader r(payload, offset);
  if (kind == RecordKind::kQkv) {
    QkvRecord rec;
    rec.s = r.u32();
    rec.d = r.u32();
    const std::uint64_t sd = std::uint64_t{rec.s} * rec.d;
    check_payload_size(8 + 4 * (rec.d + 2 * sd) + 4 * std::uint64_t{rec.s}, payload.size(), offset);
    rec.q.resize(rec.d);
    rec.keys.resize(sd);
    rec.values.resize(sd);
    rec.positions.resize(rec.s);
    for (auto& x : rec.q) x = r.f32();
    for (auto& x : rec.keys) x = r.f32();
    for (auto& x : rec.values) x = r.f32();
    for (auto& p : rec.positions) p = r.u32();
    require_finite(rec.q, offset);
    require_finite(rec.keys, offset);
    require_finite(rec.values, offset);
    return rec;
  }
  if (kind == RecordKind::kAttention) {
    AttnRecord rec;
    rec.n_rows = r.u32();
    rec.seq_len = r.u32();
    const std::uint64_t cells = std::uint64_t{rec.n_rows} * rec.seq_len;
    check_payload_size(8 + 20 + 4 * cells, payload.size(), offset);
    for (auto& s : rec.spans) s = r.u32();
    rec.rows.resize(cells);
    for (auto& x : rec.rows) x = r.f32();
    require_finite(rec.rows, offset);
    for (std::uint32_t row = 0; row < rec.n_rows; ++row) {
      double total = 0.0;
      for (std::uint32_t c = 0; c < rec.seq_len; ++c) total += rec.rows[std::size_t{row} * rec.seq_len + c];
      if (std::abs(total - 1.0) > options.row_sum_tolerance) {
        warnings.push_back(fmt::format("record at byte offset {}: row {} sums to {}", offset, row, total));
      }
    }
    return rec;
  }
  EmbRecord rec;
  rec.n = r.u32();
  rec.d = r.u32();
  const std::uint64_t nd = std::uint64_t{rec.n} * rec.d;
  check_payload_size(8 + 24 * nd, payload.size(), offset);
  for (auto* t : {&rec.q, &rec.k, &rec.v}) {
    t->resize(nd);
    for (auto& x : *t) x = r.f64();
    require_finite(*t, offset);
  }
  return rec;
}

}  // namespace

std::vector<std::byte> encode(const Container& container) {
  ByteWriter w;
  w.raw(std::string_view(kMagic.data(), kMagic.size()));
  w.u32(kFormatVersion);
  w.raw(kind_tag(container.kind));
  w.u32(static_cast<std::uint32_t>(container.metadata.size()));
  w.raw(container.metadata);
  for (const auto& record : container.records) {
    if (kind_of(record) != container.kind) {
      throw FormatError(fmt::format("record of kind '{}' in a '{}' container", kind_tag(kind_of(record)),
                                    kind_tag(container.kind)));
    }
    ByteWriter payload;
    encode_payload(payload, record);
    if (payload.size() > std::numeric_limits<std::uint32_t>::max()) {
      throw FormatError("record exceeds the 4 GiB payload limit");
    }
    w.u32(static_cast<std::uint32_t>(payload.size()));
    auto& bytes = w.bytes();
    bytes.insert(bytes.end(), payload.bytes().begin(), payload.bytes().end());
  }
  return std::move(w.bytes());
}

ReadResult decode(std::span<const std::byte> bytes, const ReadOptions& options) {
  ReadResult result;
  ByteReader r(bytes, 0);
  r.need(kMagic.size(), "magic");
  const std::string magic = r.raw(kMagic.size());
  if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0) {
    throw FormatError("bad magic: not a snapshot container");
  }
  const std::uint32_t version = r.u32();
  if (version != kFormatVersion) {
    throw FormatError(fmt::format("unsupported container version {} (expected {})", version, kFormatVersion));
  }
  const std::string tag = r.raw(4);
  Container& c = result.container;
  if (tag == "EMB ") {
    c.kind = RecordKind::kEmbedding;
  } else if (tag == "QKV ") {
    c.kind = RecordKind::kQkv;
  } else if (tag == "ATTN") {
    c.kind = RecordKind::kAttention;
  } else {
    throw FormatError(fmt::format("unknown record kind '{}'", tag));
  }
  const std::uint32_t meta_len = r.u32();
  if (meta_len > options.allocation_cap) throw FormatError("metadata length exceeds allocation cap");
  r.need(meta_len, "metadata");
  c.metadata = r.raw(meta_len);
  if (!json::accept(c.metadata)) throw FormatError("metadata is not valid JSON");

  while (r.remaining() > 0) {
    const std::size_t record_offset = r.offset();
    const std::uint32_t len = r.u32();
    if (len > options.allocation_cap) {
      throw FormatError(fmt::format("record at byte offset {} declares {} bytes, above the {} byte cap",
                                    record_offset, len, options.allocation_cap));
    }
    r.need(len, "record");
    const std::size_t payload_offset = r.offset();
    c.records.push_back(decode_payload(c.kind, bytes.subspan(payload_offset, len), payload_offset,
                                       options, result.warnings));
    r.skip(len);
  }
  return result;
}

void write_snapshots(const std::filesystem::path& path, const Container& container) {
  const auto bytes = encode(container);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(fmt::format("write to '{}' failed", path.string()));
}

ReadResult read_snapshots(const std::filesystem::path& path, const ReadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());
  try {
    return decode(bytes, options);
  } catch (const FormatError& e) {
    throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

namespace {

json parse_metadata(const Container& c) {
  json meta = json::parse(c.metadata, nullptr, false);
  if (meta.is_discarded() || !meta.is_object()) throw FormatError("metadata must be a JSON object");
  return meta;
}

template <typename T>
T meta_or(const json& meta, const char* key, T fallback) {
  if (!meta.contains(key)) return fallback;
  try {
    return meta.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("metadata field '{}': {}", key, e.what()));
  }
}

void require_kind(const Container& c, RecordKind kind) {
  if (c.kind != kind) {
    throw FormatError(fmt::format("expected a '{}' container, got '{}'", kind_tag(kind), kind_tag(c.kind)));
  }
}

std::uint32_t narrow_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw FormatError(fmt::format("{} does not fit in u32", what));
  return static_cast<std::uint32_t>(v);
}

std::vector<float> to_f32(std::span<const double> xs) {
  std::vector<float> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = static_cast<float>(xs[i]);
  return out;
}

std::vector<double> to_f64(const std::vector<float>& xs) { return {xs.begin(), xs.end()}; }

}  // namespace

Container make_qkv_container(const SnapshotHead& head) {
  json meta = {{"model", head.info.model},
               {"layer", head.info.layer},
               {"head", head.info.head},
               {"dim", head.info.dim},
               {"layout", to_string(head.info.layout)},
               {"rope", head.info.rope},
               {"rope_base", head.info.rope_base},
               {"scale", to_string(head.info.scale)}};
  json query_positions = json::array();
  Container c{RecordKind::kQkv, {}, {}};
  for (const auto& s : head.snapshots) {
    QkvRecord rec;
    rec.s = narrow_u32(s.keys.rows(), "key count");
    rec.d = narrow_u32(s.q.size(), "head dim");
    rec.q = to_f32(s.q);
    rec.keys = to_f32(s.keys.data());
    rec.values = to_f32(s.values.data());
    for (auto p : s.positions) {
      if (p < 0) throw FormatError("negative position");
      rec.positions.push_back(narrow_u32(static_cast<std::size_t>(p), "position"));
    }
    query_positions.push_back(s.query_position);
    c.records.emplace_back(std::move(rec));
  }
  meta["query_positions"] = std::move(query_positions);
  c.metadata = meta.dump();
  return c;
}

SnapshotHead to_snapshot_head(const Container& container) {
  require_kind(container, RecordKind::kQkv);
  const json meta = parse_metadata(container);
  SnapshotHead head;
  head.info.model = meta_or<std::string>(meta, "model", "unknown");
  head.info.layer = meta_or<int>(meta, "layer", 0);
  head.info.head = meta_or<int>(meta, "head", 0);
  head.info.dim = meta_or<std::size_t>(meta, "dim", 0);
  head.info.rope = meta_or<bool>(meta, "rope", true);
  head.info.rope_base = meta_or<double>(meta, "rope_base", 10000.0);
  try {
    head.info.layout = parse_layout(meta_or<std::string>(meta, "layout", "half-split"));
    head.info.scale = parse_scale_mode(meta_or<std::string>(meta, "scale", "inv-sqrt"));
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  const auto query_positions = meta_or<std::vector<std::int64_t>>(meta, "query_positions", {});
  if (!query_positions.empty() && query_positions.size() != container.records.size()) {
    throw FormatError("query_positions length differs from record count");
  }
  for (std::size_t i = 0; i < container.records.size(); ++i) {
    const auto& rec = std::get<QkvRecord>(container.records[i]);
    if (head.info.dim == 0) head.info.dim = rec.d;
    if (rec.d != head.info.dim) {
      throw FormatError(fmt::format("record {} has d = {} but the head has {}", i, rec.d, head.info.dim));
    }
    if (rec.s == 0) throw FormatError(fmt::format("record {} has no keys", i));
    AttentionSnapshot s;
    s.q = to_f64(rec.q);
    s.keys = Tensor({rec.s, rec.d}, to_f64(rec.keys));
    s.values = Tensor({rec.s, rec.d}, to_f64(rec.values));
    s.positions.assign(rec.positions.begin(), rec.positions.end());
    s.query_position = query_positions.empty() ? 0 : query_positions[i];
    head.snapshots.push_back(std::move(s));
  }
  return head;
}

Container make_attn_container(const std::vector<AttentionRecord>& records, const std::string& model) {
  Container c{RecordKind::kAttention, {}, {}};
  const int layer = records.empty() ? 0 : records.front().layer;
  const int head = records.empty() ? 0 : records.front().head;
  for (const auto& rec : records) {
    if (rec.layer != layer || rec.head != head) throw FormatError("ATTN container holds one head");
    rec.validate();
    AttnRecord out;
    out.n_rows = narrow_u32(rec.rows.rows(), "row count");
    out.seq_len = narrow_u32(rec.rows.cols(), "sequence length");
    out.spans = rec.spans.as_array();
    out.rows = to_f32(rec.rows.data());
    c.records.emplace_back(std::move(out));
  }
  c.metadata = json{{"model", model}, {"layer", layer}, {"head", head}}.dump();
  return c;
}

std::vector<AttentionRecord> to_attention_records(const Container& container) {
  require_kind(container, RecordKind::kAttention);
  const json meta = parse_metadata(container);
  const int layer = meta_or<int>(meta, "layer", 0);
  const int head = meta_or<int>(meta, "head", 0);
  std::vector<AttentionRecord> out;
  for (const auto& r : container.records) {
    const auto& rec = std::get<AttnRecord>(r);
    AttentionRecord a;
    a.layer = layer;
    a.head = head;
    a.rows = Tensor({rec.n_rows, rec.seq_len}, to_f64(rec.rows));
    a.spans = {rec.spans[0], rec.spans[1], rec.spans[2], rec.spans[3], rec.spans[4]};
    a.validate();
    out.push_back(std::move(a));
  }
  return out;
}

Container make_embedding_container(const EmbeddingStore& store, const TaskConfig& config) {
  store.validate();
  json meta = {{"n", config.n},
               {"dim", config.dim},
               {"subset_size", config.subset_size},
               {"max_position", config.max_position},
               {"batch_size", config.batch_size},
               {"learning_rate", config.learning_rate},
               {"samples_per_epoch", config.samples_per_epoch},
               {"epochs", config.epochs},
               {"rope", config.rope_enabled},
               {"seed", config.seed},
               {"scale", to_string(config.scale)},
               {"rope_base", config.rope_base},
               {"layout", to_string(config.layout)},
               {"epoch_unit", config.epoch_unit == EpochUnit::kSteps ? "steps" : "episodes"},
               {"optimizer", config.optimizer == OptimizerKind::kSgd ? "sgd" : "adam"}};
  EmbRecord rec;
  rec.n = narrow_u32(store.size(), "tuple count");
  rec.d = narrow_u32(store.dim(), "dim");
  rec.q = store.q.storage();
  rec.k = store.k.storage();
  rec.v = store.v.storage();
  return Container{RecordKind::kEmbedding, meta.dump(), {std::move(rec)}};
}

EmbeddingStore to_embedding_store(const Container& container) {
  require_kind(container, RecordKind::kEmbedding);
  if (container.records.size() != 1) throw FormatError("EMB container must hold exactly one record");
  const auto& rec = std::get<EmbRecord>(container.records.front());
  EmbeddingStore store;
  store.q = Tensor({rec.n, rec.d}, rec.q);
  store.k = Tensor({rec.n, rec.d}, rec.k);
  store.v = Tensor({rec.n, rec.d}, rec.v);
  return store;
}

TaskConfig checkpoint_config(const Container& container) {
  require_kind(container, RecordKind::kEmbedding);
  const json meta = parse_metadata(container);
  TaskConfig c;
  c.n = meta_or<std::size_t>(meta, "n", c.n);
  c.dim = meta_or<std::size_t>(meta, "dim", c.dim);
  c.subset_size = meta_or<std::size_t>(meta, "subset_size", c.subset_size);
  c.max_position = meta_or<std::int64_t>(meta, "max_position", c.max_position);
  c.batch_size = meta_or<std::size_t>(meta, "batch_size", c.batch_size);
  c.learning_rate = meta_or<double>(meta, "learning_rate", c.learning_rate);
  c.samples_per_epoch = meta_or<std::size_t>(meta, "samples_per_epoch", c.samples_per_epoch);
  c.epochs = meta_or<std::size_t>(meta, "epochs", c.epochs);
  c.rope_enabled = meta_or<bool>(meta, "rope", c.rope_enabled);
  c.seed = meta_or<std::uint64_t>(meta, "seed", c.seed);
  c.rope_base = meta_or<double>(meta, "rope_base", c.rope_base);
  try {
    c.scale = parse_scale_mode(meta_or<std::string>(meta, "scale", "inv-sqrt"));
    c.layout = parse_layout(meta_or<std::string>(meta, "layout", "half-split"));
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  c.epoch_unit = meta_or<std::string>(meta, "epoch_unit", "episodes") == "steps" ? EpochUnit::kSteps
                                                                                  : EpochUnit::kEpisodes;
  c.optimizer = meta_or<std::string>(meta, "optimizer", "adam") == "sgd" ? OptimizerKind::kSgd
                                                                         : OptimizerKind::kAdam;
  return c;
}

}  // namespace rope_probe::io
