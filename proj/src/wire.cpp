#include "fedoptima/wire.hpp"

#include <bit>
#include <cstring>
#include <limits>

namespace fedoptima {

namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'O', '0', '1'};
constexpr std::uint32_t kMaxRank = 8;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void tensor(const Tensor& t) {
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) f32(v);
  }
  std::vector<std::uint8_t>& bytes() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t remaining() const { return in_.size() - pos_; }
  std::size_t pos() const { return pos_; }

  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  Tensor tensor() {
    const std::uint32_t rank = u32();
    if (rank > kMaxRank) throw WireError("tensor rank " + std::to_string(rank) + " too large");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = u32();
      if (d != 0 && count > std::numeric_limits<std::uint64_t>::max() / d) {
        throw WireError("tensor element count overflows");
      }
      count *= d;
    }
    if (count > remaining() / 4) throw WireError("truncated tensor data");
    std::vector<float> data(count);
    for (auto& v : data) v = std::bit_cast<float>(u32());
    return Tensor(std::move(shape), std::move(data));
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw WireError("truncated frame");
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

bool is_separator(const Tensor& t) { return t.rank() == 1 && t.dim(0) == 0; }

}  // namespace

void append_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
  Writer w;
  w.tensor(t);
  out.insert(out.end(), w.bytes().begin(), w.bytes().end());
}

Tensor read_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (offset > bytes.size()) throw WireError("tensor offset out of range");
  Reader r(bytes.subspan(offset));
  Tensor t = r.tensor();
  offset += r.pos();
  return t;
}

const char* to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::Activation: return "ACTIVATION";
    case MessageKind::ModelUpload: return "MODEL_UPLOAD";
    case MessageKind::GlobalModel: return "GLOBAL_MODEL";
    case MessageKind::TurnOn: return "TURN_ON";
    case MessageKind::Stop: return "STOP";
  }
  return "UNKNOWN";
}

Message Message::activation(ActivationBatch batch) {
  Message m;
  m.kind = MessageKind::Activation;
  m.origin = batch.origin;
  m.payload = std::move(batch);
  return m;
}

Message Message::model_upload(DeviceId origin, ModelUpdate update) {
  Message m;
  m.kind = MessageKind::ModelUpload;
  m.origin = origin;
  m.payload = std::move(update);
  return m;
}

Message Message::global_model(ModelUpdate update) {
  Message m;
  m.kind = MessageKind::GlobalModel;
  m.origin = kServerId;
  m.payload = std::move(update);
  return m;
}

Message Message::turn_on() {
  Message m;
  m.kind = MessageKind::TurnOn;
  return m;
}

Message Message::stop() {
  Message m;
  m.kind = MessageKind::Stop;
  return m;
}

std::vector<std::uint8_t> encode(const Message& msg, std::uint64_t max_frame_bytes) {
  Writer w;
  for (auto b : kMagic) w.u8(b);
  w.u8(static_cast<std::uint8_t>(msg.kind));
  w.u32(msg.origin);
  w.u64(0);  // patched below

  switch (msg.kind) {
    case MessageKind::Activation: {
      const auto* batch = std::get_if<ActivationBatch>(&msg.payload);
      if (batch == nullptr) throw WireError("activation message without batch payload");
      if (batch->features.rank() < 1 || batch->features.dim(0) != batch->labels.size()) {
        throw WireError("activation rows do not match label count");
      }
      w.u64(batch->sequence);
      w.tensor(batch->features);
      for (auto label : batch->labels) w.u32(label);
      break;
    }
    case MessageKind::ModelUpload:
    case MessageKind::GlobalModel: {
      const auto* update = std::get_if<ModelUpdate>(&msg.payload);
      if (update == nullptr) throw WireError("model message without model payload");
      w.u64(update->version);
      w.u32(static_cast<std::uint32_t>(update->device_params.size() + 1 + update->aux_params.size()));
      for (const auto& t : update->device_params.tensors) w.tensor(t);
      w.tensor(Tensor(Shape{0}));
      for (const auto& t : update->aux_params.tensors) w.tensor(t);
      break;
    }
    case MessageKind::TurnOn:
    case MessageKind::Stop:
      break;
    default:
      throw WireError("unknown message kind");
  }

  auto& bytes = w.bytes();
  const std::uint64_t payload = bytes.size() - kFrameHeaderBytes;
  if (bytes.size() > max_frame_bytes) {
    throw WireError("frame of " + std::to_string(bytes.size()) + " bytes exceeds limit");
  }
  for (int i = 0; i < 8; ++i) bytes[9 + i] = static_cast<std::uint8_t>(payload >> (8 * i));
  return std::move(bytes);
}

std::optional<std::uint64_t> frame_length(std::span<const std::uint8_t> buffered, std::uint64_t max_frame_bytes) {
  if (buffered.size() < kFrameHeaderBytes) return std::nullopt;
  if (std::memcmp(buffered.data(), kMagic, 4) != 0) throw WireError("bad frame magic");
  Reader r(buffered.subspan(9, 8));
  const std::uint64_t payload = r.u64();
  if (payload > max_frame_bytes - kFrameHeaderBytes) throw WireError("frame length exceeds limit");
  return payload + kFrameHeaderBytes;
}

Message decode(std::span<const std::uint8_t> bytes, std::uint64_t max_frame_bytes) {
  if (bytes.size() < kFrameHeaderBytes) throw WireError("truncated frame header");
  Reader r(bytes);
  for (auto b : kMagic) {
    if (r.u8() != b) throw WireError("bad frame magic");
  }
  const std::uint8_t kind = r.u8();
  if (kind < 1 || kind > 5) throw WireError("unknown message kind " + std::to_string(kind));
  Message msg;
  msg.kind = static_cast<MessageKind>(kind);
  msg.origin = r.u32();
  const std::uint64_t payload = r.u64();
  if (payload > max_frame_bytes) throw WireError("frame length exceeds limit");
  if (payload != r.remaining()) throw WireError("payload length mismatch");

  switch (msg.kind) {
    case MessageKind::Activation: {
      ActivationBatch batch;
      batch.origin = msg.origin;
      batch.sequence = r.u64();
      batch.features = r.tensor();
      if (batch.features.rank() < 1) throw WireError("activation features need a batch dimension");
      const std::size_t rows = batch.features.dim(0);
      if (r.remaining() != rows * 4) throw WireError("label block does not match feature rows");
      batch.labels.resize(rows);
      for (auto& label : batch.labels) label = r.u32();
      msg.payload = std::move(batch);
      break;
    }
    case MessageKind::ModelUpload:
    case MessageKind::GlobalModel: {
      ModelUpdate update;
      update.version = r.u64();
      const std::uint32_t count = r.u32();
      // Every tensor needs at least its rank field.
      if (count > r.remaining() / 4) throw WireError("tensor count exceeds payload");
      bool in_aux = false;
      for (std::uint32_t i = 0; i < count; ++i) {
        Tensor t = r.tensor();
        if (!in_aux && is_separator(t)) {
          in_aux = true;
          continue;
        }
        (in_aux ? update.aux_params : update.device_params).tensors.push_back(std::move(t));
      }
      if (r.remaining() != 0) throw WireError("trailing bytes after model tensors");
      update.device_params.version = update.aux_params.version = update.version;
      msg.payload = std::move(update);
      break;
    }
    case MessageKind::TurnOn:
    case MessageKind::Stop:
      if (payload != 0) throw WireError("control message carries a payload");
      break;
  }
  return msg;
}

}  // namespace fedoptima
