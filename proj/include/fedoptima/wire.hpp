#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "fedoptima/nn.hpp"

namespace fedoptima {

using DeviceId = std::uint32_t;
using Bytes = std::vector<std::uint8_t>;
inline constexpr DeviceId kServerId = 0;

enum class MessageKind : std::uint8_t {
  Activation = 1,
  ModelUpload = 2,
  GlobalModel = 3,
  TurnOn = 4,
  Stop = 5,
};

const char* to_string(MessageKind kind);

/// Activations of one device mini-batch, detached from the device tape.
/// Labels ride along so the server can evaluate its loss.
struct ActivationBatch {
  Tensor features;
  std::vector<std::uint32_t> labels;
  DeviceId origin = 0;
  std::uint64_t sequence = 0;

  friend bool operator==(const ActivationBatch&, const ActivationBatch&) = default;
};

/// A device-side model and its auxiliary head at one version. Also used for
/// the global model sent back by the server, and for full models in the
/// baselines (aux empty).
struct ModelUpdate {
  ParameterSet device_params;
  ParameterSet aux_params;
  std::uint64_t version = 0;

  friend bool operator==(const ModelUpdate&, const ModelUpdate&) = default;
};

struct Message {
  MessageKind kind = MessageKind::Stop;
  DeviceId origin = kServerId;
  std::variant<std::monostate, ActivationBatch, ModelUpdate> payload;

  static Message activation(ActivationBatch batch);
  static Message model_upload(DeviceId origin, ModelUpdate update);
  static Message global_model(ModelUpdate update);
  static Message turn_on();
  static Message stop();

  const ActivationBatch& batch() const { return std::get<ActivationBatch>(payload); }
  const ModelUpdate& model() const { return std::get<ModelUpdate>(payload); }
  ActivationBatch& batch() { return std::get<ActivationBatch>(payload); }
  ModelUpdate& model() { return std::get<ModelUpdate>(payload); }

  friend bool operator==(const Message&, const Message&) = default;
};

class WireError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Frame layout (little endian):
///   "FO01" | kind u8 | origin u32 | payload_len u64 | payload
/// Tensor:        rank u32 | dims u32 x rank | f32 data
/// Activation:    sequence u64 | features tensor | labels u32 x rows
/// Model upload / global model:
///                version u64 | tensor count u32 | device tensors |
///                separator tensor (rank 1, dim 0) | aux tensors
/// Turn-on, stop: empty
/// Decoded parameter sets carry the update's version.
inline constexpr std::size_t kFrameHeaderBytes = 17;
inline constexpr std::uint64_t kDefaultMaxFrameBytes = 256ULL << 20;

std::vector<std::uint8_t> encode(const Message& msg, std::uint64_t max_frame_bytes = kDefaultMaxFrameBytes);
Message decode(std::span<const std::uint8_t> bytes, std::uint64_t max_frame_bytes = kDefaultMaxFrameBytes);

/// Length of the whole frame once the header is available; nullopt while
/// fewer than kFrameHeaderBytes bytes are buffered. Throws on a bad header.
std::optional<std::uint64_t> frame_length(std::span<const std::uint8_t> buffered,
                                          std::uint64_t max_frame_bytes = kDefaultMaxFrameBytes);

/// Standalone tensor encoding (rank, dims, data) shared with file formats.
void append_tensor(std::vector<std::uint8_t>& out, const Tensor& t);
/// Reads one tensor starting at `offset` and advances it.
Tensor read_tensor(std::span<const std::uint8_t> bytes, std::size_t& offset);

}  // namespace fedoptima
