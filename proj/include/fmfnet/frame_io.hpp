#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "fmfnet/data_model.hpp"

namespace fmfnet {

// Binary frame layout, little-endian:
//   "FMFPC1\0\0"  u32 version=1  f64 timestamp  u8 has_pose  [3 x f64 pose]
//   u32 num_points  num_points x (4 x f32)
//   u32 num_boxes   num_boxes x (9 x f32 + u32 class_id)
// Values are stored in single precision, so a round trip is bit-exact for
// frames whose coordinates are float-representable (all generated frames are).

inline constexpr char kFrameMagic[8] = {'F', 'M', 'F', 'P', 'C', '1', '\0', '\0'};
inline constexpr std::uint32_t kFrameVersion = 1;
inline constexpr std::size_t kPointRecordBytes = 16;
inline constexpr std::size_t kBoxRecordBytes = 40;

/// Exact serialized size of a frame.
std::size_t frame_file_size(const PointCloudFrame& frame);

std::vector<std::byte> encode_frame(const PointCloudFrame& frame);
PointCloudFrame decode_frame(const std::vector<std::byte>& bytes);

void write_frame(const PointCloudFrame& frame, const std::filesystem::path& path);
PointCloudFrame read_frame(const std::filesystem::path& path);

/// A sequence directory holds frame_%06d.bin files plus manifest.json.
void write_sequence(const SceneSequence& seq, const std::filesystem::path& dir);
SceneSequence read_sequence(const std::filesystem::path& dir);

/// `dir` is either one sequence directory or a directory of sequence
/// subdirectories (visited in lexicographic order).
std::vector<SceneSequence> read_dataset(const std::filesystem::path& dir);

std::string frame_file_name(std::size_t index);

}  // namespace fmfnet
