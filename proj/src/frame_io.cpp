#include "fmfnet/frame_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

#include "fmfnet/errors.hpp"

namespace fmfnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Writer {
 public:
  explicit Writer(std::size_t reserve) { out_.reserve(reserve); }

  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::byte*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(static_cast<std::byte>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xFFu));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  std::vector<std::byte> take() { return std::move(out_); }

 private:
  std::vector<std::byte> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::byte>& in) : in_(in) {}

  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw IoError("truncated frame payload");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  const std::vector<std::byte>& in_;
  std::size_t pos_ = 0;
};

std::vector<std::byte> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());
  return bytes;
}

}  // namespace

std::size_t frame_file_size(const PointCloudFrame& frame) {
  return 8 + 4 + 8 + 1 + (frame.ego_pose ? 24 : 0) + 4 + frame.points.size() * kPointRecordBytes + 4 +
         frame.gt_boxes.size() * kBoxRecordBytes;
}

std::vector<std::byte> encode_frame(const PointCloudFrame& frame) {
  Writer w(frame_file_size(frame));
  w.bytes(kFrameMagic, sizeof(kFrameMagic));
  w.u32(kFrameVersion);
  w.f64(frame.timestamp);
  w.u8(frame.ego_pose ? 1 : 0);
  if (frame.ego_pose) {
    w.f64(frame.ego_pose->tx);
    w.f64(frame.ego_pose->ty);
    w.f64(frame.ego_pose->yaw);
  }
  w.u32(static_cast<std::uint32_t>(frame.points.size()));
  for (const auto& p : frame.points) {
    w.f32(p.x);
    w.f32(p.y);
    w.f32(p.z);
    w.f32(p.intensity);
  }
  w.u32(static_cast<std::uint32_t>(frame.gt_boxes.size()));
  for (const auto& b : frame.gt_boxes) {
    for (double v : {b.cx, b.cy, b.cz, b.w, b.l, b.h, b.yaw, b.vx, b.vy}) w.f32(v);
    w.u32(static_cast<std::uint32_t>(b.class_id));
  }
  return w.take();
}

PointCloudFrame decode_frame(const std::vector<std::byte>& bytes) {
  if (bytes.size() < sizeof(kFrameMagic) + 4) {
    if (bytes.size() >= sizeof(kFrameMagic) && std::memcmp(bytes.data(), kFrameMagic, sizeof(kFrameMagic)) == 0) {
      throw IoError("truncated frame header");
    }
    throw FormatError("not a frame file (too short for magic/version)");
  }
  if (std::memcmp(bytes.data(), kFrameMagic, sizeof(kFrameMagic)) != 0) throw FormatError("bad frame magic");

  Reader r(bytes);
  for (std::size_t i = 0; i < sizeof(kFrameMagic); ++i) r.u8();
  const std::uint32_t version = r.u32();
  if (version != kFrameVersion) throw FormatError("unsupported frame version " + std::to_string(version));

  PointCloudFrame frame;
  frame.timestamp = r.f64();
  const std::uint8_t has_pose = r.u8();
  if (has_pose > 1) throw FormatError("invalid has_pose flag");
  if (has_pose) {
    Pose2D pose;
    pose.tx = r.f64();
    pose.ty = r.f64();
    pose.yaw = r.f64();
    frame.ego_pose = pose;
  }
  const std::uint32_t num_points = r.u32();
  r.need(static_cast<std::size_t>(num_points) * kPointRecordBytes);
  frame.points.resize(num_points);
  for (auto& p : frame.points) {
    p.x = r.f32();
    p.y = r.f32();
    p.z = r.f32();
    p.intensity = r.f32();
  }
  const std::uint32_t num_boxes = r.u32();
  r.need(static_cast<std::size_t>(num_boxes) * kBoxRecordBytes);
  frame.gt_boxes.resize(num_boxes);
  for (auto& b : frame.gt_boxes) {
    b.cx = r.f32();
    b.cy = r.f32();
    b.cz = r.f32();
    b.w = r.f32();
    b.l = r.f32();
    b.h = r.f32();
    b.yaw = r.f32();
    b.vx = r.f32();
    b.vy = r.f32();
    b.class_id = static_cast<int>(r.u32());
  }
  if (!r.at_end()) throw FormatError("trailing bytes after frame payload");
  return frame;
}

void write_frame(const PointCloudFrame& frame, const fs::path& path) {
  const auto bytes = encode_frame(frame);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

PointCloudFrame read_frame(const fs::path& path) { return decode_frame(read_file(path)); }

std::string frame_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%06zu.bin", index);
  return buf;
}

void write_sequence(const SceneSequence& seq, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "fmf-sequence";
  manifest["version"] = 1;
  manifest["class_names"] = seq.class_names;
  json frames = json::array();
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const std::string name = frame_file_name(i);
    write_frame(seq.frames[i], dir / name);
    frames.push_back(name);
  }
  manifest["frames"] = frames;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

SceneSequence read_sequence(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing manifest.json in " + dir.string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  SceneSequence seq;
  try {
    seq.class_names = manifest.at("class_names").get<std::vector<std::string>>();
    for (const auto& name : manifest.at("frames")) seq.frames.push_back(read_frame(dir / name.get<std::string>()));
  } catch (const json::exception& e) {
    throw FormatError("manifest in " + dir.string() + ": " + e.what());
  }
  if (seq.class_names.empty()) throw FormatError("manifest lists no classes");
  const int k = static_cast<int>(seq.class_names.size());
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    if (i > 0 && !(seq.frames[i].timestamp > seq.frames[i - 1].timestamp)) {
      throw FormatError("timestamps must be strictly increasing in " + dir.string());
    }
    for (const auto& b : seq.frames[i].gt_boxes) validate(b, k);
  }
  return seq;
}

std::vector<SceneSequence> read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  if (fs::exists(dir / "manifest.json")) return {read_sequence(dir)};
  std::vector<fs::path> subdirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) subdirs.push_back(entry.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  if (subdirs.empty()) throw IoError("no sequences found under " + dir.string());
  std::vector<SceneSequence> out;
  for (const auto& d : subdirs) out.push_back(read_sequence(d));
  for (const auto& s : out) {
    if (s.class_names != out.front().class_names) throw FormatError("sequences disagree on class_names");
  }
  return out;
}

}  // namespace fmfnet
