#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "streamloc/common.hpp"
#include "streamloc/data.hpp"

namespace streamloc {
namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

constexpr char kFramesMagic[4] = {'S', 'L', 'V', 'D'};
constexpr uint16_t kFramesVersion = 1;

template <typename T>
void write_raw(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is)
    fail(ErrorKind::kParse, path + ": truncated frames file");
  return v;
}

}  // namespace

void write_frames_file(const Tensor& frames, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os)
    fail(ErrorKind::kState, "cannot open '" + path + "' for writing");
  os.write(kFramesMagic, 4);
  write_raw(os, kFramesVersion);
  write_raw(os, static_cast<uint8_t>(0));  // dtype tag: f32
  for (int i = 0; i < 4; ++i)
    write_raw(os, static_cast<uint64_t>(frames.dim(i)));
  auto buf = frames.buf<float>();
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os)
    fail(ErrorKind::kState, "write to '" + path + "' failed");
}

Tensor read_frames_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    fail(ErrorKind::kData, "missing frames file '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kFramesMagic, 4) != 0)
    fail(ErrorKind::kParse, path + ": not a frames file (bad magic)");
  const auto version = read_raw<uint16_t>(is, path);
  if (version != kFramesVersion)
    fail(ErrorKind::kParse, path + ": unsupported frames version " +
                                 std::to_string(version));
  const auto dtype_tag = read_raw<uint8_t>(is, path);
  if (dtype_tag != 0)
    fail(ErrorKind::kParse, path + ": unsupported pixel dtype tag " +
                                 std::to_string(dtype_tag));
  Shape shape(4);
  for (int i = 0; i < 4; ++i) {
    const auto d = read_raw<uint64_t>(is, path);
    if (d == 0 || d > (uint64_t{1} << 32))
      fail(ErrorKind::kParse, path + ": implausible dimension " +
                                   std::to_string(d));
    shape[i] = static_cast<int64_t>(d);
  }
  Tensor frames = Tensor::zeros(shape, Dtype::kF32);
  auto buf = frames.buf<float>();
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!is)
    fail(ErrorKind::kParse, path + ": truncated frames file");
  char extra;
  if (is.read(&extra, 1))
    fail(ErrorKind::kParse, path + ": trailing bytes after pixel data");
  return frames;
}

namespace {

std::string frames_rel_path(const std::string& stream_id) {
  return "frames/" + stream_id + ".slvd";
}

void validate_intervals(const std::string& stream_id,
                        std::vector<Interval>& ivs, int64_t length,
                        int64_t num_classes) {
  std::sort(ivs.begin(), ivs.end(),
            [](const Interval& a, const Interval& b) { return a.start < b.start; });
  int64_t prev_end = -1;
  for (const Interval& iv : ivs) {
    const std::string where = "stream '" + stream_id + "' interval [" +
                              std::to_string(iv.start) + ", " +
                              std::to_string(iv.end) + ")";
    if (iv.end <= iv.start)
      fail(ErrorKind::kParse, where + ": end must exceed start");
    if (iv.start < 0 || iv.end > length)
      fail(ErrorKind::kParse, where + ": outside stream of length " +
                                   std::to_string(length));
    if (iv.start < prev_end)
      fail(ErrorKind::kParse, where + ": overlaps previous interval");
    if (iv.class_id < 0 || iv.class_id >= num_classes)
      fail(ErrorKind::kParse, where + ": class id " +
                                   std::to_string(iv.class_id) +
                                   " outside [0, " +
                                   std::to_string(num_classes) + ")");
    if (iv.phase_switch >= 0 &&
        (iv.phase_switch <= iv.start || iv.phase_switch >= iv.end))
      fail(ErrorKind::kParse, where + ": phase switch " +
                                   std::to_string(iv.phase_switch) +
                                   " not strictly inside the interval");
    prev_end = iv.end;
  }
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "frames", ec);
  if (ec)
    fail(ErrorKind::kState, "cannot create dataset directory '" + dir + "': " +
                                 ec.message());

  ordered_json root;
  root["classes"] = ds.class_names;
  root["streams"] = ordered_json::array();
  for (const AnnotatedStream& s : ds.streams) {
    if (!s.frames.defined() || s.frames.rank() != 4)
      fail(ErrorKind::kState,
            "stream '" + s.id + "' has no [T,C,H,W] frames to write");
    write_frames_file(s.frames, (fs::path(dir) / frames_rel_path(s.id)).string());
    ordered_json js;
    js["id"] = s.id;
    js["frames"] = frames_rel_path(s.id);
    js["length"] = s.length();
    js["intervals"] = ordered_json::array();
    for (const Interval& iv : s.intervals) {
      ordered_json ji;
      ji["start"] = iv.start;
      ji["end"] = iv.end;
      ji["class"] = iv.class_id;
      ji["phase_switch"] = iv.phase_switch;
      js["intervals"].push_back(ji);
    }
    js["provenance"] = s.provenance;
    root["streams"].push_back(js);
  }
  const std::string path = (fs::path(dir) / "annotations.json").string();
  std::ofstream os(path, std::ios::trunc);
  if (!os)
    fail(ErrorKind::kState, "cannot open '" + path + "' for writing");
  os << root.dump(2) << "\n";
  if (!os)
    fail(ErrorKind::kState, "write to '" + path + "' failed");
}

Dataset read_dataset(const std::string& dir) {
  const std::string path = (fs::path(dir) / "annotations.json").string();
  std::ifstream is(path);
  if (!is)
    fail(ErrorKind::kData, "missing annotations file '" + path + "'");
  ordered_json root;
  try {
    is >> root;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, path + ": " + e.what());
  }

  Dataset ds;
  try {
    ds.class_names = root.at("classes").get<std::vector<std::string>>();
    if (ds.class_names.empty())
      fail(ErrorKind::kParse, path + ": empty class list");
    for (const auto& js : root.at("streams")) {
      AnnotatedStream s;
      s.id = js.at("id").get<std::string>();
      s.provenance = js.value("provenance", std::string());
      const auto frames_rel = js.at("frames").get<std::string>();
      s.frames = read_frames_file((fs::path(dir) / frames_rel).string());
      const auto length = js.at("length").get<int64_t>();
      if (length != s.length())
        fail(ErrorKind::kParse,
              path + ": stream '" + s.id + "' declares length " +
                  std::to_string(length) + " but frames file holds " +
                  std::to_string(s.length()));
      for (const auto& ji : js.at("intervals")) {
        Interval iv;
        iv.start = ji.at("start").get<int64_t>();
        iv.end = ji.at("end").get<int64_t>();
        iv.class_id = ji.at("class").get<int>();
        iv.phase_switch = ji.value("phase_switch", int64_t{-1});
        s.intervals.push_back(iv);
      }
      validate_intervals(s.id, s.intervals, s.length(),
                         static_cast<int64_t>(ds.class_names.size()));
      ds.streams.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kParse, path + ": " + e.what());
  }
  return ds;
}

std::vector<Interval> read_thumos_annotations(
    const std::string& path, double fps,
    const std::vector<std::string>& class_names) {
  if (!(fps > 0.0))
    fail(ErrorKind::kArgument, "frame rate must be positive");
  std::ifstream is(path);
  if (!is)
    fail(ErrorKind::kData, "missing annotation file '" + path + "'");

  std::vector<Interval> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string where = path + ":" + std::to_string(line_no);
    std::istringstream ls(line);
    std::string cls;
    if (!(ls >> cls)) continue;  // blank line
    double start_sec = 0, end_sec = 0;
    if (!(ls >> start_sec >> end_sec))
      fail(ErrorKind::kParse,
            where + ": expected 'class start_sec end_sec'");
    std::string extra;
    if (ls >> extra)
      fail(ErrorKind::kParse, where + ": unexpected trailing field '" +
                                   extra + "'");
    const auto it = std::find(class_names.begin(), class_names.end(), cls);
    if (it == class_names.end())
      fail(ErrorKind::kParse, where + ": unknown class '" + cls + "'");
    Interval iv;
    iv.class_id = static_cast<int>(it - class_names.begin());
    iv.start = std::llround(start_sec * fps);
    iv.end = std::llround(end_sec * fps);
    iv.phase_switch = -1;  // unannotated; consumers fall back to the midpoint
    if (iv.start < 0 || iv.end <= iv.start)
      fail(ErrorKind::kParse,
            where + ": degenerate interval after mapping to frames");
    out.push_back(iv);
  }
  std::sort(out.begin(), out.end(),
            [](const Interval& a, const Interval& b) { return a.start < b.start; });
  return out;
}

}  // namespace streamloc
