#include "streamloc/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "streamloc/sha256.hpp"
#include "streamloc/tensor.hpp"

// Fixed-width little-endian integers. The build targets little-endian hosts
// (x86-64/aarch64); scalar buffers are written as raw bytes.

namespace streamloc {

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is)
    fail(ErrorKind::kParse,
         std::string("checkpoint: truncated while reading ") + what);
  return v;
}

constexpr char kMagic[4] = {'S', 'L', 'C', 'K'};

}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_str,
                     const std::vector<Parameter*>& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::kState, "checkpoint: cannot open " + path + " for write");
  os.write(kMagic, 4);
  put<uint16_t>(os, kCheckpointVersion);
  const auto hash = Sha256::hash(config_str);
  os.write(reinterpret_cast<const char*>(hash.data()),
           static_cast<std::streamsize>(hash.size()));
  for (const Parameter* p : params) {
    put<uint32_t>(os, static_cast<uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<uint8_t>(os, static_cast<uint8_t>(p->value.dtype()));
    put<uint32_t>(os, static_cast<uint32_t>(p->value.rank()));
    for (int64_t d : p->value.shape()) put<uint64_t>(os, static_cast<uint64_t>(d));
    os.write(reinterpret_cast<const char*>(p->value.impl_->data.data()),
             static_cast<std::streamsize>(p->value.impl_->data.size()));
  }
  if (!os) fail(ErrorKind::kState, "checkpoint: write to " + path + " failed");
}

void load_checkpoint(const std::string& path, const std::string& config_str,
                     const std::vector<Parameter*>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::kState, "checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    fail(ErrorKind::kParse, "checkpoint: " + path + " is not an SLCK file");
  const auto version = get<uint16_t>(is, "version");
  if (version != kCheckpointVersion)
    fail(ErrorKind::kCheckpoint,
         "checkpoint: version mismatch (expected " +
             std::to_string(kCheckpointVersion) + ", found " +
             std::to_string(version) + ")");
  std::array<uint8_t, 32> stored;
  is.read(reinterpret_cast<char*>(stored.data()), 32);
  if (!is) fail(ErrorKind::kParse, "checkpoint: truncated config hash");
  const auto expect = Sha256::hash(config_str);
  if (stored != expect)
    fail(ErrorKind::kCheckpoint,
         "checkpoint: config hash mismatch (expected " + Sha256::hex(expect) +
             " for \"" + config_str + "\", found " + Sha256::hex(stored) + ")");
  // Stage every record first so a bad file cannot leave a partial load.
  std::map<std::string, Tensor> staged;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const auto name_len = get<uint32_t>(is, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) fail(ErrorKind::kParse, "checkpoint: truncated name");
    const auto tag = get<uint8_t>(is, "dtype tag");
    if (tag > 1)
      fail(ErrorKind::kParse,
           "checkpoint: bad dtype tag " + std::to_string(tag) + " for " + name);
    const auto rank = get<uint32_t>(is, "rank");
    Shape shape;
    for (uint32_t i = 0; i < rank; ++i)
      shape.push_back(static_cast<int64_t>(get<uint64_t>(is, "dim")));
    Tensor t = Tensor::zeros(shape, static_cast<Dtype>(tag));
    is.read(reinterpret_cast<char*>(t.impl_->data.data()),
            static_cast<std::streamsize>(t.impl_->data.size()));
    if (!is) fail(ErrorKind::kParse, "checkpoint: truncated data for " + name);
    if (!staged.emplace(name, std::move(t)).second)
      fail(ErrorKind::kParse, "checkpoint: duplicate parameter " + name);
  }
  if (staged.size() != params.size())
    fail(ErrorKind::kCheckpoint,
         "checkpoint: parameter count mismatch (expected " +
             std::to_string(params.size()) + ", found " +
             std::to_string(staged.size()) + ")");
  for (Parameter* p : params) {
    auto it = staged.find(p->name);
    if (it == staged.end())
      fail(ErrorKind::kCheckpoint, "checkpoint: missing parameter " + p->name);
    const Tensor& t = it->second;
    if (t.dtype() != p->value.dtype() || t.shape() != p->value.shape())
      fail(ErrorKind::kCheckpoint,
           "checkpoint: parameter " + p->name + " expected " +
               shape_str(p->value.shape()) + " " + dtype_name(p->value.dtype()) +
               ", found " + shape_str(t.shape()) + " " + dtype_name(t.dtype()));
  }
  for (Parameter* p : params) {
    const Tensor& t = staged.at(p->name);
    std::memcpy(p->value.impl_->data.data(), t.impl_->data.data(),
                t.impl_->data.size());
  }
}

std::string checkpoint_params_hash(const std::vector<Parameter*>& params) {
  Sha256 h;
  for (const Parameter* p : params) {
    h.update(p->name.data(), p->name.size());
    h.update(p->value.impl_->data.data(), p->value.impl_->data.size());
  }
  return Sha256::hex(h.digest());
}

}  // namespace streamloc
