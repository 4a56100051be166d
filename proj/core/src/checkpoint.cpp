#include "wrcfusion/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "wrcfusion/error.hpp"

namespace wrc {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

struct Reader {
  std::ifstream in;
  std::size_t offset = 0;
  std::string path;

  void read(void* dst, std::size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw FormatError(path + ": truncated while reading " + std::string(what) +
                        " at byte offset " + std::to_string(offset));
    offset += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  std::uint64_t u64(const char* what) {
    unsigned char b[8];
    read(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  double f64(const char* what) {
    std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write("WRCF", 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<std::uint32_t>(params.all().size()));
  for (const auto& p : params.all()) {
    put_u32(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_u32(os, static_cast<std::uint32_t>(p->tensor.rank()));
    for (std::size_t d : p->tensor.shape()) put_u64(os, d);
    for (double v : p->tensor.data()) put_f64(os, v);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, ParamStore& params) {
  Reader r;
  r.path = path.string();
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, "WRCF", 4) != 0)
    throw FormatError(r.path + ": bad magic at byte offset 0, expected \"WRCF\"");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(r.path + ": checkpoint version " + std::to_string(version) +
                      " does not match supported version " +
                      std::to_string(kCheckpointVersion));
  const std::uint32_t count = r.u32("parameter count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "name");
    const std::uint32_t rank = r.u32("rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<std::size_t>(r.u64("dim"));
      numel *= shape[d];
    }
    std::vector<double> payload(numel);
    for (std::size_t k = 0; k < numel; ++k) payload[k] = r.f64("payload");

    Parameter* p = params.find(name);
    if (!p)
      throw ConfigError("checkpoint/config mismatch: parameter '" + name +
                        "' from " + r.path + " does not exist in the model");
    if (p->tensor.shape() != shape)
      throw ConfigError("checkpoint/config mismatch: parameter '" + name +
                        "' has shape " + shape_str(shape) +
                        " in the checkpoint but " + shape_str(p->tensor.shape()) +
                        " in the model");
    auto dst = p->tensor.raw();
    std::copy(payload.begin(), payload.end(), dst.begin());
  }
}

}  // namespace wrc
