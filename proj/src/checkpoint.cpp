#include "questmf/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

#include "questmf/errors.hpp"

namespace questmf {

namespace {

using nlohmann::json;

constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw DataError(std::string("checkpoint truncated at ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64s(std::ostream& out, const std::vector<double>& values) {
  std::vector<unsigned char> buf(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int k = 0; k < 8; ++k) buf[8 * i + static_cast<std::size_t>(k)] =
        static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

std::vector<double> get_f64s(std::istream& in, std::size_t n, const char* what) {
  std::vector<unsigned char> buf(n * 8);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw DataError(std::string("checkpoint truncated at ") + what);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int k = 7; k >= 0; --k)
      bits = (bits << 8) | buf[8 * i + static_cast<std::size_t>(k)];
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

json meta_to_json(const CheckpointMeta& m) {
  return json{{"stage", m.stage},         {"framework", m.framework},
              {"loss", m.loss},           {"modalities", m.modalities},
              {"question", m.question},   {"epoch", m.epoch},
              {"val_loss", m.val_loss},   {"val_ccc", m.val_ccc},
              {"seed", m.seed},           {"config_hash", m.config_hash}};
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta m;
  m.stage = j.value("stage", "");
  m.framework = j.value("framework", "");
  m.loss = j.value("loss", "");
  m.modalities = j.value("modalities", "");
  m.question = j.value("question", -1);
  m.epoch = j.value("epoch", std::uint64_t{0});
  m.val_loss = j.value("val_loss", 0.0);
  m.val_ccc = j.value("val_ccc", 0.0);
  m.seed = j.value("seed", std::uint64_t{0});
  m.config_hash = j.value("config_hash", "");
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                     const ParamSet& params) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + path.string());
    out.write("QMC1", 4);
    put_u32(out, kVersion);
    const std::string meta_str = meta_to_json(meta).dump();
    put_u32(out, static_cast<std::uint32_t>(meta_str.size()));
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    put_u32(out, static_cast<std::uint32_t>(params.count()));
    for (std::size_t i = 0; i < params.count(); ++i) {
      const std::string& name = params.name(i);
      const Tensor& t = params.tensor(i);
      put_u32(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
      put_f64s(out, t.values());
    }
    if (!out) throw DataError("short write on checkpoint: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "QMC1", 4) != 0)
    throw DataError("bad magic in checkpoint: " + path.string());
  if (get_u32(in, "version") != kVersion)
    throw DataError("unsupported checkpoint version: " + path.string());
  const std::size_t meta_len = get_u32(in, "metadata length");
  std::string meta_str(meta_len, '\0');
  if (!in.read(meta_str.data(), static_cast<std::streamsize>(meta_len)))
    throw DataError("checkpoint truncated at metadata");
  Checkpoint ckpt;
  try {
    ckpt.meta = meta_from_json(json::parse(meta_str));
  } catch (const std::exception& e) {
    throw DataError("bad checkpoint metadata: " + std::string(e.what()));
  }
  const std::size_t count = get_u32(in, "tensor count");
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t name_len = get_u32(in, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw DataError("checkpoint truncated at tensor name");
    const std::size_t rank = get_u32(in, "rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      shape[d] = get_u32(in, "shape");
      n *= shape[d];
    }
    std::vector<double> values = get_f64s(in, n, name.c_str());
    ckpt.tensors.emplace_back(std::move(name), Tensor(shape, std::move(values)));
  }
  char extra;
  if (in.read(&extra, 1)) throw DataError("trailing bytes in checkpoint: " + path.string());
  return ckpt;
}

void restore_params(ParamSet& params, const Checkpoint& ckpt) {
  if (ckpt.tensors.size() != params.count())
    throw DataError("checkpoint holds a different parameter count");
  for (const auto& [name, t] : ckpt.tensors) {
    auto idx = params.find(name);
    if (!idx) throw DataError("checkpoint tensor has no matching parameter: " + name);
    if (!params.tensor(*idx).same_shape(t))
      throw DataError("checkpoint tensor shape mismatch: " + name);
    params.tensor(*idx) = t;
  }
}

std::size_t overlay_params(ParamSet& params, const Checkpoint& ckpt, std::string_view prefix) {
  std::size_t copied = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    auto idx = params.find(name);
    if (!idx) throw DataError("no parameter matches overlaid tensor: " + name);
    if (!params.tensor(*idx).same_shape(t))
      throw DataError("overlay shape mismatch: " + name);
    params.tensor(*idx) = t;
    ++copied;
  }
  return copied;
}

}  // namespace questmf
