#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "elusive/errors.hpp"
#include "elusive/model.hpp"

namespace elusive {

namespace {

constexpr std::string_view kMagic = "ELUSCKPT";
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), bytes.size());
  } else {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
  }
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      auto b = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(b.begin(), b.end());
      v = std::bit_cast<T>(b);
    }
    return v;
  }

  std::string_view take(std::size_t n) {
    if (pos_ + n > bytes_.size())
      throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelCheckpoint& ckpt) {
  Json header;
  header["format_version"] = kVersion;
  header["config"] = ckpt.config.to_json();
  header["lora"] = ckpt.lora ? ckpt.lora->to_json() : Json(nullptr);
  header["step"] = ckpt.step;
  header["rng_state"] = ckpt.rng_state;
  const std::string header_text = header.dump();

  std::string out(kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, header_text.size());
  out += header_text;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, p] : ckpt.params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
    for (auto dim : p.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(dim));
    for (ad::Index i = 0; i < p.value.size(); ++i) put<float>(out, p.value.data()[i]);
  }
  return out;
}

ModelCheckpoint deserialize_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw DataError("not a checkpoint file (bad magic)");
  const auto version = in.get<std::uint32_t>();
  if (version != kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = in.get<std::uint64_t>();
  Json header;
  try {
    header = Json::parse(in.take(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  ModelCheckpoint ckpt;
  ckpt.config = ModelConfig::from_json(header.at("config"));
  if (!header.at("lora").is_null()) ckpt.lora = LoraSpec::from_json(header.at("lora"));
  ckpt.step = header.at("step").get<std::int64_t>();
  ckpt.rng_state = header.at("rng_state").get<std::string>();

  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name(in.take(in.get<std::uint32_t>()));
    const auto rank = in.get<std::uint32_t>();
    ad::Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<ad::Index>(in.get<std::uint64_t>()));
    Parameter p{shape, ad::Matrix<float>(ad::shape_rows(shape), ad::shape_cols(shape))};
    for (ad::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = in.get<float>();
    ckpt.params.emplace(std::move(name), std::move(p));
  }
  if (!in.done()) throw DataError("checkpoint has trailing bytes");

  // Shapes must agree with the config.
  const auto reference = init_model(ckpt.config, 0);
  for (const auto& [name, p] : reference.params) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) throw DataError("checkpoint lacks tensor \"" + name + "\"");
    if (it->second.shape != p.shape)
      throw DataError("checkpoint tensor \"" + name + "\" has shape " +
                      ad::shape_string(it->second.shape) + ", config implies " +
                      ad::shape_string(p.shape));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
  write_text(path, serialize_checkpoint(ckpt));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_text(path));
}

}  // namespace elusive
