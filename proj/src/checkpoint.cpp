#include "mos/checkpoint.hpp"

#include "mos/errors.hpp"

#include "json.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>

namespace mos {

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'O', 'S', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("checkpoint truncated while reading " + what);
  return v;
}

void put_array(std::ostream& out, const Mat& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Mat get_array(std::istream& in, Eigen::Index rows, Eigen::Index cols, const std::string& name) {
  Mat m(rows, cols);
  if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)))) {
    throw FormatError("checkpoint truncated in array " + name);
  }
  return m;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (!ckpt.momentum.empty() && ckpt.momentum.size() != ckpt.parameters.size()) {
    throw std::invalid_argument("write_checkpoint: momentum buffers do not match parameters");
  }
  nlohmann::ordered_json header;
  header["format"] = "mos-checkpoint";
  header["epoch"] = ckpt.epoch;
  header["step"] = ckpt.step;
  header["rng_state"] = ckpt.rng_state;
  header["config"] = ckpt.config_echo;
  header["has_momentum"] = !ckpt.momentum.empty();
  auto table = nlohmann::ordered_json::array();
  for (const NamedArray& a : ckpt.parameters) table.push_back({a.name, a.value.rows(), a.value.cols()});
  header["parameters"] = table;
  const std::string text = header.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const NamedArray& a : ckpt.parameters) put_array(out, a.value);
    for (const Mat& m : ckpt.momentum) put_array(out, m);
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw FormatError("not a checkpoint file: " + path.string());
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto length = get<std::uint64_t>(in, "header length");
  if (length > (1ULL << 30)) throw FormatError("checkpoint header length is implausible");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw FormatError("checkpoint truncated in header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  Checkpoint ckpt;
  try {
    ckpt.epoch = header.at("epoch").get<int>();
    ckpt.step = header.at("step").get<long>();
    ckpt.rng_state = header.at("rng_state").get<std::string>();
    ckpt.config_echo = header.at("config").get<std::string>();
    for (const auto& row : header.at("parameters")) {
      NamedArray a;
      a.name = row.at(0).get<std::string>();
      a.value.resize(row.at(1).get<Eigen::Index>(), row.at(2).get<Eigen::Index>());
      ckpt.parameters.push_back(std::move(a));
    }
    for (NamedArray& a : ckpt.parameters) a.value = get_array(in, a.value.rows(), a.value.cols(), a.name);
    if (header.at("has_momentum").get<bool>()) {
      for (const NamedArray& a : ckpt.parameters) ckpt.momentum.push_back(get_array(in, a.value.rows(), a.value.cols(), a.name));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is missing fields: ") + e.what());
  }
  return ckpt;
}

void load_parameters(const Checkpoint& ckpt, const std::vector<Parameter*>& params) {
  std::map<std::string, const Mat*> stored;
  for (const NamedArray& a : ckpt.parameters) stored[a.name] = &a.value;
  if (stored.size() != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(stored.size()) + " arrays, model expects " +
                    std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    auto it = stored.find(p->name);
    if (it == stored.end()) throw DataError("checkpoint has no array named " + p->name);
    if (it->second->rows() != p->value.rows() || it->second->cols() != p->value.cols()) {
      throw DataError("checkpoint array " + p->name + " has a different shape");
    }
    p->value = *it->second;
    p->zero_grad();
  }
}

}  // namespace mos
