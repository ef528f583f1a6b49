#include "clbd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace clbd {
namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'C', 'L', 'B', 'D'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return v;
}

json layer_header(const DenseLayer& l) {
  return {{"in", l.in_dim()},
          {"out", l.out_dim()},
          {"activation", l.activation == Activation::relu ? "relu" : "identity"}};
}

DenseLayer layer_from_header(const json& j) {
  DenseLayer l;
  const auto in = j.at("in").get<std::size_t>();
  const auto out = j.at("out").get<std::size_t>();
  const auto act = j.at("activation").get<std::string>();
  if (act != "relu" && act != "identity") throw CheckpointError("unknown activation '" + act + "'");
  l.weights = Tensor2(out, in);
  l.bias.assign(out, 0.0);
  l.activation = act == "relu" ? Activation::relu : Activation::identity;
  return l;
}

void put_doubles(std::string& out, std::span<const double> v) {
  for (double d : v) put_le(out, std::bit_cast<std::uint64_t>(d));
}

}  // namespace

std::string encode_checkpoint(const MlpModel& model, const std::map<std::string, std::string>& metadata) {
  json header;
  header["input_dim"] = model.input_dim;
  header["trunk"] = json::array();
  for (const auto& l : model.trunk) header["trunk"].push_back(layer_header(l));
  header["heads"] = json::array();
  for (const auto& h : model.heads) header["heads"].push_back(layer_header(h));
  header["gates"] = json::array();
  for (const auto& g : model.gates) {
    json layers = json::array();
    for (const auto& m : g.layers) layers.push_back(m);
    header["gates"].push_back(layers);
  }
  header["metadata"] = metadata;
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  put_le(out, kCheckpointVersion);
  put_le(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  for (const auto* group : {&model.trunk, &model.heads}) {
    for (const auto& l : *group) {
      put_doubles(out, l.weights.values());
      put_doubles(out, l.bias);
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError("bad magic");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("version mismatch: file has " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw CheckpointError("length mismatch: header runs past end of file");

  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed header: ") + e.what());
  }

  Checkpoint cp;
  try {
    cp.model.input_dim = header.at("input_dim").get<std::size_t>();
    for (const auto& j : header.at("trunk")) cp.model.trunk.push_back(layer_from_header(j));
    for (const auto& j : header.at("heads")) cp.model.heads.push_back(layer_from_header(j));
    for (const auto& g : header.at("gates")) {
      TaskGate gate;
      for (const auto& m : g) gate.layers.push_back(m.get<UnitMask>());
      cp.model.gates.push_back(std::move(gate));
    }
    cp.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed header: ") + e.what());
  }

  std::size_t expected = 0;
  for (const auto* group : {&cp.model.trunk, &cp.model.heads}) {
    for (const auto& l : *group) expected += (l.weights.size() + l.bias.size()) * 8;
  }
  const std::size_t payload = bytes.size() - 16 - header_len;
  if (payload != expected) {
    throw CheckpointError("length mismatch: payload has " + std::to_string(payload) + " bytes, header declares " +
                          std::to_string(expected));
  }
  std::size_t offset = 16 + header_len;
  auto read_into = [&](std::span<double> dst) {
    for (double& d : dst) {
      d = std::bit_cast<double>(get_le<std::uint64_t>(bytes, offset));
      offset += 8;
    }
  };
  for (auto* group : {&cp.model.trunk, &cp.model.heads}) {
    for (auto& l : *group) {
      read_into(l.weights.values());
      read_into(l.bias);
    }
  }
  return cp;
}

void save_checkpoint(const std::filesystem::path& path, const MlpModel& model,
                     const std::map<std::string, std::string>& metadata) {
  const std::string bytes = encode_checkpoint(model, metadata);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace clbd
