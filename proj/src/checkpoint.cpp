// SPDX-License-Identifier: Apache-2.0

#include "textprune/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "textprune/config.hpp"

namespace textprune {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'C', 'O', 'P', 'A'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::string_view in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

struct Blob {
  std::string name;
  Shape shape;
  std::span<const float> values;
};

std::vector<Blob> blobs_of(const TrainState& state) {
  std::vector<Blob> out;
  const auto& plist = state.optimizer.params();
  for (const auto& [name, p] : plist) out.push_back({name, p.shape(), p.data()});
  for (std::size_t i = 0; i < plist.size(); ++i) {
    out.push_back({"adam.m/" + plist[i].first, plist[i].second.shape(), state.optimizer.first_moments()[i]});
  }
  for (std::size_t i = 0; i < plist.size(); ++i) {
    out.push_back({"adam.v/" + plist[i].first, plist[i].second.shape(), state.optimizer.second_moments()[i]});
  }
  return out;
}

[[noreturn]] void corrupt(const std::string& msg) { throw Error("checkpoint: " + msg); }

}  // namespace

std::string encode_checkpoint(const TrainState& state) {
  const auto blobs = blobs_of(state);
  json manifest = json::array();
  std::size_t offset = 0;
  for (const auto& b : blobs) {
    manifest.push_back({{"name", b.name}, {"shape", b.shape}, {"byte_offset", offset}});
    offset += b.values.size() * sizeof(float);
  }
  json history = json::array();
  for (const auto& r : state.history) history.push_back({r.step, r.pta, r.itc, r.itm, r.total, to_string(r.mode)});
  json header = {
      {"config", to_json(RunConfig{state.model, state.train, state.data})},
      {"train_state",
       {{"step", state.step},
        {"optimizer_steps", state.optimizer.steps_taken()},
        {"pta_ema", state.pta_ema ? json(*state.pta_ema) : json(nullptr)},
        {"switched", state.switched},
        {"history", history}}},
      {"tensors", manifest},
      {"data_bytes", offset},
  };
  const std::string text = header.dump();

  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  out.reserve(out.size() + offset + 4);
  for (const auto& b : blobs) {
    for (float v : b.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  put_u32(out, crc32_of(out));
  return out;
}

TrainState decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16) corrupt("file too short (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) corrupt("bad magic, not a checkpoint file");
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kCheckpointVersion) corrupt("unsupported format version " + std::to_string(version));
  const std::uint32_t header_len = get_u32(bytes, 8);
  if (12 + static_cast<std::size_t>(header_len) + 4 > bytes.size()) corrupt("truncated header");
  const std::uint32_t stored_crc = get_u32(bytes, bytes.size() - 4);
  if (crc32_of(bytes.substr(0, bytes.size() - 4)) != stored_crc) corrupt("checksum mismatch, file is corrupted or truncated");

  json header;
  try {
    header = json::parse(bytes.substr(12, header_len));
  } catch (const json::exception& e) {
    corrupt(std::string("unreadable header: ") + e.what());
  }
  try {
    const RunConfig cfg = parse_run_config(header.at("config"));
    TrainState state = init_train_state(cfg.model, cfg.train, cfg.data);
    const std::string_view data = bytes.substr(12 + header_len, bytes.size() - 16 - header_len);
    if (header.at("data_bytes").get<std::size_t>() != data.size()) corrupt("data section size mismatch");

    std::map<std::string, const json*> manifest;
    for (const auto& entry : header.at("tensors")) manifest[entry.at("name").get<std::string>()] = &entry;

    auto fill = [&](const std::string& name, const Shape& shape, std::span<float> dst) {
      auto it = manifest.find(name);
      if (it == manifest.end()) corrupt("missing tensor " + name);
      const auto& entry = *it->second;
      if (entry.at("shape").get<Shape>() != shape) {
        corrupt("tensor " + name + " has shape " + shape_to_string(entry.at("shape").get<Shape>()) + ", expected " +
                shape_to_string(shape));
      }
      const auto off = entry.at("byte_offset").get<std::size_t>();
      if (off + dst.size() * 4 > data.size()) corrupt("tensor " + name + " runs past the data section");
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::bit_cast<float>(get_u32(data, off + 4 * i));
      manifest.erase(it);
    };
    const auto& plist = state.optimizer.params();
    for (std::size_t i = 0; i < plist.size(); ++i) {
      const auto& name = plist[i].first;
      auto p = plist[i].second;  // shares storage with the model
      fill(name, p.shape(), p.mutable_data());
      fill("adam.m/" + name, p.shape(), state.optimizer.first_moments()[i]);
      fill("adam.v/" + name, p.shape(), state.optimizer.second_moments()[i]);
    }
    if (!manifest.empty()) corrupt("unexpected tensor " + manifest.begin()->first);

    const auto& ts = header.at("train_state");
    state.step = ts.at("step").get<std::size_t>();
    state.optimizer.set_steps_taken(ts.at("optimizer_steps").get<std::size_t>());
    if (!ts.at("pta_ema").is_null()) state.pta_ema = ts.at("pta_ema").get<double>();
    state.switched = ts.at("switched").get<bool>();
    for (const auto& row : ts.at("history")) {
      StepRecord r;
      r.step = row.at(0).get<std::size_t>();
      r.pta = row.at(1).get<double>();
      r.itc = row.at(2).get<double>();
      r.itm = row.at(3).get<double>();
      r.total = row.at(4).get<double>();
      r.mode = detector_mode_from_string(row.at(5).get<std::string>());
      state.history.push_back(r);
    }
    if (state.history.size() != state.step) corrupt("loss history does not match the step counter");
    return state;
  } catch (const json::exception& e) {
    corrupt(std::string("malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    corrupt(std::string("invalid stored config: ") + e.what());
  }
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(state);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("checkpoint: cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("checkpoint: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("checkpoint: cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace textprune
