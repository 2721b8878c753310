#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vibtk/errors.hpp"
#include "vibtk/serialize.hpp"
#include "vibtk/trainer.hpp"

namespace vibtk::checkpoint {

inline constexpr char kMagic[] = "VIBTKCKPT";
inline constexpr std::uint32_t kVersion = 1;

namespace detail {

inline nlohmann::json net_manifest(const nn::Network& net) {
  nlohmann::json arrays = nlohmann::json::array();
  for (std::size_t i = 0; i < net.params.size(); ++i)
    arrays.push_back({{"name", net.param_names[i]}, {"length", net.params[i].size()}});
  return arrays;
}

inline void check_net(const nn::Network& net, const nlohmann::json& arrays, const std::string& which) {
  if (arrays.size() != net.params.size())
    throw consistency_error("checkpoint " + which + " holds " + std::to_string(arrays.size()) +
                            " arrays, architecture needs " + std::to_string(net.params.size()));
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    if (arrays[i].at("name").get<std::string>() != net.param_names[i] ||
        arrays[i].at("length").get<std::size_t>() != net.params[i].size())
      throw consistency_error("checkpoint " + which + " array '" +
                              arrays[i].at("name").get<std::string>() +
                              "' does not match parameter '" + net.param_names[i] + "'");
  }
}

}  // namespace detail

/// Layout: magic, u32 manifest length, JSON manifest (sorted keys, hence
/// byte-deterministic), then the flat little-endian float payload. The
/// manifest records the payload checksum and per-network array table.
inline void save(const std::string& path, const trainer::Model& model, std::uint64_t seed) {
  std::vector<const nn::Network*> nets;
  nlohmann::json manifest;
  manifest["version"] = kVersion;
  manifest["model_tag"] = model.tag;
  manifest["seed"] = seed;
  manifest["vib"] = {{"beta", model.vibcfg.beta},
                     {"eta", model.vibcfg.eta},
                     {"mode", model.vibcfg.mode == vib::Mode::M ? "M" : "R"},
                     {"ic", model.vibcfg.ic}};
  nlohmann::json networks;
  if (!model.kind.vib) {
    networks["baseline"] = detail::net_manifest(model.baseline);
    nets.push_back(&model.baseline);
  } else {
    networks["encoder"] = detail::net_manifest(model.encoder);
    networks["classifier"] = detail::net_manifest(model.classifier);
    nets.push_back(&model.encoder);
    nets.push_back(&model.classifier);
    if (model.kind.mine) {
      networks["critic"] = detail::net_manifest(model.critic);
      nets.push_back(&model.critic);
    }
  }
  manifest["networks"] = networks;

  std::vector<float> payload;
  nlohmann::json offsets = nlohmann::json::array();
  for (const auto* net : nets)
    for (const auto& p : net->params) {
      if (!p.all_finite()) throw numeric_error("refusing to checkpoint non-finite parameters");
      offsets.push_back(payload.size() * 4);
      payload.insert(payload.end(), p.data.begin(), p.data.end());
    }
  manifest["offsets"] = offsets;
  manifest["checksum"] = serialize::crc32(payload.data(), payload.size() * 4);

  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path);
  out.write(kMagic, sizeof kMagic - 1);
  serialize::write_u32(out, kVersion);
  serialize::write_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  serialize::write_floats(out, payload);
}

struct Loaded {
  trainer::Model model;
  std::uint64_t seed = 0;
};

inline Loaded load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  char magic[sizeof kMagic - 1];
  if (!in.read(magic, sizeof magic) || std::string(magic, sizeof magic) != kMagic)
    throw format_error("not a checkpoint file: " + path);
  const auto version = serialize::read_u32(in, path);
  if (version != kVersion)
    throw format_error("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                       std::to_string(kVersion) + ")");
  const auto len = serialize::read_u32(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw io_error("truncated " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw format_error("bad checkpoint manifest in " + path + ": " + e.what());
  }

  Loaded result;
  result.seed = manifest.at("seed").get<std::uint64_t>();
  trainer::TrainConfig cfg;
  cfg.model_tag = manifest.at("model_tag").get<std::string>();
  cfg.seed = result.seed;
  const auto& v = manifest.at("vib");
  cfg.vibcfg = vib::VIBConfig(v.at("beta").get<float>(), v.at("eta").get<std::size_t>(),
                              v.at("mode").get<std::string>() == "M" ? vib::Mode::M : vib::Mode::R,
                              v.at("ic").get<float>());
  const auto kind = trainer::parse_tag(cfg.model_tag);
  if (kind.adversarial) cfg.attack = attacks::AttackConfig::pgd_at(0.3f, 0.01f, 20, true);
  result.model = trainer::make_model(cfg);

  std::vector<nn::Network*> nets;
  const auto& networks = manifest.at("networks");
  for (const char* name : {"baseline", "encoder", "classifier", "critic"}) {
    const bool expected = kind.vib ? (std::string(name) != "baseline" &&
                                      (std::string(name) != "critic" || kind.mine))
                                   : std::string(name) == "baseline";
    if (expected != networks.contains(name))
      throw consistency_error("checkpoint networks do not match tag '" + cfg.model_tag +
                              "': " + (expected ? "missing" : "unexpected") + " '" + name + "'");
  }
  if (!kind.vib) {
    detail::check_net(result.model.baseline, networks.at("baseline"), "baseline");
    nets.push_back(&result.model.baseline);
  } else {
    detail::check_net(result.model.encoder, networks.at("encoder"), "encoder");
    detail::check_net(result.model.classifier, networks.at("classifier"), "classifier");
    nets.push_back(&result.model.encoder);
    nets.push_back(&result.model.classifier);
    if (kind.mine) {
      detail::check_net(result.model.critic, networks.at("critic"), "critic");
      nets.push_back(&result.model.critic);
    }
  }

  std::size_t total = 0;
  for (const auto* net : nets) total += net->param_count();
  std::vector<float> payload(total);
  serialize::read_floats(in, payload, path);
  if (serialize::crc32(payload.data(), payload.size() * 4) !=
      manifest.at("checksum").get<std::uint32_t>())
    throw format_error("checkpoint payload corrupted: checksum mismatch in " + path);
  std::size_t pos = 0;
  for (auto* net : nets)
    for (auto& p : net->params) {
      std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(pos), p.size(), p.data.begin());
      pos += p.size();
    }
  return result;
}

}  // namespace vibtk::checkpoint
