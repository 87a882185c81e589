// Copyright 2026 The FDDA Toolkit Authors
// Licensed under the Apache License, Version 2.0

#ifndef FDDA_ARCHIVE_HPP
#define FDDA_ARCHIVE_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fdda/bns.hpp"
#include "fdda/generator.hpp"
#include "fdda/network.hpp"

// Single-file model container:
//
//   bytes 0..7   magic "FDDAARC\0"
//   u32          format version
//   u64          manifest length n
//   n bytes      JSON manifest
//   rest         little-endian float32 blobs, addressed by manifest offsets
//
// All integers are little-endian. Offsets and counts are in floats.

namespace fdda {

class IoError : public Error {
 public:
  using Error::Error;
};
class VersionError : public Error {
 public:
  using Error::Error;
};
class CorruptArchiveError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::uint32_t kArchiveVersion = 1;
inline constexpr std::array<char, 8> kArchiveMagic{'F', 'D', 'D', 'A', 'A', 'R', 'C', '\0'};

struct ModelArchive {
  Network<float> model;
  std::optional<BnRunningStats<float>> running;
  std::optional<ClassCentroids<float>> centroids;
  std::optional<GeneratorNet<float>> generator;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
};

namespace detail {

using Json = nlohmann::ordered_json;

template <typename U>
void put_le(std::string& out, U v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::array<char, sizeof(U)> b;
    std::memcpy(b.data(), &v, sizeof(U));
    std::reverse(b.begin(), b.end());
    out.append(b.data(), sizeof(U));
  } else {
    char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    out.append(b, sizeof(U));
  }
}

template <typename U>
U get_le(const char* p) {
  std::array<char, sizeof(U)> b;
  std::memcpy(b.data(), p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
  U v;
  std::memcpy(&v, b.data(), sizeof(U));
  return v;
}

class BlobWriter {
 public:
  Json add(const Tensor& t) {
    Json e{{"shape", t.shape()}, {"offset", count_}, {"count", t.size()}};
    for (float v : t.data()) put_le(bytes_, std::bit_cast<std::uint32_t>(v));
    count_ += t.size();
    return e;
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
  std::size_t count_ = 0;
};

class BlobReader {
 public:
  BlobReader(const char* data, std::size_t floats) : data_(data), floats_(floats) {}

  Tensor get(const Json& e) const {
    try {
      const Shape shape = e.at("shape").get<Shape>();
      const std::size_t off = e.at("offset").get<std::size_t>(), count = e.at("count").get<std::size_t>();
      if (numel(shape) != count) throw CorruptArchiveError("archive: blob shape " + to_string(shape) +
                                                           " does not match length " + std::to_string(count));
      if (off > floats_ || count > floats_ - off) throw CorruptArchiveError("archive: blob exceeds file length");
      std::vector<float> v(count);
      for (std::size_t i = 0; i < count; ++i)
        v[i] = std::bit_cast<float>(get_le<std::uint32_t>(data_ + 4 * (off + i)));
      return Tensor(shape, std::move(v));
    } catch (const nlohmann::json::exception& ex) {
      throw CorruptArchiveError(std::string("archive: malformed blob entry: ") + ex.what());
    }
  }

 private:
  const char* data_;
  std::size_t floats_;
};

inline Json quant_json(const QuantParams& q) {
  return {{"bits", q.bits}, {"lower", q.lower}, {"upper", q.upper}, {"scale", q.scale}};
}

inline QuantParams quant_from_json(const Json& j) {
  return QuantParams{j.at("bits").get<int>(), j.at("lower").get<double>(), j.at("upper").get<double>(),
                     j.at("scale").get<double>()};
}

inline Json network_json(const Network<float>& net, BlobWriter& blobs) {
  Json layers = Json::array();
  for (const auto& l : net.layers()) {
    const auto& s = l.spec;
    Json j{{"kind", layer_kind_name(s.kind)}, {"in", s.in},     {"out", s.out},
           {"kernel", s.kernel},               {"stride", s.stride}, {"pad", s.pad},
           {"target", s.target},               {"weight_bits", l.weight_bits}};
    if (l.act_quant) j["act_quant"] = quant_json(*l.act_quant);
    Json params = Json::array();
    for (const auto& p : l.params) params.push_back(blobs.add(p));
    j["params"] = params;
    if (s.kind == LayerKind::BatchNorm) {
      j["running_mean"] = blobs.add(l.running_mean);
      j["running_var"] = blobs.add(l.running_var);
    }
    layers.push_back(j);
  }
  Json out{{"input_shape", net.input_shape()}, {"bn_layers", net.bn_layer_count()}, {"layers", layers}};
  if (net.input_quant()) out["input_quant"] = quant_json(*net.input_quant());
  return out;
}

inline Network<float> network_from_json(const Json& j, const BlobReader& blobs) {
  std::vector<LayerSpec> specs;
  for (const auto& lj : j.at("layers")) {
    LayerSpec s = LayerSpec::make(layer_kind_from_name(lj.at("kind").get<std::string>()), lj.at("in").get<std::size_t>(),
                                  lj.at("out").get<std::size_t>(), lj.at("kernel").get<std::size_t>(),
                                  lj.at("stride").get<std::size_t>(), lj.at("pad").get<std::size_t>());
    s.target = lj.at("target").get<Shape>();
    specs.push_back(s);
  }
  Network<float> net(j.at("input_shape").get<Shape>(), specs);
  if (net.bn_layer_count() != j.at("bn_layers").get<std::size_t>())
    throw CorruptArchiveError("archive: manifest BN layer count disagrees with layer list");
  if (j.contains("input_quant")) net.set_input_quant(quant_from_json(j.at("input_quant")));
  auto& layers = net.layers();
  const auto& lj = j.at("layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const auto& e = lj[i];
    l.weight_bits = e.at("weight_bits").get<int>();
    if (e.contains("act_quant")) l.act_quant = quant_from_json(e.at("act_quant"));
    const auto& params = e.at("params");
    if (params.size() != l.params.size()) throw CorruptArchiveError("archive: wrong parameter count in layer " + std::to_string(i));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor t = blobs.get(params[k]);
      if (t.shape() != l.params[k].shape())
        throw CorruptArchiveError("archive: parameter shape " + to_string(t.shape()) + " in layer " + std::to_string(i) +
                                  ", expected " + to_string(l.params[k].shape()));
      std::copy(t.data().begin(), t.data().end(), l.params[k].data().begin());
    }
    if (l.spec.kind == LayerKind::BatchNorm) {
      l.running_mean = blobs.get(e.at("running_mean"));
      l.running_var = blobs.get(e.at("running_var"));
      if (l.running_mean.size() != l.spec.in || l.running_var.size() != l.spec.in)
        throw CorruptArchiveError("archive: running statistics length mismatch in layer " + std::to_string(i));
    }
  }
  return net;
}

inline Json stats_json(const LayerStatsList<float>& list, BlobWriter& blobs) {
  Json out = Json::array();
  for (const auto& s : list) out.push_back({{"mean", blobs.add(s.mean)}, {"var", blobs.add(s.var)}});
  return out;
}

inline LayerStatsList<float> stats_from_json(const Json& j, const BlobReader& blobs) {
  LayerStatsList<float> out;
  for (const auto& e : j) out.push_back({blobs.get(e.at("mean")), blobs.get(e.at("var"))});
  return out;
}

}  // namespace detail

/// Writes `a` to `path`. Throws IoError when the file cannot be written.
inline void save_archive(const ModelArchive& a, const std::string& path) {
  using detail::Json;
  detail::BlobWriter blobs;
  Json manifest{{"format", "fdda-archive"}, {"version", kArchiveVersion}};
  manifest["model"] = detail::network_json(a.model, blobs);
  if (a.running) {
    Json r = Json::array();
    for (std::size_t l = 0; l < a.running->layers(); ++l)
      r.push_back({{"mean", blobs.add(a.running->mean[l])}, {"var", blobs.add(a.running->var[l])}});
    manifest["running_stats"] = r;
  }
  if (a.centroids) {
    const auto& c = *a.centroids;
    Json classes = Json::array();
    for (const auto& [cls, stats] : c.centroids) classes.push_back({{"class", cls}, {"layers", detail::stats_json(stats, blobs)}});
    manifest["centroids"] = {{"first_layer", c.first_layer},
                             {"last_layer", c.last_layer},
                             {"num_classes", c.num_classes},
                             {"available_classes", c.available_classes},
                             {"classes", classes}};
  }
  if (a.generator) {
    const auto& g = *a.generator;
    manifest["generator"] = {{"z_dim", g.spec().z_dim},
                             {"num_classes", g.spec().num_classes},
                             {"image_shape", g.spec().image_shape},
                             {"channels", g.spec().channels},
                             {"embedding", blobs.add(g.embedding_table())},
                             {"backbone", detail::network_json(g.backbone(), blobs)}};
  }
  manifest["metadata"] = a.metadata;
  const std::string text = manifest.dump();

  std::string out(kArchiveMagic.begin(), kArchiveMagic.end());
  detail::put_le<std::uint32_t>(out, kArchiveVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  out += blobs.bytes();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

/// Reads an archive. Throws IoError (unreadable file), VersionError
/// (unsupported format version) or CorruptArchiveError (anything malformed).
inline ModelArchive load_archive(const std::string& path) {
  using detail::Json;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("read failed for '" + path + "'");

  constexpr std::size_t header = 8 + 4 + 8;
  if (buf.size() < header) throw CorruptArchiveError("archive: truncated header in '" + path + "'");
  if (!std::equal(kArchiveMagic.begin(), kArchiveMagic.end(), buf.begin()))
    throw CorruptArchiveError("archive: bad magic in '" + path + "'");
  const auto version = detail::get_le<std::uint32_t>(buf.data() + 8);
  if (version != kArchiveVersion)
    throw VersionError("archive: format version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kArchiveVersion));
  const auto mlen = detail::get_le<std::uint64_t>(buf.data() + 12);
  if (mlen > buf.size() - header) throw CorruptArchiveError("archive: truncated manifest in '" + path + "'");
  const std::size_t blob_start = header + static_cast<std::size_t>(mlen);
  if ((buf.size() - blob_start) % 4 != 0) throw CorruptArchiveError("archive: blob region is not a whole number of floats");

  ModelArchive a;
  try {
    const Json m = Json::parse(buf.begin() + header, buf.begin() + static_cast<std::ptrdiff_t>(blob_start));
    if (m.at("version").get<std::uint32_t>() != version)
      throw CorruptArchiveError("archive: manifest version disagrees with header");
    const detail::BlobReader blobs(buf.data() + blob_start, (buf.size() - blob_start) / 4);
    a.model = detail::network_from_json(m.at("model"), blobs);
    if (m.contains("running_stats")) {
      BnRunningStats<float> r;
      for (const auto& e : m.at("running_stats")) {
        r.mean.push_back(blobs.get(e.at("mean")));
        r.var.push_back(blobs.get(e.at("var")));
      }
      a.running = std::move(r);
    }
    if (m.contains("centroids")) {
      const auto& cj = m.at("centroids");
      ClassCentroids<float> c;
      c.first_layer = cj.at("first_layer").get<std::size_t>();
      c.last_layer = cj.at("last_layer").get<std::size_t>();
      c.num_classes = cj.at("num_classes").get<std::size_t>();
      for (int cls : cj.at("available_classes")) c.available_classes.insert(cls);
      for (const auto& e : cj.at("classes")) c.centroids.emplace(e.at("class").get<int>(), detail::stats_from_json(e.at("layers"), blobs));
      a.centroids = std::move(c);
    }
    if (m.contains("generator")) {
      const auto& gj = m.at("generator");
      GeneratorSpec gs{gj.at("z_dim").get<std::size_t>(), gj.at("num_classes").get<std::size_t>(),
                       gj.at("image_shape").get<Shape>(), gj.at("channels").get<std::size_t>()};
      GeneratorNet<float> g(gs);
      const Tensor emb = blobs.get(gj.at("embedding"));
      if (emb.shape() != g.embedding_table().shape()) throw CorruptArchiveError("archive: generator embedding shape mismatch");
      std::copy(emb.data().begin(), emb.data().end(), g.embedding_table().data().begin());
      auto backbone = detail::network_from_json(gj.at("backbone"), blobs);
      if (backbone.specs() != g.backbone().specs()) throw CorruptArchiveError("archive: generator layers do not match its spec");
      g.backbone() = std::move(backbone);
      a.generator = std::move(g);
    }
    if (m.contains("metadata")) a.metadata = m.at("metadata");
  } catch (const nlohmann::json::exception& ex) {
    throw CorruptArchiveError(std::string("archive: corrupt manifest: ") + ex.what());
  } catch (const CorruptArchiveError&) {
    throw;
  } catch (const Error& ex) {
    throw CorruptArchiveError(std::string("archive: invalid content: ") + ex.what());
  }
  return a;
}

/// True when both networks have identical layers, quantizers and parameter bits.
inline bool bitwise_equal(const Network<float>& a, const Network<float>& b) {
  auto same = [](const Tensor& x, const Tensor& y) {
    return x.shape() == y.shape() &&
           std::memcmp(x.data().data(), y.data().data(), x.size() * sizeof(float)) == 0;
  };
  if (a.input_shape() != b.input_shape() || a.specs() != b.specs() || a.input_quant() != b.input_quant()) return false;
  for (std::size_t i = 0; i < a.layers().size(); ++i) {
    const auto &la = a.layers()[i], &lb = b.layers()[i];
    if (la.weight_bits != lb.weight_bits || la.act_quant != lb.act_quant) return false;
    for (std::size_t k = 0; k < la.params.size(); ++k)
      if (!same(la.params[k], lb.params[k])) return false;
    if (la.spec.kind == LayerKind::BatchNorm &&
        (!same(la.running_mean, lb.running_mean) || !same(la.running_var, lb.running_var)))
      return false;
  }
  return true;
}

}  // namespace fdda

#endif  // FDDA_ARCHIVE_HPP
