#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "tscg/trainer.hpp"

// Checkpoint file: "TSCK1" magic, u32 LE header length, UTF-8 JSON header
// (config, phase, history, tensor manifest), then the tensors as raw
// little-endian f32 in manifest order. Round trips bit-exactly.

namespace tscg {

using nlohmann::json;

namespace {

constexpr char kMagic[5] = {'T', 'S', 'C', 'K', '1'};

// Visits every trainable tensor of the model in a fixed order.
void for_each_tensor(Model& m,
                     const std::function<void(const std::string&, std::vector<float>&)>& fn) {
  m.denoiser.for_each_param(
      [&](const std::string& name, std::vector<float>& w, std::vector<float>&) {
        fn("denoiser." + name, w);
      });
  fn("fusion.phi1.w", m.fusion.phi1.w);
  fn("fusion.phi1.b", m.fusion.phi1.b);
  fn("fusion.phi2.w", m.fusion.phi2.w);
  fn("fusion.phi2.b", m.fusion.phi2.b);
  fn("fusion.phi3.w", m.fusion.phi3.w);
  fn("fusion.phi3.b", m.fusion.phi3.b);
  fn("head.weights", m.head.weights);
  fn("head.bias", m.head.bias);
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  Model& model = const_cast<Model&>(ck.model);  // visitation only, not mutated

  json manifest = json::array();
  std::vector<const std::vector<float>*> blobs;
  for_each_tensor(model, [&](const std::string& name, std::vector<float>& w) {
    manifest.push_back({{"name", name}, {"size", w.size()}});
    blobs.push_back(&w);
  });

  json header{{"version", 1},
              {"phase", ck.phase},
              {"epochs_completed", ck.epochs_completed},
              {"history", ck.history},
              {"config", json::parse(ck.model.cfg.to_json())},
              {"spec",
               {{"rows", model.spec.rows},
                {"cols", model.spec.cols},
                {"resolution_m", model.spec.resolution_m}}},
              {"classes", model.classes.names},
              {"tensors", manifest}};
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, 5);
  const std::uint32_t hlen = static_cast<std::uint32_t>(htext.size());
  char lenbuf[4];
  std::memcpy(lenbuf, &hlen, 4);
  out.write(lenbuf, 4);
  out.write(htext.data(), htext.size());
  for (const auto* b : blobs)
    out.write(reinterpret_cast<const char*>(b->data()),
              static_cast<std::streamsize>(b->size() * sizeof(float)));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, kMagic, 5) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  char lenbuf[4];
  in.read(lenbuf, 4);
  std::uint32_t hlen = 0;
  std::memcpy(&hlen, lenbuf, 4);
  std::string htext(hlen, '\0');
  in.read(htext.data(), hlen);
  if (!in) throw std::runtime_error("checkpoint: truncated header in " + path);
  json header = json::parse(htext);
  if (header.value("version", 0) != 1)
    throw std::runtime_error("checkpoint: unsupported version in " + path);

  TrainConfig cfg = TrainConfig::from_json(header.at("config").dump());
  GridSpec spec{header.at("spec").at("rows").get<int>(),
                header.at("spec").at("cols").get<int>(),
                header.at("spec").at("resolution_m").get<double>()};
  ClassSet classes;
  classes.names = header.at("classes").get<std::vector<std::string>>();

  Checkpoint ck;
  ck.model = make_model(cfg, spec, classes);
  ck.phase = header.at("phase").get<std::string>();
  ck.epochs_completed = header.at("epochs_completed").get<int>();
  ck.history = header.at("history").get<std::vector<std::string>>();

  const json& manifest = header.at("tensors");
  std::size_t idx = 0;
  for_each_tensor(ck.model, [&](const std::string& name, std::vector<float>& w) {
    if (idx >= manifest.size())
      throw std::runtime_error("checkpoint: tensor manifest too short: " + name);
    const json& entry = manifest[idx++];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("size").get<std::size_t>() != w.size())
      throw std::runtime_error("checkpoint: tensor mismatch at " + name);
    in.read(reinterpret_cast<char*>(w.data()),
            static_cast<std::streamsize>(w.size() * sizeof(float)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor " + name);
  });
  if (idx != manifest.size())
    throw std::runtime_error("checkpoint: unexpected extra tensors in manifest");
  return ck;
}

}  // namespace tscg
