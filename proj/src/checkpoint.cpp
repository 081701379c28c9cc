#include "crcnn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

namespace crcnn {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts need byte swaps");

namespace {

struct BlobEntry {
  std::string name;
  std::size_t count;
};

// Blob order contract: per block kernel, bias, [gamma, beta, running_mean,
// running_var]; then adam.m.<k> / adam.v.<k> per trainable when present.
void collect_blobs(NetworkSpec& net, std::vector<std::pair<std::string, std::span<float>>>& out) {
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    auto& b = net.blocks[i];
    const std::string prefix = "block" + std::to_string(i) + ".";
    out.push_back({prefix + "kernel", std::span<float>(b.conv.kernel.data)});
    out.push_back({prefix + "bias", std::span<float>(b.conv.bias)});
    if (b.bn) {
      out.push_back({prefix + "gamma", std::span<float>(b.bn->gamma)});
      out.push_back({prefix + "beta", std::span<float>(b.bn->beta)});
      out.push_back({prefix + "running_mean", std::span<float>(b.bn->running_mean)});
      out.push_back({prefix + "running_var", std::span<float>(b.bn->running_var)});
    }
  }
}

json block_table(const NetworkSpec& net) {
  json blocks = json::array();
  for (const auto& b : net.blocks)
    blocks.push_back({{"color", to_string(b.color)},
                      {"activation", to_string(b.act)},
                      {"in", b.conv.in_ch()},
                      {"out", b.conv.out_ch()},
                      {"batchnorm", b.bn.has_value()}});
  return blocks;
}

}  // namespace

void save_checkpoint(const fs::path& path, const NetworkSpec& net,
                     const CheckpointMeta& meta, const AdamState* optimizer) {
  NetworkSpec& mutable_net = const_cast<NetworkSpec&>(net);  // spans only, no writes
  std::vector<std::pair<std::string, std::span<float>>> blobs;
  collect_blobs(mutable_net, blobs);
  if (optimizer) {
    for (std::size_t k = 0; k < optimizer->m.size(); ++k)
      blobs.push_back({"adam.m." + std::to_string(k),
                       std::span<float>(const_cast<std::vector<float>&>(optimizer->m[k]))});
    for (std::size_t k = 0; k < optimizer->v.size(); ++k)
      blobs.push_back({"adam.v." + std::to_string(k),
                       std::span<float>(const_cast<std::vector<float>&>(optimizer->v[k]))});
  }

  json header;
  header["format_version"] = kCheckpointVersion;
  header["network"] = net.name;
  header["input_channels"] = net.input_channels;
  header["blocks"] = block_table(net);
  header["metadata"] = {{"epochs_run", meta.epochs_run},
                        {"final_loss", meta.final_loss},
                        {"seed", meta.seed},
                        {"dataset_mean", meta.dataset_mean},
                        {"threshold", meta.threshold}};
  if (optimizer)
    header["optimizer"] = {{"step", optimizer->step},
                           {"learning_rate", optimizer->learning_rate},
                           {"beta1", optimizer->beta1},
                           {"beta2", optimizer->beta2},
                           {"epsilon", optimizer->epsilon},
                           {"tensors", optimizer->m.size()}};
  json blob_table = json::array();
  for (const auto& [name, span] : blobs)
    blob_table.push_back({{"name", name}, {"count", span.size()}});
  header["blobs"] = blob_table;

  const std::string header_text = header.dump();
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint: " + tmp.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint64_t len = header_text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, span] : blobs)
      out.write(reinterpret_cast<const char*>(span.data()),
                static_cast<std::streamsize>(span.size() * sizeof(float)));
    if (!out) throw DataError("short write on checkpoint: " + tmp.string());
  }
  fs::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());

  char magic[sizeof kCheckpointMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw DataError("not a checkpoint (bad magic): " + path.string());
  std::uint64_t header_len = 0;
  if (!in.read(reinterpret_cast<char*>(&header_len), sizeof header_len))
    throw DataError("truncated checkpoint header: " + path.string());
  std::string header_text(header_len, '\0');
  if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len)))
    throw DataError("truncated checkpoint header: " + path.string());

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint header: " + std::string(e.what()));
  }
  if (header.value("format_version", -1) != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(header.value("format_version", -1)));

  LoadedCheckpoint ck;
  ck.net.name = header.at("network").get<std::string>();
  ck.net.input_channels = header.at("input_channels").get<int>();
  int expected_in = ck.net.input_channels;
  for (const auto& jb : header.at("blocks")) {
    ConvBlock b;
    const int in = jb.at("in").get<int>();
    const int out = jb.at("out").get<int>();
    if (in != expected_in)
      throw DataError("checkpoint block table disagrees with declared channels: expected " +
                      std::to_string(expected_in) + " in, got " + std::to_string(in));
    b.conv = ConvParams(out, in);
    if (jb.at("batchnorm").get<bool>()) b.bn = BatchNormParams(out);
    b.act = activation_from_string(jb.at("activation").get<std::string>());
    b.color = color_from_string(jb.at("color").get<std::string>());
    ck.net.blocks.push_back(std::move(b));
    expected_in = out;
  }

  const auto& jm = header.at("metadata");
  ck.meta.epochs_run = jm.at("epochs_run").get<int>();
  ck.meta.final_loss = jm.at("final_loss").get<double>();
  ck.meta.seed = jm.at("seed").get<std::uint64_t>();
  ck.meta.dataset_mean = jm.at("dataset_mean").get<double>();
  ck.meta.threshold = jm.at("threshold").get<double>();

  std::vector<std::pair<std::string, std::span<float>>> blobs;
  collect_blobs(ck.net, blobs);
  if (header.contains("optimizer")) {
    const auto& jo = header.at("optimizer");
    AdamState opt;
    opt.step = jo.at("step").get<std::int64_t>();
    opt.learning_rate = jo.at("learning_rate").get<float>();
    opt.beta1 = jo.at("beta1").get<float>();
    opt.beta2 = jo.at("beta2").get<float>();
    opt.epsilon = jo.at("epsilon").get<float>();
    auto refs = trainable_params(ck.net);
    for (const auto& r : refs) opt.m.emplace_back(r.values.size(), 0.f);
    for (const auto& r : refs) opt.v.emplace_back(r.values.size(), 0.f);
    if (jo.at("tensors").get<std::size_t>() != opt.m.size())
      throw DataError("checkpoint optimizer tensor count mismatch");
    ck.optimizer = std::move(opt);
    for (std::size_t k = 0; k < ck.optimizer->m.size(); ++k)
      blobs.push_back({"adam.m." + std::to_string(k), std::span<float>(ck.optimizer->m[k])});
    for (std::size_t k = 0; k < ck.optimizer->v.size(); ++k)
      blobs.push_back({"adam.v." + std::to_string(k), std::span<float>(ck.optimizer->v[k])});
  }

  const auto& jblobs = header.at("blobs");
  if (jblobs.size() != blobs.size())
    throw DataError("checkpoint blob table size " + std::to_string(jblobs.size()) +
                    " disagrees with network shape (" + std::to_string(blobs.size()) + ")");
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    const auto& jb = jblobs[i];
    if (jb.at("name").get<std::string>() != blobs[i].first ||
        jb.at("count").get<std::size_t>() != blobs[i].second.size())
      throw DataError("checkpoint blob '" + jb.at("name").get<std::string>() +
                      "' disagrees with network shape");
    if (!in.read(reinterpret_cast<char*>(blobs[i].second.data()),
                 static_cast<std::streamsize>(blobs[i].second.size() * sizeof(float))))
      throw DataError("truncated checkpoint blob '" + blobs[i].first + "'");
  }
  return ck;
}

}  // namespace crcnn
