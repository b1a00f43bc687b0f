#include "refer/train/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "refer/errors.hpp"

namespace refer::train {

namespace {

constexpr char kMagic[8] = {'R', 'E', 'F', 'C', 'K', 'P', 'T', '1'};

}  // namespace

std::uint64_t TrainState::weights_hash() const {
  std::uint64_t h = fnv1a("");
  for (const auto& p : model->store) {
    h = fnv1a(p.name, h);
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(p.value.data()), sizeof(float) * std::size_t(p.value.size())),
              h);
  }
  return h;
}

TrainState fresh_state(const TrainConfig& cfg, int step) {
  cfg.validate();
  TrainState s;
  s.config = cfg;
  s.model = std::make_unique<model::Model<float>>(cfg.model, cfg.seed);
  s.optimizer = nn::AdamW<float>(cfg.optimizer);
  s.step = step;
  s.config_hash = cfg.hash();
  s.rng.seed(cfg.seed ^ (0x9e3779b97f4a7c15ULL * std::uint64_t(step)));
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  std::ostringstream rng;
  rng << state.rng;
  nlohmann::json header = {{"step", state.step},
                           {"iteration", state.iteration},
                           {"complete", state.complete},
                           {"config_hash", state.config_hash},
                           {"data_hash", state.data_hash},
                           {"rng", rng.str()},
                           {"config", state.config.to_json()}};
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw InputError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    nn::AdamW<float>::write_pod(out, std::uint64_t(text.size()));
    out.write(text.data(), std::streamsize(text.size()));
    nn::save_parameters(out, state.model->store);
    state.optimizer.save(out);
    if (!out) throw InputError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || !std::equal(magic, magic + sizeof(magic), kMagic))
    throw FormatError(path.string() + " is not a checkpoint");
  const auto len = nn::AdamW<float>::read_pod<std::uint64_t>(in);
  if (len > (1u << 24)) throw FormatError("checkpoint header too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), std::streamsize(len))) throw FormatError("truncated checkpoint header");

  TrainState s;
  try {
    const auto h = nlohmann::json::parse(text);
    s.config = TrainConfig::from_json(h.at("config"));
    s.step = h.at("step").get<int>();
    s.iteration = h.at("iteration").get<long>();
    s.complete = h.at("complete").get<bool>();
    s.config_hash = h.at("config_hash").get<std::uint64_t>();
    s.data_hash = h.at("data_hash").get<std::uint64_t>();
    std::istringstream rng(h.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw FormatError("bad RNG state in checkpoint");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint header: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint config: " + std::string(e.what()));
  }
  if (s.step < 1 || s.step > 3) throw FormatError("bad step tag in checkpoint");
  if (s.config_hash != s.config.hash()) throw FormatError("checkpoint config does not match its hash");

  s.model = std::make_unique<model::Model<float>>(s.config.model, s.config.seed);
  nn::load_parameters(in, s.model->store);
  s.optimizer = nn::AdamW<float>(s.config.optimizer);
  s.optimizer.load(in, s.model->store);
  if (s.step == 2) s.model->train_only("reg");
  return s;
}

}  // namespace refer::train
