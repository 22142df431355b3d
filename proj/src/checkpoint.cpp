#include "multiad/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace multiad {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'M', 'A', 'D', 'C'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& in, std::size_t end) : in_(in), end_(end) {}

  void bytes(void* p, std::size_t n) {
    if (n > end_ - pos_) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > end_ - pos_) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    std::string s(in_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& data, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(n)));
}

struct Record {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

void write_record(Writer& w, const std::string& name, const Shape& shape, const float* data, Index n) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (Index d : shape) w.u32(static_cast<std::uint32_t>(d));
  w.bytes(data, static_cast<std::size_t>(n) * sizeof(float));
}

void write_adam(Writer& w, const std::string& prefix, const ParamList<float>& params, const AdamState<float>& adam,
                std::uint32_t& count) {
  if (adam.first_moment.empty()) return;
  std::size_t k = 0;
  for (const NamedTensor<float>& p : params) {
    if (!p.trainable) continue;
    const Shape& shape = p.tensor->shape();
    write_record(w, prefix + ".m." + p.name, shape, adam.first_moment[k].data(), adam.first_moment[k].size());
    write_record(w, prefix + ".v." + p.name, shape, adam.second_moment[k].data(), adam.second_moment[k].size());
    count += 2;
    ++k;
  }
}

json meta_json(const Model& m) {
  json history = json::array();
  for (const LossReport& r : m.history) history.push_back({r.loss_g, r.loss_d, r.loss_adv, r.loss_s});
  return {{"config", to_json(m.config)},
          {"state",
           {{"step", m.step},
            {"epoch", m.epoch},
            {"cursor", m.cursor},
            {"dropout_rng", m.dropout_rng.state()},
            {"student_adam_step", m.student_adam.step},
            {"discriminator_adam_step", m.discriminator_adam.step},
            {"refinement_calibrated", m.refinement.calibrated}}},
          {"history", history}};
}

}  // namespace

std::string serialize_checkpoint(Model& model) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(meta_json(model).dump());

  // Record count is patched once all records are written.
  const std::size_t count_at = w.buffer().size();
  w.u32(0);
  std::uint32_t count = 0;
  for (const NamedTensor<float>& p : model.named_tensors()) {
    write_record(w, p.name, p.tensor->shape(), p.tensor->data().data(), p.tensor->size());
    ++count;
  }
  for (std::size_t n = 0; n < model.refinement.levels.size(); ++n) {
    const RefinementLevel& r = model.refinement.levels[n];
    const float v[4] = {static_cast<float>(r.scale), static_cast<float>(r.bias), static_cast<float>(r.mean),
                        static_cast<float>(r.var)};
    write_record(w, "refinement.level" + std::to_string(n + 1), {4}, v, 4);
    ++count;
  }
  write_adam(w, "adam.student", model.student_parameters(), model.student_adam, count);
  write_adam(w, "adam.discriminator", model.discriminator_parameters(), model.discriminator_adam, count);
  std::memcpy(w.buffer().data() + count_at, &count, 4);
  w.u32(crc_of(w.buffer(), w.buffer().size()));
  return w.buffer();
}

namespace {

void load_adam(std::map<std::string, Record>& records, const std::string& prefix, const ParamList<float>& params,
               AdamState<float>& adam) {
  adam.first_moment.clear();
  adam.second_moment.clear();
  if (adam.step == 0) return;
  for (const NamedTensor<float>& p : params) {
    if (!p.trainable) continue;
    for (const char* which : {".m.", ".v."}) {
      const std::string name = prefix + which + p.name;
      const auto it = records.find(name);
      if (it == records.end()) throw FormatError("checkpoint is missing record " + name);
      if (it->second.shape != p.tensor->shape()) throw FormatError("checkpoint record " + name + " has wrong shape");
      VectorX<float> v = Eigen::Map<const VectorX<float>>(it->second.data.data(), p.tensor->size());
      (which[1] == 'm' ? adam.first_moment : adam.second_moment).push_back(std::move(v));
      records.erase(it);
    }
  }
}

}  // namespace

Model deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16) throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint file (bad magic)");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  Reader r(bytes, bytes.size() - 4);
  char magic[4];
  r.bytes(magic, 4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  if (crc_of(bytes, bytes.size() - 4) != stored_crc) throw FormatError("checkpoint CRC mismatch (truncated or corrupt)");

  json meta;
  try {
    meta = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  Model m = allocate_model(config_from_json(meta.at("config")));

  std::map<std::string, Record> records;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    rec.name = r.str();
    const std::uint32_t ndims = r.u32();
    if (ndims > 8) throw FormatError("checkpoint record " + rec.name + " has " + std::to_string(ndims) + " dims");
    Index n = 1;
    for (std::uint32_t d = 0; d < ndims; ++d) {
      rec.shape.push_back(static_cast<Index>(r.u32()));
      n *= rec.shape.back();
    }
    if (n < 0 || n > (Index{1} << 31)) throw FormatError("checkpoint record " + rec.name + " is too large");
    rec.data.resize(static_cast<std::size_t>(n));
    r.bytes(rec.data.data(), rec.data.size() * sizeof(float));
    if (!records.emplace(rec.name, rec).second) throw FormatError("duplicate checkpoint record " + rec.name);
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint records");

  try {
    const json& state = meta.at("state");
    m.step = state.at("step").get<std::int64_t>();
    m.epoch = state.at("epoch").get<std::int64_t>();
    m.cursor = state.at("cursor").get<std::int64_t>();
    m.dropout_rng.set_state(state.at("dropout_rng").get<std::string>());
    m.student_adam.step = state.at("student_adam_step").get<std::int64_t>();
    m.discriminator_adam.step = state.at("discriminator_adam_step").get<std::int64_t>();
    m.refinement.calibrated = state.at("refinement_calibrated").get<bool>();
    for (const json& h : meta.at("history")) {
      LossReport rep;
      rep.loss_g = h.at(0).get<double>();
      rep.loss_d = h.at(1).get<double>();
      rep.loss_adv = h.at(2).get<double>();
      rep.loss_s = h.at(3).get<double>();
      rep.lambda = m.config.lambda;
      rep.adversarial = m.config.discriminator_enabled;
      m.history.push_back(rep);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint state: ") + e.what());
  }

  for (const NamedTensor<float>& p : m.named_tensors()) {
    const auto it = records.find(p.name);
    if (it == records.end()) throw FormatError("checkpoint is missing record " + p.name);
    if (it->second.shape != p.tensor->shape()) {
      throw FormatError("checkpoint record " + p.name + " has shape " + shape_string(it->second.shape) +
                        ", expected " + shape_string(p.tensor->shape()));
    }
    p.tensor->data() = Eigen::Map<const VectorX<float>>(it->second.data.data(), p.tensor->size());
    records.erase(it);
  }
  for (std::size_t n = 0; n < m.refinement.levels.size(); ++n) {
    const std::string name = "refinement.level" + std::to_string(n + 1);
    const auto it = records.find(name);
    if (it == records.end() || it->second.shape != Shape{4}) throw FormatError("checkpoint is missing record " + name);
    const std::vector<float>& v = it->second.data;
    m.refinement.levels[n] = {v[0], v[1], v[2], v[3]};
    records.erase(it);
  }
  load_adam(records, "adam.student", m.student_parameters(), m.student_adam);
  load_adam(records, "adam.discriminator", m.discriminator_parameters(), m.discriminator_adam);
  if (!records.empty()) throw FormatError("unexpected checkpoint record " + records.begin()->first);
  return m;
}

void save_checkpoint(Model& model, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace multiad
