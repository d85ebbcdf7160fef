#include "ivcl/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <boost/crc.hpp>
#include <fstream>
#include <map>
#include <span>

namespace ivcl {

namespace {

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * i)));
}

void put_text(std::vector<std::uint8_t>& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

void put_floats(std::vector<std::uint8_t>& out, std::span<const float> xs) {
  put<std::uint64_t>(out, xs.size());
  for (float x : xs) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(x));
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}
  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string text() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::vector<float> floats() {
    const auto n = get<std::uint64_t>();
    if (n > (end_ - pos_) / 4) throw DataError("checkpoint: truncated file");
    std::vector<float> out(n);
    for (auto& x : out) x = std::bit_cast<float>(get<std::uint32_t>());
    return out;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw DataError("checkpoint: truncated file");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint) {
  std::vector<std::uint8_t> out{'I', 'V', 'C', 'K'};
  put<std::uint32_t>(out, kCheckpointVersion);
  put_text(out, checkpoint.config);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const auto& [name, t] : checkpoint.tensors) {
    put_text(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put_floats(out, t.to_f32());
  }
  put<std::uint8_t>(out, checkpoint.optimizer ? 1 : 0);
  if (checkpoint.optimizer) {
    put<std::uint64_t>(out, static_cast<std::uint64_t>(checkpoint.optimizer->steps));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.optimizer->moments.size()));
    for (const auto& m : checkpoint.optimizer->moments) {
      put_text(out, m.name);
      put_floats(out, m.m);
      put_floats(out, m.v);
    }
  }
  put<std::uint32_t>(out, crc32(out.data(), out.size()));
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12 || std::string(bytes.begin(), bytes.begin() + 4) != "IVCK")
    throw DataError("checkpoint: bad magic");
  const auto body = bytes.size() - 4;
  std::uint32_t stored = 0;
  for (std::size_t i = 0; i < 4; ++i) stored |= static_cast<std::uint32_t>(bytes[body + i]) << (8 * i);
  Reader in(bytes, body);
  for (int i = 0; i < 4; ++i) in.get<std::uint8_t>();
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  if (crc32(bytes.data(), body) != stored) throw DataError("checkpoint: checksum mismatch (file corrupted)");
  Checkpoint c;
  c.config = in.text();
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = in.text();
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw DataError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::int64_t>(in.get<std::uint64_t>()));
    auto data = in.floats();
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw DataError("checkpoint: tensor '" + name + "' data does not match its shape");
    c.tensors.emplace_back(std::move(name), Tensor(shape, std::move(data)));
  }
  if (in.get<std::uint8_t>() != 0) {
    OptimizerState s;
    s.steps = static_cast<std::int64_t>(in.get<std::uint64_t>());
    const auto n = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      Optimizer::Moments m;
      m.name = in.text();
      m.m = in.floats();
      m.v = in.floats();
      s.moments.push_back(std::move(m));
    }
    c.optimizer = std::move(s);
  }
  if (!in.done()) throw DataError("checkpoint: trailing bytes");
  return c;
}

Checkpoint make_checkpoint(const std::string& config, const ParamRefs& params, const Optimizer* optimizer) {
  Checkpoint c;
  c.config = config;
  for (const auto& [name, t] : params) c.tensors.emplace_back(name, t->to(DType::F32));
  if (optimizer) c.optimizer = OptimizerState{optimizer->steps(), optimizer->moments()};
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const auto bytes = serialize_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

LoadReport load_parameters(const Checkpoint& checkpoint, const ParamRefs& params, bool partial) {
  std::map<std::string, const Tensor*> stored;
  for (const auto& [name, t] : checkpoint.tensors) stored[name] = &t;
  LoadReport report;
  std::vector<std::string> mismatched;
  for (const auto& [name, target] : params) {
    const auto it = stored.find(name);
    if (it == stored.end()) {
      report.initialized.push_back(name);
      continue;
    }
    if (it->second->shape() != target->shape())
      mismatched.push_back(name + " (file " + to_string(it->second->shape()) + ", model " + to_string(target->shape()) + ")");
    else
      report.loaded.push_back(name);
  }
  for (const auto& [name, t] : checkpoint.tensors)
    if (std::none_of(params.begin(), params.end(), [&](const auto& p) { return p.first == name; }))
      report.dropped.push_back(name);
  auto list = [](const std::vector<std::string>& names) {
    std::string s;
    for (const auto& n : names) s += (s.empty() ? "" : ", ") + n;
    return s;
  };
  if (!mismatched.empty()) throw DataError("checkpoint: shape mismatch for " + list(mismatched));
  if (!partial && !report.dropped.empty()) throw DataError("checkpoint: tensors unknown to the model: " + list(report.dropped));
  if (!partial && !report.initialized.empty())
    throw DataError("checkpoint: tensors missing from the file: " + list(report.initialized));
  for (const auto& [name, target] : params) {
    const auto it = stored.find(name);
    if (it == stored.end()) continue;
    const bool grad = target->requires_grad();
    *target = it->second->to(target->dtype()).clone().set_requires_grad(grad);
  }
  return report;
}

}  // namespace ivcl
