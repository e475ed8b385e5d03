#include "topk/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <sstream>

namespace topk {

namespace {

constexpr std::string_view kMagic = "TOPKCKPT";

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((value >> (8 * b)) & 0xff));
}

void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

void put_tensor(std::string& out, std::string_view name, const Mat& m) {
  put_le(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_le(out, static_cast<std::uint64_t>(m.rows()));
  put_le(out, static_cast<std::uint64_t>(m.cols()));
  for (Index i = 0; i < m.size(); ++i) put_f64(out, m.data()[i]);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T le() {
    need(sizeof(T));
    T value = 0;
    for (std::size_t b = 0; b < sizeof(T); ++b) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    }
    pos_ += sizeof(T);
    return value;
  }

  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }

  std::string_view take(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint: truncated file");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const PolicyParameters& policy, const BehaviorHead* behavior) {
  policy.check_shapes();
  std::string out(kMagic);
  put_le(out, kCheckpointVersion);
  put_le(out, static_cast<std::uint64_t>(policy.dims.state_dim));
  put_le(out, static_cast<std::uint64_t>(policy.dims.embed_dim));
  put_le(out, static_cast<std::uint64_t>(policy.dims.num_actions));
  const auto sections = static_cast<std::uint32_t>(PolicyTensors::kTensorNames.size() + (behavior ? 1 : 0));
  put_le(out, sections);
  policy.for_each([&](std::string_view name, const Mat& m) { put_tensor(out, "policy/" + std::string(name), m); });
  if (behavior) {
    require(behavior->V_prime.rows() == policy.dims.state_dim && behavior->V_prime.cols() == policy.dims.num_actions,
            "checkpoint: behavior head dimensions do not match the policy");
    put_tensor(out, "behavior/V_prime", behavior->V_prime);
  }
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw DataError("checkpoint: bad magic");
  const auto version = in.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version " + std::to_string(version));
  }
  ModelDims dims;
  dims.state_dim = static_cast<Index>(in.le<std::uint64_t>());
  dims.embed_dim = static_cast<Index>(in.le<std::uint64_t>());
  dims.num_actions = static_cast<Index>(in.le<std::uint64_t>());
  if (dims.state_dim <= 0 || dims.embed_dim <= 0 || dims.num_actions <= 0) {
    throw DataError("checkpoint: invalid dimensions");
  }
  Checkpoint ckpt{PolicyParameters(dims), std::nullopt};
  const auto sections = in.le<std::uint32_t>();
  std::size_t policy_sections = 0;
  for (std::uint32_t k = 0; k < sections; ++k) {
    const auto name_len = in.le<std::uint32_t>();
    const std::string name(in.take(name_len));
    const auto rows = static_cast<Index>(in.le<std::uint64_t>());
    const auto cols = static_cast<Index>(in.le<std::uint64_t>());
    Mat* target = nullptr;
    if (name.rfind("policy/", 0) == 0) {
      try {
        target = &ckpt.policy.tensor(std::string_view(name).substr(7));
      } catch (const InvalidArgument&) {
        throw DataError("checkpoint: unknown section " + name);
      }
      ++policy_sections;
    } else if (name == "behavior/V_prime") {
      ckpt.behavior = BehaviorHead::zeros(dims);
      target = &ckpt.behavior->V_prime;
    } else {
      throw DataError("checkpoint: unknown section " + name);
    }
    if (target->rows() != rows || target->cols() != cols) {
      throw DataError("checkpoint: section " + name + " has inconsistent shape");
    }
    for (Index i = 0; i < target->size(); ++i) target->data()[i] = in.f64();
  }
  if (policy_sections != PolicyTensors::kTensorNames.size()) throw DataError("checkpoint: missing policy tensors");
  if (!in.done()) throw DataError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const PolicyParameters& policy,
                     const BehaviorHead* behavior) {
  const std::string bytes = encode_checkpoint(policy, behavior);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

}  // namespace topk
