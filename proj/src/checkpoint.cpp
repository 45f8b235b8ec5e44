#include <bit>
#include <fstream>
#include <map>
#include <sstream>

#include "scm/errors.hpp"
#include "scm/model.hpp"

namespace scm {

namespace {

constexpr std::string_view kMagic = "SCMCKPT1";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::string line() {
    const auto end = bytes_.find('\n', pos_);
    if (end == std::string::npos) throw IoError("checkpoint: truncated header");
    std::string out = bytes_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return out;
  }

  std::uint64_t u64() { return read_le(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }

  std::string raw(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint: truncated tensor data");
  }

  std::uint64_t read_le(int width) {
    need(width);
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += width;
    return v;
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

int parse_int(const std::map<std::string, std::string>& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw IoError("checkpoint: missing config key '" + key + "'");
  try {
    return std::stoi(it->second);
  } catch (const std::exception&) {
    throw IoError("checkpoint: bad value for '" + key + "': " + it->second);
  }
}

}  // namespace

std::string serialize_checkpoint(const ModelParams& params) {
  const auto& c = params.config;
  std::ostringstream header;
  header << kMagic << '\n'
         << "vocab_size=" << c.vocab_size << '\n'
         << "d_model=" << c.d_model << '\n'
         << "n_layers=" << c.n_layers << '\n'
         << "n_heads=" << c.n_heads << '\n'
         << "max_seq_len=" << c.max_seq_len << '\n'
         << "tie_embeddings=" << (c.tie_embeddings ? 1 : 0) << '\n';
  const auto named = params.named_tensors();
  header << "tensors=" << named.size() << '\n';
  std::string out = header.str();
  for (const auto& [name, t] : named) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u64(out, d);
    for (double v : t.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ModelParams deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.line() != kMagic) throw IoError("checkpoint: bad magic (expected SCMCKPT1)");
  std::map<std::string, std::string> kv;
  std::size_t count = 0;
  for (;;) {
    const auto line = in.line();
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("checkpoint: malformed header line '" + line + "'");
    const auto key = line.substr(0, eq);
    if (key == "tensors") {
      count = std::stoul(line.substr(eq + 1));
      break;
    }
    kv[key] = line.substr(eq + 1);
  }
  TransformerConfig config;
  config.vocab_size = parse_int(kv, "vocab_size");
  config.d_model = parse_int(kv, "d_model");
  config.n_layers = parse_int(kv, "n_layers");
  config.n_heads = parse_int(kv, "n_heads");
  config.max_seq_len = parse_int(kv, "max_seq_len");
  config.tie_embeddings = parse_int(kv, "tie_embeddings") != 0;
  config.validate();

  // Start from a correctly shaped model and overwrite every tensor by name.
  ModelParams params = init_params(config, 0);
  auto named = params.named_tensors();
  if (named.size() != count) {
    throw IoError("checkpoint: expected " + std::to_string(named.size()) + " tensors, found " +
                  std::to_string(count));
  }
  for (auto& [name, t] : named) {
    const auto stored_name = in.raw(in.u32());
    if (stored_name != name) throw IoError("checkpoint: expected tensor '" + name + "', found '" + stored_name + "'");
    ad::Shape shape(in.u32());
    for (auto& d : shape) d = in.u64();
    if (shape != t.shape()) {
      throw IoError("checkpoint: tensor '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                    ad::shape_str(t.shape()));
    }
    auto dst = t.mutable_values();
    for (auto& v : dst) v = std::bit_cast<double>(in.u64());
  }
  if (!in.done()) throw IoError("checkpoint: trailing bytes");
  return params;
}

void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  const auto bytes = serialize_checkpoint(params);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize_checkpoint(buf.str());
}

}  // namespace scm
