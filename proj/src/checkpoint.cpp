#include "palm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace palm {

namespace {

constexpr char kMagic[] = "PALMCKPT\x01";
constexpr std::size_t kMagicSize = sizeof(kMagic) - 1;
// Guards against absurd lengths in a corrupt file before allocating.
constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 34;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

  template <typename U>
  void uint(U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    bytes(buf, sizeof buf);
  }

  void text(const std::string& s) {
    uint<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }

  void tensor(const NamedTensor& t) {
    text(t.name);
    uint<std::uint32_t>(2);
    uint<std::uint64_t>(t.rows);
    uint<std::uint64_t>(t.cols);
    for (float f : t.data) uint<std::uint32_t>(std::bit_cast<std::uint32_t>(f));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  void bytes(void* p, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) fail(std::string("truncated while reading ") + what);
  }

  template <typename U>
  U uint(const char* what) {
    unsigned char buf[sizeof(U)];
    bytes(buf, sizeof buf, what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
    return v;
  }

  std::string text(const char* what) {
    const auto n = uint<std::uint64_t>(what);
    if (n > kMaxElements) fail(std::string("implausible length for ") + what);
    std::string s(static_cast<std::size_t>(n), '\0');
    bytes(s.data(), s.size(), what);
    return s;
  }

  NamedTensor tensor() {
    NamedTensor t;
    t.name = text("tensor name");
    const auto ndims = uint<std::uint32_t>("tensor rank");
    if (ndims != 2) fail("tensor '" + t.name + "' has rank " + std::to_string(ndims) + ", expected 2");
    t.rows = uint<std::uint64_t>("tensor shape");
    t.cols = uint<std::uint64_t>("tensor shape");
    if (t.rows > kMaxElements || t.cols > kMaxElements || t.rows * t.cols > kMaxElements)
      fail("tensor '" + t.name + "' has an implausible shape");
    t.data.resize(static_cast<std::size_t>(t.rows * t.cols));
    for (auto& f : t.data) f = std::bit_cast<float>(uint<std::uint32_t>("tensor data"));
    return t;
  }

  [[noreturn]] void fail(const std::string& msg) const { throw CheckpointError(path_ + ": " + msg); }

 private:
  std::istream& in_;
  std::string path_;
};

std::map<std::string, std::string> parse_meta(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  Writer w(out);
  w.bytes(kMagic, kMagicSize);
  w.text(serialize_run_config(ckpt.config));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ckpt.vocab.size()));
  for (const auto& tok : ckpt.vocab.tokens()) {
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(tok.size()));
    w.bytes(tok.data(), tok.size());
  }
  w.uint<std::uint64_t>(ckpt.epoch);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& t : ckpt.params) w.tensor(t);
  w.text(ckpt.optimizer_meta);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ckpt.optimizer.size()));
  for (const auto& t : ckpt.optimizer) w.tensor(t);
  out.flush();
  if (!out) throw CheckpointError("write to " + path + " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  Reader r(in, path);
  char magic[kMagicSize];
  in.read(magic, static_cast<std::streamsize>(kMagicSize));
  if (static_cast<std::size_t>(in.gcount()) != kMagicSize || std::memcmp(magic, kMagic, kMagicSize) != 0)
    r.fail("not a checkpoint (bad magic header)");

  Checkpoint ckpt;
  try {
    ckpt.config = parse_run_config(r.text("config"));
  } catch (const ConfigError& e) {
    r.fail(std::string("bad config section: ") + e.what());
  }
  const auto vocab_size = r.uint<std::uint32_t>("vocab size");
  std::vector<std::string> tokens;
  tokens.reserve(vocab_size);
  for (std::uint32_t i = 0; i < vocab_size; ++i) {
    const auto len = r.uint<std::uint32_t>("vocab token");
    std::string tok(len, '\0');
    r.bytes(tok.data(), tok.size(), "vocab token");
    tokens.push_back(std::move(tok));
  }
  try {
    ckpt.vocab = Vocabulary::from_tokens(std::move(tokens));
  } catch (const std::exception& e) {
    r.fail(std::string("bad vocabulary: ") + e.what());
  }
  ckpt.epoch = r.uint<std::uint64_t>("epoch");
  const auto count = r.uint<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) ckpt.params.push_back(r.tensor());
  ckpt.optimizer_meta = r.text("optimizer meta");
  const auto opt_count = r.uint<std::uint32_t>("optimizer tensor count");
  for (std::uint32_t i = 0; i < opt_count; ++i) ckpt.optimizer.push_back(r.tensor());
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes after optimizer section");
  return ckpt;
}

template <typename T>
NamedTensor to_tensor(const std::string& name, const Matrix<T>& m) {
  NamedTensor t;
  t.name = name;
  t.rows = static_cast<std::uint64_t>(m.rows());
  t.cols = static_cast<std::uint64_t>(m.cols());
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.data.push_back(static_cast<float>(m(i, j)));
  return t;
}

template <typename T>
Matrix<T> from_tensor(const NamedTensor& t) {
  Matrix<T> m(static_cast<Eigen::Index>(t.rows), static_cast<Eigen::Index>(t.cols));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<T>(t.data[k++]);
  return m;
}

template <typename T>
Checkpoint make_checkpoint(const RunConfig& config, const Vocabulary& vocab, const LanguageModel<T>& model,
                           const OptimizerState<T>* optimizer, std::uint64_t epoch) {
  Checkpoint ckpt;
  ckpt.config = config;
  ckpt.config.model = model.config();
  ckpt.vocab = vocab;
  ckpt.epoch = epoch;
  for (const auto& p : model.params()) ckpt.params.push_back(to_tensor(p.name, p.value));
  if (optimizer != nullptr) {
    ckpt.optimizer_meta = "step=" + std::to_string(optimizer->step) +
                          "\naveraging=" + (optimizer->averaging ? "1" : "0") +
                          "\naveraged_steps=" + std::to_string(optimizer->averaged_steps) + "\n";
    for (const auto& [name, m] : optimizer->tensors) ckpt.optimizer.push_back(to_tensor(name, m));
  }
  return ckpt;
}

template <typename T>
void restore_model(const Checkpoint& ckpt, LanguageModel<T>& model) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : ckpt.params) by_name[t.name] = &t;
  for (auto& p : model.params()) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter '" + p.name + "'");
    const NamedTensor& t = *it->second;
    if (t.rows != static_cast<std::uint64_t>(p.value.rows()) || t.cols != static_cast<std::uint64_t>(p.value.cols()))
      throw CheckpointError("parameter '" + p.name + "' is " + std::to_string(t.rows) + "x" + std::to_string(t.cols) +
                            " in the checkpoint but " + std::to_string(p.value.rows()) + "x" +
                            std::to_string(p.value.cols()) + " in the model");
    p.value = from_tensor<T>(t);
    by_name.erase(it);
  }
  if (!by_name.empty()) throw CheckpointError("checkpoint has unknown parameter '" + by_name.begin()->first + "'");
}

template <typename T>
OptimizerState<T> restore_optimizer(const Checkpoint& ckpt) {
  OptimizerState<T> st;
  const auto meta = parse_meta(ckpt.optimizer_meta);
  auto number = [&](const std::string& key) -> std::uint64_t {
    auto it = meta.find(key);
    if (it == meta.end()) return 0;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw CheckpointError("bad optimizer field '" + key + "'");
    }
  };
  st.step = number("step");
  st.averaging = number("averaging") != 0;
  st.averaged_steps = number("averaged_steps");
  for (const auto& t : ckpt.optimizer) st.tensors[t.name] = from_tensor<T>(t);
  return st;
}

#define PALM_INSTANTIATE(T)                                                                                     \
  template NamedTensor to_tensor<T>(const std::string&, const Matrix<T>&);                                    \
  template Matrix<T> from_tensor<T>(const NamedTensor&);                                                      \
  template Checkpoint make_checkpoint<T>(const RunConfig&, const Vocabulary&, const LanguageModel<T>&,        \
                                         const OptimizerState<T>*, std::uint64_t);                            \
  template void restore_model<T>(const Checkpoint&, LanguageModel<T>&);                                       \
  template OptimizerState<T> restore_optimizer<T>(const Checkpoint&);

PALM_INSTANTIATE(float)
PALM_INSTANTIATE(double)

#undef PALM_INSTANTIATE

}  // namespace palm
