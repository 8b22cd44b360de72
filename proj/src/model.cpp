#include "tknn/model.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <stdexcept>

#include "tknn/binary_io.hpp"

namespace tknn {

namespace {

constexpr std::string_view kCheckpointMagic = "TKNN";
constexpr std::uint32_t kCheckpointVersion = 1;

enum class Init { Uniform, Ones, Zeros };

struct ParamSpec {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  Init init;
};

std::vector<ParamSpec> param_specs(const ModelShape& s, bool zero_output) {
  std::vector<ParamSpec> specs;
  const std::size_t d = s.d_model;
  auto norm = [&](const std::string& p) {
    specs.push_back({p + ".g", 1, d, Init::Ones});
    specs.push_back({p + ".b", 1, d, Init::Zeros});
  };
  auto attn = [&](const std::string& p) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) specs.push_back({p + "." + w, d, d, Init::Uniform});
  };
  auto ff = [&](const std::string& p) {
    specs.push_back({p + ".w1", d, s.ff, Init::Uniform});
    specs.push_back({p + ".b1", 1, s.ff, Init::Zeros});
    specs.push_back({p + ".w2", s.ff, d, Init::Uniform});
    specs.push_back({p + ".b2", 1, d, Init::Zeros});
  };
  specs.push_back({"src.embed", s.src_vocab, d, Init::Uniform});
  specs.push_back({"tgt.embed", s.tgt_vocab, d, Init::Uniform});
  for (std::uint32_t l = 0; l < s.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    norm(p + ".ln1");
    attn(p + ".self");
    norm(p + ".ln2");
    ff(p + ".ff");
  }
  norm("enc.final");
  for (std::uint32_t l = 0; l < s.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    norm(p + ".ln1");
    attn(p + ".self");
    norm(p + ".ln2");
    attn(p + ".cross");
    norm(p + ".ln3");
    ff(p + ".ff");
  }
  norm("dec.final");
  specs.push_back({"out.w", d, s.tgt_vocab, zero_output ? Init::Zeros : Init::Uniform});
  specs.push_back({"out.b", 1, s.tgt_vocab, Init::Zeros});
  return specs;
}

template <typename T>
Mat<T> sinusoid_table(std::size_t max_len, std::size_t d) {
  Mat<T> pe(static_cast<Eigen::Index>(max_len), static_cast<Eigen::Index>(d));
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      const double a = static_cast<double>(pos) * rate;
      pe(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(i)) = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return pe;
}

}  // namespace

void ModelShape::validate() const {
  if (src_vocab < 4 || tgt_vocab < 4) throw std::invalid_argument("model shape: vocabularies must hold the 4 special tokens");
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw std::invalid_argument("model shape: d_model " + std::to_string(d_model) + " not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (ff == 0 || max_len < 2) throw std::invalid_argument("model shape: ff and max_len must be positive");
}

template <typename T>
NmtModel<T> NmtModel<T>::init(const ModelShape& shape, std::uint64_t seed, bool zero_output_projection) {
  shape.validate();
  NmtModel m;
  m.shape_ = shape;
  std::mt19937_64 rng(seed);
  const double a = 1.0 / std::sqrt(static_cast<double>(shape.d_model));
  std::uniform_real_distribution<double> uni(-a, a);
  for (const auto& spec : param_specs(shape, zero_output_projection)) {
    Mat<T> v(static_cast<Eigen::Index>(spec.rows), static_cast<Eigen::Index>(spec.cols));
    switch (spec.init) {
      case Init::Uniform:
        for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(uni(rng));
        break;
      case Init::Ones:
        v.setOnes();
        break;
      case Init::Zeros:
        v.setZero();
        break;
    }
    m.params_.emplace_back(spec.name, Array<T>::parameter(std::move(v)));
  }
  m.bind();
  return m;
}

template <typename T>
NmtModel<T>::NmtModel(const NmtModel& other)
    : shape_(other.shape_), generation_(other.generation_) {
  for (const auto& [name, p] : other.params_) params_.emplace_back(name, Array<T>::parameter(p.value()));
  if (!params_.empty()) bind();
}

template <typename T>
NmtModel<T>& NmtModel<T>::operator=(const NmtModel& other) {
  if (this != &other) *this = NmtModel(other);
  return *this;
}

template <typename T>
void NmtModel<T>::bind() {
  std::size_t i = 0;
  auto next = [&]() -> Array<T> { return params_.at(i++).second; };
  auto norm = [&](Norm& n) {
    n.gamma = next();
    n.beta = next();
  };
  auto attn = [&](Attn& a) {
    a.wq = next();
    a.wk = next();
    a.wv = next();
    a.wo = next();
  };
  auto ff = [&](FeedForward& f) {
    f.w1 = next();
    f.b1 = next();
    f.w2 = next();
    f.b2 = next();
  };
  src_embed_ = next();
  tgt_embed_ = next();
  enc_.assign(shape_.enc_layers, {});
  for (auto& l : enc_) {
    norm(l.ln1);
    attn(l.self);
    norm(l.ln2);
    ff(l.ff);
  }
  norm(enc_final_);
  dec_.assign(shape_.dec_layers, {});
  for (auto& l : dec_) {
    norm(l.ln1);
    attn(l.self);
    norm(l.ln2);
    attn(l.cross);
    norm(l.ln3);
    ff(l.ff);
  }
  norm(dec_final_);
  out_w_ = next();
  out_b_ = next();
  positions_ = sinusoid_table<T>(shape_.max_len, shape_.d_model);
}

template <typename T>
std::vector<Array<T>> NmtModel<T>::param_arrays() const {
  std::vector<Array<T>> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(p);
  return out;
}

template <typename T>
std::size_t NmtModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.shape().size();
  return n;
}

template <typename T>
void NmtModel<T>::check_ids(const TokenIds& ids, std::uint32_t vocab, const char* what) const {
  if (ids.empty()) throw std::invalid_argument(std::string(what) + ": empty id sequence");
  if (ids.size() > shape_.max_len) {
    throw std::invalid_argument(std::string(what) + ": length " + std::to_string(ids.size()) +
                                " exceeds configured max " + std::to_string(shape_.max_len));
  }
  for (TokenId t : ids) {
    if (t >= vocab) {
      throw std::invalid_argument(std::string(what) + ": id " + std::to_string(t) + " outside vocabulary of " +
                                  std::to_string(vocab));
    }
  }
}

template <typename T>
Array<T> NmtModel<T>::embed(Tape<T>& tape, const Array<T>& table, std::span<const TokenIds> seqs) const {
  TokenIds flat;
  std::size_t total = 0;
  for (const auto& s : seqs) total += s.size();
  flat.reserve(total);
  Mat<T> pe(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(shape_.d_model));
  Eigen::Index r = 0;
  for (const auto& s : seqs) {
    for (std::size_t p = 0; p < s.size(); ++p, ++r) {
      flat.push_back(s[p]);
      pe.row(r) = positions_.row(static_cast<Eigen::Index>(p));
    }
  }
  const T scale = std::sqrt(static_cast<T>(shape_.d_model));
  return tape.add(tape.scale(tape.gather_rows(table, flat), scale), Array<T>::constant(std::move(pe)));
}

template <typename T>
Array<T> NmtModel<T>::feed_forward(Tape<T>& tape, const FeedForward& f, const Array<T>& x) const {
  auto h = tape.relu(tape.add_bias(tape.matmul(x, f.w1), f.b1));
  return tape.add_bias(tape.matmul(h, f.w2), f.b2);
}

template <typename T>
typename NmtModel<T>::Memory NmtModel<T>::encode(Tape<T>& tape, std::span<const TokenIds> sources) const {
  Memory mem;
  std::vector<AttentionSegment> segs;
  std::size_t off = 0;
  for (const auto& s : sources) {
    check_ids(s, shape_.src_vocab, "encode");
    mem.offsets.push_back(off);
    mem.lengths.push_back(s.size());
    segs.push_back({off, s.size(), off, s.size()});
    off += s.size();
  }
  Array<T> x = embed(tape, src_embed_, sources);
  for (const auto& l : enc_) {
    auto h = tape.layer_norm(x, l.ln1.gamma, l.ln1.beta);
    auto a = tape.attention(tape.matmul(h, l.self.wq), tape.matmul(h, l.self.wk), tape.matmul(h, l.self.wv), segs,
                            shape_.heads, false);
    x = tape.add(x, tape.matmul(a, l.self.wo));
    x = tape.add(x, feed_forward(tape, l.ff, tape.layer_norm(x, l.ln2.gamma, l.ln2.beta)));
  }
  mem.states = tape.layer_norm(x, enc_final_.gamma, enc_final_.beta);
  return mem;
}

template <typename T>
Mat<T> NmtModel<T>::encode(const TokenIds& source) const {
  Tape<T> tape(false);
  return encode(tape, std::span<const TokenIds>(&source, 1)).states.value();
}

template <typename T>
typename NmtModel<T>::Decoded NmtModel<T>::decode(Tape<T>& tape, const Memory& memory,
                                                  std::span<const TokenIds> prefixes,
                                                  std::span<const std::size_t> memory_index) const {
  if (prefixes.size() != memory_index.size()) throw std::invalid_argument("decode: prefix/memory count mismatch");
  Decoded out;
  std::vector<AttentionSegment> self_segs, cross_segs;
  std::size_t off = 0;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const auto& p = prefixes[i];
    check_ids(p, shape_.tgt_vocab, "decode");
    if (p.front() != BpeVocab::kBos) throw std::invalid_argument("decode: prefix must begin with BOS");
    const std::size_t m = memory_index[i];
    if (m >= memory.offsets.size()) throw std::invalid_argument("decode: memory index out of range");
    out.offsets.push_back(off);
    self_segs.push_back({off, p.size(), off, p.size()});
    cross_segs.push_back({off, p.size(), memory.offsets[m], memory.lengths[m]});
    off += p.size();
  }
  Array<T> x = embed(tape, tgt_embed_, prefixes);
  for (const auto& l : dec_) {
    auto h = tape.layer_norm(x, l.ln1.gamma, l.ln1.beta);
    auto a = tape.attention(tape.matmul(h, l.self.wq), tape.matmul(h, l.self.wk), tape.matmul(h, l.self.wv),
                            self_segs, shape_.heads, true);
    x = tape.add(x, tape.matmul(a, l.self.wo));
    h = tape.layer_norm(x, l.ln2.gamma, l.ln2.beta);
    auto c = tape.attention(tape.matmul(h, l.cross.wq), tape.matmul(memory.states, l.cross.wk),
                            tape.matmul(memory.states, l.cross.wv), cross_segs, shape_.heads, false);
    x = tape.add(x, tape.matmul(c, l.cross.wo));
    x = tape.add(x, feed_forward(tape, l.ff, tape.layer_norm(x, l.ln3.gamma, l.ln3.beta)));
  }
  out.hidden = tape.layer_norm(x, dec_final_.gamma, dec_final_.beta);
  out.logits = tape.add_bias(tape.matmul(out.hidden, out_w_), out_b_);
  return out;
}

template <typename T>
typename NmtModel<T>::Decoded NmtModel<T>::forward_batch(Tape<T>& tape, std::span<const TokenIds> sources,
                                                         std::span<const TokenIds> targets) const {
  if (sources.size() != targets.size()) throw std::invalid_argument("forward: source/target count mismatch");
  std::vector<TokenIds> inputs;
  TokenIds labels;
  inputs.reserve(targets.size());
  for (const auto& t : targets) {
    check_ids(t, shape_.tgt_vocab, "forward");
    if (t.size() < 2 || t.front() != BpeVocab::kBos || t.back() != BpeVocab::kEos) {
      throw std::invalid_argument("forward: target must be BOS ... EOS");
    }
    inputs.emplace_back(t.begin(), t.end() - 1);
    labels.insert(labels.end(), t.begin() + 1, t.end());
  }
  Memory mem = encode(tape, sources);
  std::vector<std::size_t> idx(sources.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Decoded d = decode(tape, mem, inputs, idx);
  d.labels = std::move(labels);
  return d;
}

template <typename T>
std::vector<StepOutput<T>> NmtModel<T>::decode_steps(const Mat<T>& memory, std::span<const TokenIds> prefixes) const {
  for (const auto& p : prefixes) {
    if (p.empty()) throw std::invalid_argument("decode_step: empty prefix");
  }
  if (memory.cols() != static_cast<Eigen::Index>(shape_.d_model) || memory.rows() == 0) {
    throw std::invalid_argument("decode_step: memory width does not match d_model");
  }
  Tape<T> tape(false);
  Memory mem{Array<T>::constant(memory), {0}, {static_cast<std::size_t>(memory.rows())}};
  std::vector<std::size_t> idx(prefixes.size(), 0);
  Decoded d = decode(tape, mem, prefixes, idx);
  std::vector<StepOutput<T>> out;
  out.reserve(prefixes.size());
  const Mat<T> probs = tape.softmax_rows(d.logits).value();
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(d.offsets[i] + prefixes[i].size() - 1);
    StepOutput<T> s;
    s.hidden.assign(d.hidden.value().row(r).data(), d.hidden.value().row(r).data() + shape_.d_model);
    s.distribution.assign(probs.row(r).data(), probs.row(r).data() + shape_.tgt_vocab);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
StepOutput<T> NmtModel<T>::decode_step(const Mat<T>& memory, const TokenIds& prefix) const {
  return std::move(decode_steps(memory, std::span<const TokenIds>(&prefix, 1)).front());
}

template <typename T>
std::vector<StepOutput<T>> NmtModel<T>::forward_teacher_forced(const TokenIds& source, const TokenIds& target) const {
  Tape<T> tape(false);
  Decoded d = forward_batch(tape, std::span<const TokenIds>(&source, 1), std::span<const TokenIds>(&target, 1));
  const Mat<T> probs = tape.softmax_rows(d.logits).value();
  std::vector<StepOutput<T>> out;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    StepOutput<T> s;
    s.hidden.assign(d.hidden.value().row(r).data(), d.hidden.value().row(r).data() + shape_.d_model);
    s.distribution.assign(probs.row(r).data(), probs.row(r).data() + shape_.tgt_vocab);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
std::vector<T> NmtModel<T>::project(std::span<const T> hidden) const {
  if (hidden.size() != shape_.d_model) throw std::invalid_argument("project: hidden width mismatch");
  Mat<T> h(1, static_cast<Eigen::Index>(hidden.size()));
  for (std::size_t i = 0; i < hidden.size(); ++i) h(0, static_cast<Eigen::Index>(i)) = hidden[i];
  Tape<T> tape(false);
  auto p = tape.softmax_rows(tape.add_bias(tape.matmul(Array<T>::constant(h), out_w_), out_b_));
  return std::vector<T>(p.value().data(), p.value().data() + p.value().size());
}

template <typename T>
template <typename U>
NmtModel<U> NmtModel<T>::cast() const {
  NmtModel<U> m;
  m.shape_ = shape_;
  m.generation_ = generation_;
  for (const auto& [name, p] : params_) m.params_.emplace_back(name, Array<U>::parameter(p.value().template cast<U>()));
  m.bind();
  return m;
}

template <typename T>
std::string NmtModel<T>::serialize() const {
  ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  for (std::uint32_t v : {shape_.src_vocab, shape_.tgt_vocab, shape_.d_model, shape_.heads, shape_.ff,
                          shape_.enc_layers, shape_.dec_layers, shape_.max_len}) {
    w.put(v);
  }
  w.put<std::uint64_t>(generation_);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params_.size()));
  for (const auto& [name, p] : params_) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.rows()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.cols()));
    const Mat<float> f = p.value().template cast<float>();
    w.put_span(std::span<const float>(f.data(), static_cast<std::size_t>(f.size())));
  }
  return w.bytes();
}

template <typename T>
NmtModel<T> NmtModel<T>::deserialize(std::string bytes, const std::string& what) {
  ByteReader r(std::move(bytes), what);
  r.expect_magic(kCheckpointMagic);
  r.expect_version(kCheckpointVersion);
  NmtModel m;
  ModelShape& s = m.shape_;
  for (std::uint32_t* f : {&s.src_vocab, &s.tgt_vocab, &s.d_model, &s.heads, &s.ff, &s.enc_layers, &s.dec_layers,
                           &s.max_len}) {
    *f = r.get<std::uint32_t>("shape record");
  }
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    r.fail(e.what());
  }
  m.generation_ = r.get<std::uint64_t>("generation");
  const auto specs = param_specs(s, false);
  const auto count = r.get<std::uint32_t>("parameter count");
  if (count != specs.size()) {
    r.fail("parameter count " + std::to_string(count) + " does not match shape (" + std::to_string(specs.size()) + ")");
  }
  for (const auto& spec : specs) {
    const auto len = r.get<std::uint32_t>("name length");
    const std::string name = r.get_bytes(len, "parameter name");
    if (name != spec.name) r.fail("expected parameter '" + spec.name + "', found '" + name + "'");
    const auto rows = r.get<std::uint32_t>("rows");
    const auto cols = r.get<std::uint32_t>("cols");
    if (rows != spec.rows || cols != spec.cols) r.fail("parameter '" + name + "' has wrong shape");
    Mat<float> f(rows, cols);
    r.get_span(std::span<float>(f.data(), static_cast<std::size_t>(f.size())), name);
    m.params_.emplace_back(name, Array<T>::parameter(f.template cast<T>()));
  }
  r.expect_end();
  m.bind();
  return m;
}

template <typename T>
void NmtModel<T>::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.put_bytes(serialize());
  w.write_file(path);
}

template <typename T>
NmtModel<T> NmtModel<T>::load(const std::filesystem::path& path) {
  return deserialize(read_file(path), "checkpoint " + path.string());
}

template class NmtModel<float>;
template class NmtModel<double>;
template NmtModel<double> NmtModel<float>::cast<double>() const;
template NmtModel<float> NmtModel<double>::cast<float>() const;
template NmtModel<float> NmtModel<float>::cast<float>() const;
template NmtModel<double> NmtModel<double>::cast<double>() const;

}  // namespace tknn
