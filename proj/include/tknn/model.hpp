#pragma once

// Pre-norm Transformer encoder-decoder. The final decoder layer output (after
// the last layer norm, immediately before the vocabulary projection) is the
// hidden state used as datastore key and retrieval query.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tknn/tensor.hpp"
#include "tknn/tokenizer.hpp"

namespace tknn {

struct ModelShape {
  std::uint32_t src_vocab = 0;
  std::uint32_t tgt_vocab = 0;
  std::uint32_t d_model = 64;
  std::uint32_t heads = 4;
  std::uint32_t ff = 256;
  std::uint32_t enc_layers = 2;
  std::uint32_t dec_layers = 2;
  /// Longest source or target id sequence (BOS/EOS included).
  std::uint32_t max_len = 256;

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
  void validate() const;
};

template <typename T>
struct StepOutput {
  std::vector<T> hidden;        // d_model
  std::vector<T> distribution;  // P_NMT over the target vocabulary
};

template <typename T>
class NmtModel {
 public:
  /// Encoder states for a batch of sentences, rows concatenated.
  struct Memory {
    Array<T> states;
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> lengths;
  };

  /// Teacher-forced decoder output: one row per predicted position.
  struct Decoded {
    Array<T> hidden;
    Array<T> logits;
    /// Row offset of each sentence's first prediction.
    std::vector<std::size_t> offsets;
    /// Token predicted at each row (targets shifted by one).
    TokenIds labels;
  };

  NmtModel() = default;
  /// Copies are deep: the copy owns its own parameters.
  NmtModel(const NmtModel& other);
  NmtModel& operator=(const NmtModel& other);
  NmtModel(NmtModel&&) noexcept = default;
  NmtModel& operator=(NmtModel&&) noexcept = default;
  static NmtModel init(const ModelShape& shape, std::uint64_t seed, bool zero_output_projection = false);

  const ModelShape& shape() const { return shape_; }
  std::uint64_t generation() const { return generation_; }
  void set_generation(std::uint64_t g) { generation_ = g; }

  std::vector<std::pair<std::string, Array<T>>>& params() { return params_; }
  const std::vector<std::pair<std::string, Array<T>>>& params() const { return params_; }
  std::vector<Array<T>> param_arrays() const;
  std::size_t parameter_count() const;

  Memory encode(Tape<T>& tape, std::span<const TokenIds> sources) const;
  /// Single-sentence encoder memory (source length x d_model).
  Mat<T> encode(const TokenIds& source) const;

  /// Runs the decoder over `prefixes`; prefix i attends memory sentence
  /// `memory_index[i]`. Every input position yields one output row.
  Decoded decode(Tape<T>& tape, const Memory& memory, std::span<const TokenIds> prefixes,
                 std::span<const std::size_t> memory_index) const;

  /// Batch teacher forcing: targets are BOS ... EOS; rows predict target[1:].
  Decoded forward_batch(Tape<T>& tape, std::span<const TokenIds> sources, std::span<const TokenIds> targets) const;

  StepOutput<T> decode_step(const Mat<T>& memory, const TokenIds& prefix) const;
  /// Last-position output of each prefix against a shared memory.
  std::vector<StepOutput<T>> decode_steps(const Mat<T>& memory, std::span<const TokenIds> prefixes) const;
  std::vector<StepOutput<T>> forward_teacher_forced(const TokenIds& source, const TokenIds& target) const;

  /// Hidden state -> P_NMT using the output projection.
  std::vector<T> project(std::span<const T> hidden) const;

  template <typename U>
  NmtModel<U> cast() const;

  void save(const std::filesystem::path& path) const;
  static NmtModel load(const std::filesystem::path& path);
  std::string serialize() const;
  static NmtModel deserialize(std::string bytes, const std::string& what = "checkpoint");

 private:
  template <typename>
  friend class NmtModel;

  struct Attn {
    Array<T> wq, wk, wv, wo;
  };
  struct FeedForward {
    Array<T> w1, b1, w2, b2;
  };
  struct Norm {
    Array<T> gamma, beta;
  };
  struct EncoderLayer {
    Norm ln1, ln2;
    Attn self;
    FeedForward ff;
  };
  struct DecoderLayer {
    Norm ln1, ln2, ln3;
    Attn self, cross;
    FeedForward ff;
  };

  void bind();
  Array<T> embed(Tape<T>& tape, const Array<T>& table, std::span<const TokenIds> seqs) const;
  Array<T> feed_forward(Tape<T>& tape, const FeedForward& f, const Array<T>& x) const;
  void check_ids(const TokenIds& ids, std::uint32_t vocab, const char* what) const;

  ModelShape shape_;
  std::uint64_t generation_ = 0;
  std::vector<std::pair<std::string, Array<T>>> params_;
  // Views into params_.
  Array<T> src_embed_, tgt_embed_, out_w_, out_b_;
  Norm enc_final_, dec_final_;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  Mat<T> positions_;
};

extern template class NmtModel<float>;
extern template class NmtModel<double>;

}  // namespace tknn
