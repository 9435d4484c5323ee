#pragma once

// Binary checkpoint container (little-endian, float32 payloads).
//
//   magic "PALMCKPT\x01"
//   text   run config            (u64 length + bytes)
//   u32    vocab size, then per token u32 length + bytes
//   u64    epoch
//   u32    tensor count, then per tensor: text name, u32 ndims, u64 dims[ndims], f32 data (row-major)
//   text   optimizer meta ("key=value" lines)
//   u32    optimizer tensor count, tensors as above

#include "palm/config.hpp"
#include "palm/corpus.hpp"
#include "palm/lm.hpp"
#include "palm/trainer.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace palm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<float> data;  // row-major
};

struct Checkpoint {
  RunConfig config;  ///< model.vocab_size and attention mode as trained
  Vocabulary vocab;
  std::uint64_t epoch = 0;
  std::vector<NamedTensor> params;
  std::string optimizer_meta;
  std::vector<NamedTensor> optimizer;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

template <typename T>
NamedTensor to_tensor(const std::string& name, const Matrix<T>& m);
template <typename T>
Matrix<T> from_tensor(const NamedTensor& t);

template <typename T>
Checkpoint make_checkpoint(const RunConfig& config, const Vocabulary& vocab, const LanguageModel<T>& model,
                           const OptimizerState<T>* optimizer, std::uint64_t epoch);

/// Copies tensors into a model built from ckpt.config.model; missing names or
/// shape mismatches throw CheckpointError.
template <typename T>
void restore_model(const Checkpoint& ckpt, LanguageModel<T>& model);

template <typename T>
OptimizerState<T> restore_optimizer(const Checkpoint& ckpt);

}  // namespace palm
