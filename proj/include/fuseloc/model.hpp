#pragma once

// Two-branch place-recognition network: a sparse 3D FPN over the voxelized
// point cloud and a small strided CNN over the image, each pooled to a
// k-wide descriptor, then fused.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fuseloc/checkpoint.hpp"
#include "fuseloc/image.hpp"
#include "fuseloc/pooling.hpp"
#include "fuseloc/sparse.hpp"

namespace fuseloc {

enum class FusionMode { concat, add };
enum class FusionHead { none, fc, mlp };

FusionMode parse_fusion_mode(const std::string& text);
FusionHead parse_fusion_head(const std::string& text);
std::string to_string(FusionMode m);
std::string to_string(FusionHead h);

struct NetworkConfig {
  std::size_t k = 128;
  // Conv0, Conv1, Conv2, Conv3
  std::vector<std::size_t> pc_channels{32, 32, 64, 64};
  std::vector<std::size_t> image_channels{32, 64, 128, 256};
  FusionMode fusion_mode = FusionMode::concat;
  FusionHead fusion_head = FusionHead::none;
  PoolingConfig pooling;
  QuantizationConfig quantization;
  // L2-normalize each unimodal descriptor before fusion.
  bool normalize = true;

  std::size_t fused_width() const { return fusion_mode == FusionMode::concat ? 2 * k : k; }
  void validate() const;

  std::map<std::string, std::string> to_header() const;
  static NetworkConfig from_header(const std::map<std::string, std::string>& header);
};

/// Odd 1D kernel size for channel attention over C channels.
int eca_kernel_size(std::size_t channels);

/// Channel attention: rows scaled per segment by sigmoid(conv1d(segment mean)).
Var eca_rows(Var rows, const SegmentsPtr& seg, Var w);
SparseVoxelTensor eca(const SparseVoxelTensor& x, Var w);

/// Fuses [B,k] descriptors; head parameters are looked up by name.
Var fuse(Var d_pc, Var d_rgb, FusionMode mode);

struct Descriptors {
  Var pc;     // [B, k]
  Var rgb;    // [B, k]
  Var fused;  // [B, fused_width]
};

enum class Modality { fused, pc, rgb };
Modality parse_modality(const std::string& text);
std::string to_string(Modality m);
Var select(const Descriptors& d, Modality m);

class Model {
 public:
  Model(NetworkConfig cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// FPN output: k channels at tensor stride 4.
  SparseVoxelTensor pc_feature_map(Tape& tape, const SparseVoxelTensor& input);
  /// [N, k, H/16, W/16]; images [N, 3, H, W] with H, W >= 32.
  Var image_feature_map(Tape& tape, Var images);

  /// Batch-norm mode follows tape.training().
  Descriptors forward(Tape& tape, std::span<const PointCloud* const> clouds, std::span<const Image* const> images);
  Descriptors forward(Tape& tape, const SparseVoxelTensor& voxels, Var images);

  Checkpoint to_checkpoint(std::map<std::string, std::string> extra = {}) const;
  static Model from_checkpoint(const Checkpoint& ckpt);

 private:
  Parameter& param(const std::string& name);
  SparseVoxelTensor conv_bn(Tape& t, const SparseVoxelTensor& x, const std::string& name, int K, int stride, bool act);
  SparseVoxelTensor residual(Tape& t, const SparseVoxelTensor& x, const std::string& name);
  Var bn(Tape& t, Var x, const std::string& name);

  NetworkConfig cfg_;
  ParameterStore params_;
};

}  // namespace fuseloc
