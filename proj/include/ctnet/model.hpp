#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctnet/autodiff.hpp"
#include "ctnet/tensor.hpp"

// CTNet: a serial block feeding a parallel block of three interacting
// sub-networks, closed by a residual block that subtracts the predicted
// noise from the input. Transformer mechanisms (window attention plus a
// channel feature enhancement) are embedded throughout.
//
// Parameter names form a documented grammar consumed by the checkpoint
// format. Blocks: sb, subnet1, subnet2, subnet3, rb. Within them:
//   <name>.w / <name>.b                      convolution weight/bias
//   <p>.tm.pos                               per-window-position table [win^2, C]
//   <p>.tm.mhsa.{ln.g, ln.b}                 attention pre-norm
//   <p>.tm.mhsa.{q,k,v,proj}.{w,b}           attention projections [C,C]/[C]
//   <p>.tm.cfe.{ln.g, ln.b}                  channel-enhancement norm
//   <p>.tm.cfe.{fc1,fc2}.{w,b}               expand/contract layers
//   <p>.fmK.dw.w / <p>.fmK.pw.{w,b}          fusion depthwise + pointwise
//   <p>.itmK.{fc_in, fc_mid, fc_out}.{w,b}   improved-TM fully connected layers
//   <p>.itmK.tm.*                            the TM inside an improved TM

namespace ctnet {

struct ModelConfig {
  int image_channels = 3;  // 1 for gray, 3 for color
  int width = 64;          // feature channels C
  int window = 8;          // attention window side length
  int heads = 4;
  int cfe_hidden_ratio = 4;
  double attn_scale = 0.0;  // 0 selects sqrt(width / heads)

  // Wiring variant: serial-block skip taken from the second conv instead of
  // the first.
  bool sb_residual_second_conv = false;

  // Ablation toggles. Each removes the named sub-path and its parameters.
  bool disable_tm_in_sb = false;
  bool disable_fms = false;  // fusion mechanisms pass through their first input
  bool disable_itm = false;
  bool serial_only = false;  // stack SB -> SubNet1 -> SubNet2 -> SubNet3 -> RB

  void validate() const;  // throws ConfigError on violated invariants
  double attention_scale() const;

  // Desk-scale preset used by gradient and identity tests.
  static ModelConfig tiny(int image_channels = 1);
};

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
};

// The canonical parameter list; a pure function of the config.
std::vector<ParamSpec> param_specs(const ModelConfig& cfg);

// Kaiming-uniform weights, zero biases and positional tables, LN gamma 1 /
// beta 0. Each parameter draws from its own stream keyed by (seed, name), so
// the result does not depend on enumeration order.
ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed);

// All learnable weights zero with LN affine at defaults; with these the whole
// network is an exact identity map.
ParamMap zero_weight_params(const ModelConfig& cfg);

// Throws ConfigError with a name diff when `params` does not carry exactly
// the names/shapes of param_specs(cfg).
void validate_params(const ModelConfig& cfg, const ParamMap& params);

// Ordered record of named intermediate activations, stored in image layout
// [N,C,H,W] (token tensors are mapped back to pixels). Populated only when a
// trace is requested.
class ActivationTrace {
 public:
  void add(const std::string& name, Tensor value);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  std::vector<std::string> names() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// The exact trace name list ctnet_forward produces under `cfg`, in order.
std::vector<std::string> trace_names(const ModelConfig& cfg);

// --- blocks (exposed for unit tests; ctnet_forward wires them) --------------

Var mhsa_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                 const std::string& prefix, Var tokens);
Var cfe_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                const std::string& prefix, Var tokens);
Var tm_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
               const std::string& prefix, Var x, ActivationTrace* trace = nullptr);
Var itm_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                const std::string& prefix, Var x, ActivationTrace* trace = nullptr);
Var fm_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
               const std::string& prefix, const std::vector<Var>& inputs);
Var sb_forward(Graph& g, const ModelConfig& cfg, const VarMap& params, Var input,
               ActivationTrace* trace = nullptr);

struct Subnet1Out {
  Var out;     // O_SubNet1
  Var it;      // O_It, consumed by SubNet2
  Var tm_out;  // TM(O_It)
};
Subnet1Out subnet1_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                           Var o_sb, ActivationTrace* trace = nullptr);

struct Subnet2Out {
  Var out;  // O_SubNet2
  Var it2;  // consumed by SubNet3
  Var it3;  // first interaction result
};
Subnet2Out subnet2_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                           Var x, Var o_it, Var o_subnet1,
                           ActivationTrace* trace = nullptr);

Var subnet3_forward(Graph& g, const ModelConfig& cfg, const VarMap& params, Var x,
                    Var o_it2, Var o_subnet1, Var o_subnet2,
                    ActivationTrace* trace = nullptr);

Var rb_forward(Graph& g, const ModelConfig& cfg, const VarMap& params, Var input,
               Var o_pb, ActivationTrace* trace = nullptr);

// Full forward on an already-built graph. `input` is [N, image_channels, H, W]
// with arbitrary H,W; inputs are reflection-padded to window multiples and the
// output is cropped back, so the output shape equals the input shape.
Var ctnet_forward(Graph& g, const ModelConfig& cfg, const VarMap& params, Var input,
                  ActivationTrace* trace = nullptr);

// Value-level forward without gradient tracking. On a non-finite result this
// throws NumericError naming the first offending layer.
Tensor ctnet_apply(const ModelConfig& cfg, const ParamMap& params, const Tensor& input,
                   ActivationTrace* trace = nullptr);

// --- complexity accounting ----------------------------------------------------

struct BlockCost {
  std::string block;
  std::int64_t params = 0;
  std::int64_t flops = 0;
};

// Closed-form parameter count; independently cross-checked against the
// instantiated ParamMap by tests.
std::int64_t count_parameters(const ModelConfig& cfg);

// Closed-form op count for one forward pass on an H x W input (after window
// padding). Multiply-adds count as 2 ops; attention scores and weighted sums
// are included; normalizations and activations use fixed per-element budgets.
std::int64_t estimate_flops(const ModelConfig& cfg, int h, int w);

std::vector<BlockCost> per_block_costs(const ModelConfig& cfg, int h, int w);

}  // namespace ctnet
