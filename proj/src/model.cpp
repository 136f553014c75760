#include "ctnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "ctnet/error.hpp"
#include "ctnet/rng.hpp"

namespace ctnet {

// --- config -------------------------------------------------------------------

void ModelConfig::validate() const {
  if (image_channels != 1 && image_channels != 3)
    throw ConfigError("image_channels must be 1 or 3");
  if (width <= 0) throw ConfigError("width must be positive");
  if (window < 2) throw ConfigError("window must be at least 2");
  if (heads < 1) throw ConfigError("heads must be at least 1");
  if (width % heads != 0) throw ConfigError("width must be divisible by heads");
  if (cfe_hidden_ratio < 1) throw ConfigError("cfe_hidden_ratio must be at least 1");
  if (attn_scale < 0.0) throw ConfigError("attn_scale must be non-negative");
}

double ModelConfig::attention_scale() const {
  return attn_scale > 0.0 ? attn_scale
                          : std::sqrt(static_cast<double>(width) / heads);
}

ModelConfig ModelConfig::tiny(int image_channels) {
  ModelConfig cfg;
  cfg.image_channels = image_channels;
  cfg.width = 8;
  cfg.window = 4;
  cfg.heads = 2;
  cfg.cfe_hidden_ratio = 4;
  return cfg;
}

// --- parameter enumeration ------------------------------------------------------

namespace {

void add_conv(std::vector<ParamSpec>& v, const std::string& name, int cout, int cin) {
  v.push_back({name + ".w", {cout, cin, 3, 3}});
  v.push_back({name + ".b", {cout}});
}

void add_fcl(std::vector<ParamSpec>& v, const std::string& name, int dout, int din) {
  v.push_back({name + ".w", {dout, din}});
  v.push_back({name + ".b", {dout}});
}

void add_tm(std::vector<ParamSpec>& v, const std::string& p, const ModelConfig& cfg) {
  const int c = cfg.width;
  v.push_back({p + ".pos", {cfg.window * cfg.window, c}});
  v.push_back({p + ".mhsa.ln.g", {c}});
  v.push_back({p + ".mhsa.ln.b", {c}});
  add_fcl(v, p + ".mhsa.q", c, c);
  add_fcl(v, p + ".mhsa.k", c, c);
  add_fcl(v, p + ".mhsa.v", c, c);
  add_fcl(v, p + ".mhsa.proj", c, c);
  v.push_back({p + ".cfe.ln.g", {c}});
  v.push_back({p + ".cfe.ln.b", {c}});
  add_fcl(v, p + ".cfe.fc1", cfg.cfe_hidden_ratio * c, c);
  add_fcl(v, p + ".cfe.fc2", c, cfg.cfe_hidden_ratio * c);
}

void add_fm(std::vector<ParamSpec>& v, const std::string& p, int inputs,
            const ModelConfig& cfg) {
  const int c = cfg.width;
  v.push_back({p + ".dw.w", {inputs * c, 1, 3, 3}});
  v.push_back({p + ".pw.w", {c, inputs * c, 1, 1}});
  v.push_back({p + ".pw.b", {c}});
}

void add_itm(std::vector<ParamSpec>& v, const std::string& p, const ModelConfig& cfg) {
  const int c = cfg.width;
  add_fcl(v, p + ".fc_in", c, c);
  add_tm(v, p + ".tm", cfg);
  add_fcl(v, p + ".fc_mid", c, c);
  add_fcl(v, p + ".fc_out", c, c);
}

bool fms_enabled(const ModelConfig& cfg) {
  return !cfg.disable_fms && !cfg.serial_only;
}

}  // namespace

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  const int c = cfg.width;
  std::vector<ParamSpec> v;

  add_conv(v, "sb.conv1", c, cfg.image_channels);
  add_conv(v, "sb.conv2", c, c);
  add_conv(v, "sb.conv3", c, c);
  if (!cfg.disable_tm_in_sb) add_tm(v, "sb.tm", cfg);

  for (int i = 1; i <= 5; ++i)
    add_conv(v, "subnet1.conv" + std::to_string(i), c, c);
  add_tm(v, "subnet1.tm", cfg);

  add_conv(v, "subnet2.conv1", c, c);
  add_conv(v, "subnet2.conv2", c, c);
  add_tm(v, "subnet2.tm1", cfg);
  if (fms_enabled(cfg)) add_fm(v, "subnet2.fm1", 2, cfg);
  add_conv(v, "subnet2.conv3", c, c);
  add_conv(v, "subnet2.conv4", c, c);
  add_tm(v, "subnet2.tm2", cfg);
  if (fms_enabled(cfg)) add_fm(v, "subnet2.fm2", 2, cfg);
  add_tm(v, "subnet2.tm3", cfg);

  add_conv(v, "subnet3.conv1", c, c);
  add_tm(v, "subnet3.tm1", cfg);
  add_tm(v, "subnet3.tm2", cfg);
  if (fms_enabled(cfg)) add_fm(v, "subnet3.fm1", 2, cfg);
  add_conv(v, "subnet3.conv2", c, c);
  add_tm(v, "subnet3.tm3", cfg);
  add_tm(v, "subnet3.tm4", cfg);
  if (fms_enabled(cfg)) add_fm(v, "subnet3.fm2", 2, cfg);
  if (!cfg.disable_itm) add_itm(v, "subnet3.itm1", cfg);
  if (fms_enabled(cfg)) add_fm(v, "subnet3.fm3", 3, cfg);
  if (!cfg.disable_itm) add_itm(v, "subnet3.itm2", cfg);

  add_conv(v, "rb.conv", cfg.image_channels, c);
  return v;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::int64_t fan_in_of(const ParamSpec& spec) {
  if (spec.shape.size() == 4)
    return static_cast<std::int64_t>(spec.shape[1]) * spec.shape[2] * spec.shape[3];
  return spec.shape[1];  // [Dout, Din]
}

// Layers that close a residual branch start at a tenth of the Kaiming bound
// so the network begins near the identity map. With the stack of residual
// attention blocks this deep, full-scale init inflates activations by
// orders of magnitude and a fresh model cannot recover in a short run.
constexpr double kResidualInitScale = 0.1;

bool closes_residual_branch(const std::string& name) {
  for (const char* suffix :
       {".mhsa.proj.w", ".cfe.fc2.w", ".fc_in.w", ".fc_out.w", "sb.conv3.w",
        "subnet1.conv3.w", "subnet1.conv5.w", "subnet2.conv2.w", "subnet2.conv4.w",
        "rb.conv.w"})
    if (ends_with(name, suffix)) return true;
  return false;
}

}  // namespace

ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamMap params;
  for (const ParamSpec& spec : param_specs(cfg)) {
    Tensor t(spec.shape);
    if (ends_with(spec.name, ".ln.g")) {
      t.fill(1.0);
    } else if (ends_with(spec.name, ".w")) {
      double bound = std::sqrt(6.0 / static_cast<double>(fan_in_of(spec)));
      if (closes_residual_branch(spec.name)) bound *= kResidualInitScale;
      Rng rng = Rng::keyed(seed, hash_name(spec.name));
      for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    }
    // biases, positional tables and ln.b stay zero
    params.emplace(spec.name, std::move(t));
  }
  return params;
}

ParamMap zero_weight_params(const ModelConfig& cfg) {
  ParamMap params;
  for (const ParamSpec& spec : param_specs(cfg)) {
    Tensor t(spec.shape);
    if (ends_with(spec.name, ".ln.g")) t.fill(1.0);
    params.emplace(spec.name, std::move(t));
  }
  return params;
}

void validate_params(const ModelConfig& cfg, const ParamMap& params) {
  const std::vector<ParamSpec> specs = param_specs(cfg);
  std::vector<std::string> missing, extra, bad_shape;
  std::map<std::string, const ParamSpec*> by_name;
  for (const ParamSpec& s : specs) by_name.emplace(s.name, &s);

  for (const auto& [name, spec] : by_name) {
    auto it = params.find(name);
    if (it == params.end())
      missing.push_back(name);
    else if (it->second.shape() != spec->shape)
      bad_shape.push_back(name);
  }
  for (const auto& [name, t] : params)
    if (!by_name.count(name)) extra.push_back(name);

  if (missing.empty() && extra.empty() && bad_shape.empty()) return;
  std::ostringstream msg;
  msg << "parameter set does not match the configuration:";
  auto list = [&msg](const char* label, const std::vector<std::string>& names) {
    if (names.empty()) return;
    msg << " " << label << ":";
    for (const std::string& n : names) msg << " " << n;
    msg << ";";
  };
  list("missing", missing);
  list("extra", extra);
  list("wrong shape", bad_shape);
  throw ConfigError(msg.str());
}

// --- activation trace ------------------------------------------------------------

void ActivationTrace::add(const std::string& name, Tensor value) {
  if (has(name)) throw ConfigError("duplicate trace entry '" + name + "'");
  entries_.emplace_back(name, std::move(value));
}

bool ActivationTrace::has(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return true;
  return false;
}

const Tensor& ActivationTrace::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw ConfigError("no trace entry '" + name + "'");
}

std::vector<std::string> ActivationTrace::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [n, t] : entries_) out.push_back(n);
  return out;
}

std::vector<std::string> trace_names(const ModelConfig& cfg) {
  std::vector<std::string> v;
  auto tm = [&v](const std::string& p) {
    v.push_back(p + ".mhsa");
    v.push_back(p + ".in_cfe");
    v.push_back(p + ".out");
  };
  auto itm = [&](const std::string& p) {
    v.push_back(p + ".y1");
    tm(p + ".tm");
    v.push_back(p + ".out");
  };

  v.insert(v.end(), {"sb.conv1", "sb.conv2", "sb.conv3", "sb.in_tm"});
  if (!cfg.disable_tm_in_sb) tm("sb.tm");

  v.insert(v.end(), {"subnet1.conv1", "subnet1.conv2", "subnet1.conv3", "subnet1.it"});
  tm("subnet1.tm");
  v.insert(v.end(), {"subnet1.conv4", "subnet1.conv5", "subnet1.out"});

  v.insert(v.end(), {"subnet2.conv1", "subnet2.conv2", "subnet2.res1"});
  tm("subnet2.tm1");
  if (fms_enabled(cfg)) v.push_back("subnet2.it3");
  v.insert(v.end(), {"subnet2.conv3", "subnet2.conv4", "subnet2.res2"});
  tm("subnet2.tm2");
  if (fms_enabled(cfg)) v.push_back("subnet2.it2");
  tm("subnet2.tm3");

  v.push_back("subnet3.conv1");
  tm("subnet3.tm1");
  tm("subnet3.tm2");
  if (fms_enabled(cfg)) v.push_back("subnet3.fm1");
  v.push_back("subnet3.conv2");
  tm("subnet3.tm3");
  tm("subnet3.tm4");
  if (fms_enabled(cfg)) v.push_back("subnet3.fm2");
  if (!cfg.disable_itm) itm("subnet3.itm1");
  if (fms_enabled(cfg)) v.push_back("subnet3.fm3");
  if (!cfg.disable_itm) itm("subnet3.itm2");

  v.insert(v.end(), {"rb.conv", "rb.out"});
  return v;
}

// --- forward ---------------------------------------------------------------------

namespace {

Var P(const VarMap& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

void record(ActivationTrace* trace, const std::string& name, Var v) {
  if (trace) trace->add(name, v.val());
}

// Token tensors [G,T,C] are stored in the trace as pixel maps [N,C,H,W].
Tensor tokens_to_pixels(const Tensor& tokens, int window, int n, int h, int w) {
  const int c = tokens.dim(2);
  Tensor out({n, c, h, w});
  const int nwh = h / window, nww = w / window;
  const int t = window * window;
  std::int64_t g = 0;
  for (int in = 0; in < n; ++in)
    for (int wh = 0; wh < nwh; ++wh)
      for (int ww = 0; ww < nww; ++ww, ++g)
        for (int th = 0; th < window; ++th)
          for (int tw = 0; tw < window; ++tw) {
            const std::int64_t tok = (g * t + th * window + tw) * c;
            for (int ch = 0; ch < c; ++ch)
              out.data()[((static_cast<std::int64_t>(in) * c + ch) * h + wh * window + th) * w +
                         ww * window + tw] = tokens.data()[tok + ch];
          }
  return out;
}

void record_tokens(ActivationTrace* trace, const std::string& name, Var v, int window,
                   int n, int h, int w) {
  if (trace) trace->add(name, tokens_to_pixels(v.val(), window, n, h, w));
}

Var conv_r(Graph& g, const VarMap& params, const std::string& name, Var x) {
  return g.relu(g.conv2d(x, P(params, name + ".w"), P(params, name + ".b")));
}

Var conv_l(Graph& g, const VarMap& params, const std::string& name, Var x) {
  return g.conv2d(x, P(params, name + ".w"), P(params, name + ".b"));
}

// Fully connected layer over the channel axis of an [N,C,H,W] map.
Var fcl_nchw(Graph& g, const VarMap& params, const std::string& name, Var x) {
  Var t = g.permute(x, {0, 2, 3, 1});
  t = g.linear(t, P(params, name + ".w"), P(params, name + ".b"));
  return g.permute(t, {0, 3, 1, 2});
}

}  // namespace

Var mhsa_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                 const std::string& prefix, Var tokens) {
  const Tensor& tv = tokens.val();
  if (tv.rank() != 3) throw ShapeError("mhsa_forward: tokens must be [G,T,C]");
  const int gn = tv.dim(0), t = tv.dim(1), d = tv.dim(2);
  if (d % cfg.heads != 0)
    throw ShapeError("mhsa_forward: embedding dim must be divisible by heads");
  const int hd = d / cfg.heads;

  Var nrm = g.layer_norm(tokens, P(params, prefix + ".ln.g"), P(params, prefix + ".ln.b"));
  Var q = g.linear(nrm, P(params, prefix + ".q.w"), P(params, prefix + ".q.b"));
  Var k = g.linear(nrm, P(params, prefix + ".k.w"), P(params, prefix + ".k.b"));
  Var v = g.linear(nrm, P(params, prefix + ".v.w"), P(params, prefix + ".v.b"));

  auto split_heads = [&](Var x) {
    Var r = g.reshape(x, {gn, t, cfg.heads, hd});
    r = g.permute(r, {0, 2, 1, 3});
    return g.reshape(r, {gn * cfg.heads, t, hd});
  };
  Var qh = split_heads(q), kh = split_heads(k), vh = split_heads(v);

  Var scores = g.scale(g.matmul(qh, g.permute(kh, {0, 2, 1})),
                       1.0 / cfg.attention_scale());
  Var attn = g.softmax(scores);
  Var ctx = g.matmul(attn, vh);

  ctx = g.reshape(ctx, {gn, cfg.heads, t, hd});
  ctx = g.permute(ctx, {0, 2, 1, 3});
  ctx = g.reshape(ctx, {gn, t, d});
  return g.linear(ctx, P(params, prefix + ".proj.w"), P(params, prefix + ".proj.b"));
}

Var cfe_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                const std::string& prefix, Var tokens) {
  (void)cfg;
  Var nrm = g.layer_norm(tokens, P(params, prefix + ".ln.g"), P(params, prefix + ".ln.b"));
  Var hidden = g.relu(g.linear(nrm, P(params, prefix + ".fc1.w"), P(params, prefix + ".fc1.b")));
  Var out = g.linear(hidden, P(params, prefix + ".fc2.w"), P(params, prefix + ".fc2.b"));
  return g.add(out, tokens);
}

Var tm_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
               const std::string& prefix, Var x, ActivationTrace* trace) {
  const Tensor& xv = x.val();
  if (xv.rank() != 4 || xv.dim(1) != cfg.width)
    throw ShapeError("tm_forward: input must be [N,width,H,W]");
  const int n = xv.dim(0), h = xv.dim(2), w = xv.dim(3);

  Var tokens = g.window_partition(x, cfg.window);
  tokens = g.add_broadcast(tokens, P(params, prefix + ".pos"));

  Var mhsa = mhsa_forward(g, cfg, params, prefix + ".mhsa", tokens);
  record_tokens(trace, prefix + ".mhsa", mhsa, cfg.window, n, h, w);

  Var in_cfe = g.add(mhsa, tokens);
  record_tokens(trace, prefix + ".in_cfe", in_cfe, cfg.window, n, h, w);

  Var out_tokens = cfe_forward(g, cfg, params, prefix + ".cfe", in_cfe);
  Var out = g.window_merge(out_tokens, cfg.window, n, h, w);
  record(trace, prefix + ".out", out);
  return out;
}

Var itm_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                const std::string& prefix, Var x, ActivationTrace* trace) {
  Var y1 = g.add(fcl_nchw(g, params, prefix + ".fc_in", x), x);
  record(trace, prefix + ".y1", y1);
  Var y2 = tm_forward(g, cfg, params, prefix + ".tm", y1, trace);
  Var mid = g.relu(fcl_nchw(g, params, prefix + ".fc_mid", y2));
  Var out = g.add(fcl_nchw(g, params, prefix + ".fc_out", mid), y2);
  record(trace, prefix + ".out", out);
  return out;
}

Var fm_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
               const std::string& prefix, const std::vector<Var>& inputs) {
  if (inputs.size() != 2 && inputs.size() != 3)
    throw ShapeError("fm_forward: takes 2 or 3 inputs");
  for (const Var& v : inputs)
    if (!v.val().same_shape(inputs[0].val()))
      throw ShapeError("fm_forward: inputs must share a shape");
  (void)cfg;
  Var cat = g.concat_channels(inputs);
  Var dw = g.depthwise_conv2d(cat, P(params, prefix + ".dw.w"));
  return g.pointwise_conv2d(dw, P(params, prefix + ".pw.w"), P(params, prefix + ".pw.b"));
}

Var sb_forward(Graph& g, const ModelConfig& cfg, const VarMap& params, Var input,
               ActivationTrace* trace) {
  Var c1 = conv_l(g, params, "sb.conv1", input);
  record(trace, "sb.conv1", c1);
  Var c2 = conv_r(g, params, "sb.conv2", c1);
  record(trace, "sb.conv2", c2);
  Var c3 = conv_l(g, params, "sb.conv3", c2);
  record(trace, "sb.conv3", c3);
  Var in_tm = g.add(c3, cfg.sb_residual_second_conv ? c2 : c1);
  record(trace, "sb.in_tm", in_tm);
  if (cfg.disable_tm_in_sb) return in_tm;
  return tm_forward(g, cfg, params, "sb.tm", in_tm, trace);
}

Subnet1Out subnet1_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                           Var o_sb, ActivationTrace* trace) {
  Var a1 = conv_r(g, params, "subnet1.conv1", o_sb);
  record(trace, "subnet1.conv1", a1);
  Var a2 = conv_l(g, params, "subnet1.conv2", a1);
  record(trace, "subnet1.conv2", a2);
  Var a3 = conv_r(g, params, "subnet1.conv3", a2);
  record(trace, "subnet1.conv3", a3);
  Var it = g.add(a3, o_sb);
  record(trace, "subnet1.it", it);
  Var tm_out = tm_forward(g, cfg, params, "subnet1.tm", it, trace);
  Var a4 = conv_r(g, params, "subnet1.conv4", tm_out);
  record(trace, "subnet1.conv4", a4);
  Var a5 = conv_l(g, params, "subnet1.conv5", a4);
  record(trace, "subnet1.conv5", a5);
  Var out = g.add(tm_out, a5);
  record(trace, "subnet1.out", out);
  return {out, it, tm_out};
}

Subnet2Out subnet2_forward(Graph& g, const ModelConfig& cfg, const VarMap& params,
                           Var x, Var o_it, Var o_subnet1, ActivationTrace* trace) {
  Var b1 = conv_r(g, params, "subnet2.conv1", x);
  record(trace, "subnet2.conv1", b1);
  Var b2 = conv_l(g, params, "subnet2.conv2", b1);
  record(trace, "subnet2.conv2", b2);
  Var r1 = g.add(b2, x);
  record(trace, "subnet2.res1", r1);
  Var t1 = tm_forward(g, cfg, params, "subnet2.tm1", r1, trace);

  Var it3 = t1;
  if (fms_enabled(cfg)) {
    it3 = fm_forward(g, cfg, params, "subnet2.fm1", {t1, o_it});
    record(trace, "subnet2.it3", it3);
  }

  Var b3 = conv_r(g, params, "subnet2.conv3", it3);
  record(trace, "subnet2.conv3", b3);
  Var b4 = conv_l(g, params, "subnet2.conv4", b3);
  record(trace, "subnet2.conv4", b4);
  Var r2 = g.add(b4, it3);
  record(trace, "subnet2.res2", r2);
  Var t2 = tm_forward(g, cfg, params, "subnet2.tm2", r2, trace);

  Var it2 = t2;
  if (fms_enabled(cfg)) {
    it2 = fm_forward(g, cfg, params, "subnet2.fm2", {t2, o_subnet1});
    record(trace, "subnet2.it2", it2);
  }

  Var out = tm_forward(g, cfg, params, "subnet2.tm3", it2, trace);
  return {out, it2, it3};
}

Var subnet3_forward(Graph& g, const ModelConfig& cfg, const VarMap& params, Var x,
                    Var o_it2, Var o_subnet1, Var o_subnet2, ActivationTrace* trace) {
  Var c1 = conv_r(g, params, "subnet3.conv1", x);
  record(trace, "subnet3.conv1", c1);
  Var u = tm_forward(g, cfg, params, "subnet3.tm1", c1, trace);
  u = tm_forward(g, cfg, params, "subnet3.tm2", u, trace);
  Var f1 = u;
  if (fms_enabled(cfg)) {
    f1 = fm_forward(g, cfg, params, "subnet3.fm1", {u, o_it2});
    record(trace, "subnet3.fm1", f1);
  }

  Var c2 = conv_r(g, params, "subnet3.conv2", f1);
  record(trace, "subnet3.conv2", c2);
  Var v = tm_forward(g, cfg, params, "subnet3.tm3", c2, trace);
  v = tm_forward(g, cfg, params, "subnet3.tm4", v, trace);
  Var f2 = v;
  if (fms_enabled(cfg)) {
    f2 = fm_forward(g, cfg, params, "subnet3.fm2", {v, o_subnet2});
    record(trace, "subnet3.fm2", f2);
  }

  Var i1 = cfg.disable_itm ? f2 : itm_forward(g, cfg, params, "subnet3.itm1", f2, trace);
  Var f3 = i1;
  if (fms_enabled(cfg)) {
    f3 = fm_forward(g, cfg, params, "subnet3.fm3", {i1, o_subnet1, o_subnet2});
    record(trace, "subnet3.fm3", f3);
  }
  return cfg.disable_itm ? f3 : itm_forward(g, cfg, params, "subnet3.itm2", f3, trace);
}

Var rb_forward(Graph& g, const ModelConfig& cfg, const VarMap& params, Var input,
               Var o_pb, ActivationTrace* trace) {
  (void)cfg;
  Var noise = conv_l(g, params, "rb.conv", o_pb);
  record(trace, "rb.conv", noise);
  return g.sub(input, noise);
}

Var ctnet_forward(Graph& g, const ModelConfig& cfg, const VarMap& params, Var input,
                  ActivationTrace* trace) {
  cfg.validate();
  const Tensor& xv = input.val();
  if (xv.rank() != 4)
    throw ShapeError("ctnet_forward: input must be [N,C,H,W]");
  if (xv.dim(1) != cfg.image_channels)
    throw ShapeError("ctnet_forward: input has " + std::to_string(xv.dim(1)) +
                     " channels but the model expects " +
                     std::to_string(cfg.image_channels));

  const int h = xv.dim(2), w = xv.dim(3);
  const int pad_h = (cfg.window - h % cfg.window) % cfg.window;
  const int pad_w = (cfg.window - w % cfg.window) % cfg.window;
  Var cur = input;
  if (pad_h || pad_w) cur = g.pad_reflect(cur, 0, pad_h, 0, pad_w);

  Var o_sb = sb_forward(g, cfg, params, cur, trace);
  Var o_pb;
  Subnet1Out s1 = subnet1_forward(g, cfg, params, o_sb, trace);
  if (cfg.serial_only) {
    Subnet2Out s2 = subnet2_forward(g, cfg, params, s1.out, s1.it, s1.out, trace);
    o_pb = subnet3_forward(g, cfg, params, s2.out, s2.it2, s1.out, s2.out, trace);
  } else {
    Subnet2Out s2 = subnet2_forward(g, cfg, params, o_sb, s1.it, s1.out, trace);
    o_pb = subnet3_forward(g, cfg, params, o_sb, s2.it2, s1.out, s2.out, trace);
  }

  Var ic = rb_forward(g, cfg, params, cur, o_pb, trace);
  if (pad_h || pad_w) ic = g.crop(ic, 0, 0, h, w);
  record(trace, "rb.out", ic);
  return ic;
}

Tensor ctnet_apply(const ModelConfig& cfg, const ParamMap& params, const Tensor& input,
                   ActivationTrace* trace) {
  auto run = [&](ActivationTrace* t) {
    Graph g(/*grad_enabled=*/false);
    VarMap bound = bind_params(g, params, false);
    Var out = ctnet_forward(g, cfg, bound, g.leaf(input), t);
    return out.val();
  };
  if (!input.all_finite()) throw NumericError("ctnet_apply: non-finite input");
  try {
    return run(trace);
  } catch (const NumericError& e) {
    if (trace && !trace->entries().empty())
      throw NumericError("numeric failure after layer '" +
                         trace->entries().back().first + "': " + e.what());
    // rerun with tracing to locate the first offending layer
    ActivationTrace probe;
    try {
      run(&probe);
    } catch (const NumericError&) {
      const std::string at =
          probe.entries().empty() ? "<input>" : probe.entries().back().first;
      throw NumericError("numeric failure after layer '" + at + "': " + e.what());
    }
    throw;
  }
}

// --- complexity accounting --------------------------------------------------------

namespace {

struct Hw {
  std::int64_t hw;  // padded pixel count
};

std::int64_t conv_params(int cout, int cin) {
  return static_cast<std::int64_t>(cout) * cin * 9 + cout;
}

std::int64_t fcl_params(int dout, int din) {
  return static_cast<std::int64_t>(dout) * din + dout;
}

std::int64_t tm_params(const ModelConfig& cfg) {
  const std::int64_t c = cfg.width;
  const std::int64_t t = static_cast<std::int64_t>(cfg.window) * cfg.window;
  std::int64_t p = t * c;                       // positional table
  p += 2 * c;                                   // mhsa ln
  p += 4 * fcl_params(cfg.width, cfg.width);    // q, k, v, proj
  p += 2 * c;                                   // cfe ln
  p += fcl_params(cfg.cfe_hidden_ratio * cfg.width, cfg.width);
  p += fcl_params(cfg.width, cfg.cfe_hidden_ratio * cfg.width);
  return p;
}

std::int64_t fm_params(const ModelConfig& cfg, int inputs) {
  const std::int64_t c = cfg.width;
  return inputs * c * 9                      // depthwise, no bias
         + c * (inputs * c) + c;             // pointwise + bias
}

std::int64_t itm_params(const ModelConfig& cfg) {
  return 3 * fcl_params(cfg.width, cfg.width) + tm_params(cfg);
}

std::int64_t conv_flops(int cout, int cin, Hw s) {
  return (2LL * cout * cin * 9 + cout) * s.hw;
}

std::int64_t fcl_flops(int dout, int din, std::int64_t rows) {
  return (2LL * dout * din + dout) * rows;
}

std::int64_t tm_flops(const ModelConfig& cfg, Hw s) {
  const std::int64_t c = cfg.width;
  const std::int64_t rows = s.hw;  // one token per pixel
  const std::int64_t t = static_cast<std::int64_t>(cfg.window) * cfg.window;
  std::int64_t f = rows * c;                    // + positional table
  f += 8 * rows * c;                            // layer norm
  f += 3 * fcl_flops(cfg.width, cfg.width, rows);  // q, k, v
  f += 2 * rows * t * c;                        // scores Q K^T
  f += rows * cfg.heads * t;                    // scaling
  f += 5 * rows * cfg.heads * t;                // softmax
  f += 2 * rows * t * c;                        // attention-weighted V
  f += fcl_flops(cfg.width, cfg.width, rows);   // proj
  f += rows * c;                                // residual into cfe
  f += 8 * rows * c;                            // cfe layer norm
  f += fcl_flops(cfg.cfe_hidden_ratio * cfg.width, cfg.width, rows);
  f += rows * cfg.cfe_hidden_ratio * c;         // relu
  f += fcl_flops(cfg.width, cfg.cfe_hidden_ratio * cfg.width, rows);
  f += rows * c;                                // cfe residual
  return f;
}

std::int64_t fm_flops(const ModelConfig& cfg, int inputs, Hw s) {
  const std::int64_t c = cfg.width;
  return 2 * (inputs * c) * 9 * s.hw                    // depthwise
         + (2 * c * (inputs * c) + c) * s.hw;           // pointwise
}

std::int64_t itm_flops(const ModelConfig& cfg, Hw s) {
  const std::int64_t c = cfg.width;
  std::int64_t f = fcl_flops(cfg.width, cfg.width, s.hw) + s.hw * c;  // fc_in + residual
  f += tm_flops(cfg, s);
  f += fcl_flops(cfg.width, cfg.width, s.hw) + s.hw * c;              // fc_mid + relu
  f += fcl_flops(cfg.width, cfg.width, s.hw) + s.hw * c;              // fc_out + residual
  return f;
}

std::int64_t relu_flops(const ModelConfig& cfg, Hw s) {
  return static_cast<std::int64_t>(cfg.width) * s.hw;
}

std::int64_t add_flops(const ModelConfig& cfg, Hw s) {
  return static_cast<std::int64_t>(cfg.width) * s.hw;
}

}  // namespace

std::vector<BlockCost> per_block_costs(const ModelConfig& cfg, int h, int w) {
  cfg.validate();
  const int c = cfg.width;
  const int ph = h + (cfg.window - h % cfg.window) % cfg.window;
  const int pw = w + (cfg.window - w % cfg.window) % cfg.window;
  const Hw s{static_cast<std::int64_t>(ph) * pw};
  const bool fms = fms_enabled(cfg);

  std::vector<BlockCost> out;

  BlockCost sb{"sb", 0, 0};
  sb.params = conv_params(c, cfg.image_channels) + 2 * conv_params(c, c);
  sb.flops = conv_flops(c, cfg.image_channels, s) + conv_flops(c, c, s) +
             relu_flops(cfg, s) + conv_flops(c, c, s) + add_flops(cfg, s);
  if (!cfg.disable_tm_in_sb) {
    sb.params += tm_params(cfg);
    sb.flops += tm_flops(cfg, s);
  }
  out.push_back(sb);

  BlockCost s1{"subnet1", 0, 0};
  s1.params = 5 * conv_params(c, c) + tm_params(cfg);
  s1.flops = 5 * conv_flops(c, c, s) + 3 * relu_flops(cfg, s) + tm_flops(cfg, s) +
             2 * add_flops(cfg, s);
  out.push_back(s1);

  BlockCost s2{"subnet2", 0, 0};
  s2.params = 4 * conv_params(c, c) + 3 * tm_params(cfg) + (fms ? 2 * fm_params(cfg, 2) : 0);
  s2.flops = 4 * conv_flops(c, c, s) + 2 * relu_flops(cfg, s) + 3 * tm_flops(cfg, s) +
             2 * add_flops(cfg, s) + (fms ? 2 * fm_flops(cfg, 2, s) : 0);
  out.push_back(s2);

  BlockCost s3{"subnet3", 0, 0};
  s3.params = 2 * conv_params(c, c) + 4 * tm_params(cfg);
  s3.flops = 2 * conv_flops(c, c, s) + 2 * relu_flops(cfg, s) + 4 * tm_flops(cfg, s);
  if (fms) {
    s3.params += 2 * fm_params(cfg, 2) + fm_params(cfg, 3);
    s3.flops += 2 * fm_flops(cfg, 2, s) + fm_flops(cfg, 3, s);
  }
  if (!cfg.disable_itm) {
    s3.params += 2 * itm_params(cfg);
    s3.flops += 2 * itm_flops(cfg, s);
  }
  out.push_back(s3);

  BlockCost rb{"rb", 0, 0};
  rb.params = conv_params(cfg.image_channels, c);
  rb.flops = conv_flops(cfg.image_channels, c, s) +
             static_cast<std::int64_t>(cfg.image_channels) * s.hw;  // subtraction
  out.push_back(rb);

  return out;
}

std::int64_t count_parameters(const ModelConfig& cfg) {
  std::int64_t total = 0;
  for (const BlockCost& b : per_block_costs(cfg, cfg.window, cfg.window)) total += b.params;
  return total;
}

std::int64_t estimate_flops(const ModelConfig& cfg, int h, int w) {
  std::int64_t total = 0;
  for (const BlockCost& b : per_block_costs(cfg, h, w)) total += b.flops;
  return total;
}

}  // namespace ctnet
