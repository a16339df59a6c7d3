#include "shuffle_former/reachability.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace shuffle_former {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(item);
  return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

StackSpec StackSpec::parse(const std::string& layers, std::int64_t height, std::int64_t width,
                           std::int64_t window) {
  StackSpec spec;
  spec.height = height;
  spec.width = width;
  spec.window = window;
  for (const auto& token : split(layers, ',')) {
    const auto parts = split(token, ':');
    if (parts.empty() || parts.size() > 3) throw ConfigError("bad layer token '" + token + "'");
    ProbeLayer layer;
    const std::string& kind = parts[0];
    if (kind == "wmsa" || kind == "swmsa") {
      if (parts.size() > 2) throw ConfigError("bad layer token '" + token + "'");
      layer.kind = ProbeLayerKind::wmsa;
      layer.shuffle = kind == "swmsa" ? ShuffleMode::long_range : ShuffleMode::none;
      if (parts.size() == 2) layer.shuffle = parse_shuffle_mode(parts[1]);
    } else if (kind == "nwc" || kind == "mlp") {
      if (parts.size() != 1) throw ConfigError("layer '" + kind + "' takes no options");
      layer.kind = kind == "nwc" ? ProbeLayerKind::nwc : ProbeLayerKind::mlp;
    } else if (kind == "block") {
      layer.kind = ProbeLayerKind::block;
      if (parts.size() >= 2) layer.shuffle = parse_shuffle_mode(parts[1]);
      if (parts.size() == 3) layer.nwc = parse_nwc_position(parts[2]);
    } else {
      throw ConfigError("unknown layer kind '" + kind + "' (valid: wmsa, swmsa, nwc, mlp, block)");
    }
    spec.layers.push_back(layer);
  }
  spec.validate();
  return spec;
}

std::string StackSpec::describe() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (i) os << ',';
    switch (l.kind) {
      case ProbeLayerKind::wmsa: os << "wmsa:" << to_string(l.shuffle); break;
      case ProbeLayerKind::nwc: os << "nwc"; break;
      case ProbeLayerKind::mlp: os << "mlp"; break;
      case ProbeLayerKind::block: os << "block:" << to_string(l.shuffle) << ':' << to_string(l.nwc); break;
    }
  }
  return os.str();
}

void StackSpec::validate() const {
  if (layers.empty()) throw ConfigError("probe stack has no layers");
  if (channels <= 0 || head_dim <= 0 || channels % head_dim != 0) {
    throw ConfigError("probe channels must be a positive multiple of head_dim");
  }
  WindowGrid::for_extent(height, width, window);
  for (std::size_t i = 0; i < layers.size(); ++i) (void)shuffle_for(i);
}

BlockConfig StackSpec::block_config(std::size_t layer) const {
  BlockConfig b;
  b.channels = channels;
  b.head_dim = head_dim;
  b.window = window;
  b.mlp_ratio = 4;
  b.shuffle = layers.at(layer).shuffle;
  b.nwc = layers.at(layer).nwc;
  b.even_rule = EvenKernelRule::same_asymmetric;
  b.shuffle_seed = Rng::derive_seed(shuffle_seed, layer);
  return b;
}

WindowShuffle StackSpec::shuffle_for(std::size_t layer) const {
  const auto cfg = block_config(layer);
  return WindowShuffle::make(height, width, window, cfg.shuffle, cfg.shuffle_seed);
}

std::int64_t ReachabilitySet::size() const {
  return std::count(member.begin(), member.end(), char(1));
}

std::vector<std::pair<std::int64_t, std::int64_t>> ReachabilitySet::members() const {
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t h = 0; h < height; ++h)
    for (std::int64_t w = 0; w < width; ++w)
      if (contains(h, w)) out.emplace_back(h, w);
  return out;
}

std::vector<std::int64_t> ReachabilitySet::rows() const {
  std::vector<std::int64_t> out;
  for (std::int64_t h = 0; h < height; ++h) {
    for (std::int64_t w = 0; w < width; ++w) {
      if (contains(h, w)) {
        out.push_back(h);
        break;
      }
    }
  }
  return out;
}

std::vector<std::int64_t> ReachabilitySet::cols() const {
  std::vector<std::int64_t> out;
  for (std::int64_t w = 0; w < width; ++w) {
    for (std::int64_t h = 0; h < height; ++h) {
      if (contains(h, w)) {
        out.push_back(w);
        break;
      }
    }
  }
  return out;
}

bool ReachabilitySet::subset_of(const ReachabilitySet& other) const {
  if (member.size() != other.member.size()) return false;
  for (std::size_t i = 0; i < member.size(); ++i) {
    if (member[i] && !other.member[i]) return false;
  }
  return true;
}

bool ReachabilitySet::strided() const {
  auto gapped = [](const std::vector<std::int64_t>& v) {
    return !v.empty() && v.back() - v.front() + 1 != static_cast<std::int64_t>(v.size());
  };
  return gapped(rows()) && gapped(cols());
}

std::string ReachabilitySet::to_json() const {
  nlohmann::json j;
  j["method"] = method;
  j["grid"] = {height, width};
  j["probe"] = {probe_h, probe_w};
  j["threshold"] = threshold;
  j["epsilon"] = epsilon;
  j["seeds"] = seeds;
  j["size"] = size();
  auto list = nlohmann::json::array();
  for (const auto& [h, w] : members()) list.push_back({h, w});
  j["members"] = std::move(list);
  return j.dump();
}

// ---------------------------------------------------------------------------
// Symbolic relations

namespace {

using Mask = std::vector<char>;

Mask attention_preimage(const Mask& out, const StackSpec& spec, const WindowShuffle& shuffle) {
  const std::int64_t h = spec.height, w = spec.width, m = spec.window;
  const auto inv = shuffle.inverse();
  Mask in = out;  // residual
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      if (!out[static_cast<std::size_t>(y * w + x)]) continue;
      const std::int64_t py = inv.rows.map[static_cast<std::size_t>(y)];
      const std::int64_t px = inv.cols.map[static_cast<std::size_t>(x)];
      const std::int64_t wy = py / m * m, wx = px / m * m;
      for (std::int64_t a = wy; a < wy + m; ++a)
        for (std::int64_t b = wx; b < wx + m; ++b)
          in[static_cast<std::size_t>(shuffle.rows.map[static_cast<std::size_t>(a)] * w +
                                      shuffle.cols.map[static_cast<std::size_t>(b)])] = 1;
    }
  }
  return in;
}

Mask nwc_preimage(const Mask& out, const StackSpec& spec) {
  const NwcConfig nwc{spec.channels, spec.window, true, EvenKernelRule::same_asymmetric};
  const std::int64_t h = spec.height, w = spec.width;
  Mask in = out;
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      if (!out[static_cast<std::size_t>(y * w + x)]) continue;
      for (std::int64_t dy = -nwc.reach_before(); dy <= nwc.reach_after(); ++dy)
        for (std::int64_t dx = -nwc.reach_before(); dx <= nwc.reach_after(); ++dx) {
          const std::int64_t yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) in[static_cast<std::size_t>(yy * w + xx)] = 1;
        }
    }
  }
  return in;
}

}  // namespace

ReachabilitySet symbolic_reachability(const StackSpec& spec, std::int64_t probe_h, std::int64_t probe_w) {
  spec.validate();
  if (probe_h < 0 || probe_h >= spec.height || probe_w < 0 || probe_w >= spec.width) {
    throw ConfigError("probe position outside the grid");
  }
  Mask mask(static_cast<std::size_t>(spec.height * spec.width), 0);
  mask[static_cast<std::size_t>(probe_h * spec.width + probe_w)] = 1;
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    const auto& layer = spec.layers[i];
    switch (layer.kind) {
      case ProbeLayerKind::wmsa:
        mask = attention_preimage(mask, spec, spec.shuffle_for(i));
        break;
      case ProbeLayerKind::nwc:
        mask = nwc_preimage(mask, spec);
        break;
      case ProbeLayerKind::mlp:
        break;
      case ProbeLayerKind::block: {
        if (layer.nwc == NwcPosition::C || layer.nwc == NwcPosition::B) mask = nwc_preimage(mask, spec);
        Mask through = attention_preimage(mask, spec, spec.shuffle_for(i));
        if (layer.nwc == NwcPosition::A) through = nwc_preimage(through, spec);
        for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = mask[k] || through[k];
        break;
      }
    }
  }
  ReachabilitySet r;
  r.height = spec.height;
  r.width = spec.width;
  r.probe_h = probe_h;
  r.probe_w = probe_w;
  r.member = std::move(mask);
  r.method = "symbolic";
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference probe

ProbeStack::ProbeStack(StackSpec spec, std::uint64_t weight_seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(weight_seed);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const auto cfg = spec_.block_config(i);
    Layer layer;
    layer.kind = spec_.layers[i].kind;
    layer.shuffle = spec_.shuffle_for(i);
    switch (layer.kind) {
      case ProbeLayerKind::wmsa:
        layer.norm = BatchNormState<double>::identity(cfg.channels);
        layer.attn = WmsaParams<double>::init(cfg.attention(), rng);
        break;
      case ProbeLayerKind::nwc:
        layer.nwc = NwcParams<double>::init(cfg.nwc_config(cfg.channels));
        break;
      case ProbeLayerKind::mlp:
        layer.norm = BatchNormState<double>::identity(cfg.channels);
        layer.mlp = MlpParams<double>::init(cfg.mlp(), rng);
        break;
      case ProbeLayerKind::block:
        layer.block = BlockParams<double>::init(cfg, rng);
        break;
    }
    layers_.push_back(std::move(layer));
  }
  auto st = state();
  for (auto& p : st.parameters) {
    for (auto& v : p.tensor.mutable_data()) v = 0.5 * rng.normal();
    p.tensor.set_requires_grad(false);
  }
  for (auto& b : st.buffers) {
    const bool var = ends_with(b.name, "running_var");
    for (auto& v : b.tensor.mutable_data()) v = var ? 0.5 + rng.uniform() : 0.1 * rng.normal();
  }
}

ParameterList<double> ProbeStack::state() const {
  ParameterList<double> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string prefix = "layers." + std::to_string(i);
    switch (l.kind) {
      case ProbeLayerKind::wmsa:
        out.add_norm(prefix + ".norm", l.norm);
        l.attn.collect(prefix + ".attn", out);
        break;
      case ProbeLayerKind::nwc:
        l.nwc.collect(prefix + ".nwc", out);
        break;
      case ProbeLayerKind::mlp:
        out.add_norm(prefix + ".norm", l.norm);
        l.mlp.collect(prefix + ".mlp", out);
        break;
      case ProbeLayerKind::block:
        l.block.collect(prefix, out);
        break;
    }
  }
  return out;
}

void ProbeStack::zero_weights() {
  auto st = state();
  for (auto& p : st.parameters) {
    for (auto& v : p.tensor.mutable_data()) v = 0.0;
  }
}

std::string ProbeStack::degenerate_parameter() const {
  const auto st = state();
  for (const auto& p : st.parameters) {
    if (ends_with(p.name, ".bias")) continue;
    const auto d = p.tensor.data();
    if (std::all_of(d.begin(), d.end(), [](double v) { return v == 0.0; })) return p.name;
  }
  return {};
}

Tensor<double> ProbeStack::forward(const Tensor<double>& x) {
  const std::int64_t h = spec_.height, w = spec_.width, m = spec_.window;
  Tensor<double> y = x;
  for (auto& l : layers_) {
    switch (l.kind) {
      case ProbeLayerKind::wmsa: {
        auto u = batchnorm2d(y, l.norm, NormMode::eval);
        y = add(y, aligned_window_reverse(
                       wmsa_forward(shuffled_window_partition(u, m, l.shuffle), l.attn), m, h, w,
                       l.shuffle));
        break;
      }
      case ProbeLayerKind::nwc:
        y = nwc_forward(y, l.nwc);
        break;
      case ProbeLayerKind::mlp:
        y = add(y, mlp_forward(batchnorm2d(y, l.norm, NormMode::eval), l.mlp));
        break;
      case ProbeLayerKind::block:
        y = block_forward(y, l.block, NormMode::eval);
        break;
    }
  }
  return y;
}

ReachabilitySet reachability_probe(std::vector<ProbeStack>& models, std::int64_t probe_h,
                                   std::int64_t probe_w, const ProbeOptions& options) {
  if (models.empty()) throw ConfigError("reachability probe needs at least one model");
  const StackSpec& spec = models.front().spec();
  const std::int64_t h = spec.height, w = spec.width, c = spec.channels;
  if (probe_h < 0 || probe_h >= h || probe_w < 0 || probe_w >= w) {
    throw ConfigError("probe position outside the grid");
  }
  for (const auto& model : models) {
    const auto bad = model.degenerate_parameter();
    if (!bad.empty()) {
      throw ConfigError("degenerate weights: '" + bad + "' is all zero and would mask reachability");
    }
  }
  ReachabilitySet r;
  r.height = h;
  r.width = w;
  r.probe_h = probe_h;
  r.probe_w = probe_w;
  r.member.assign(static_cast<std::size_t>(h * w), 0);
  r.method = "fd";
  r.threshold = options.threshold;
  r.epsilon = options.epsilon;
  r.seeds = options.seeds;

  const std::int64_t plane = h * w;
  for (std::size_t k = 0; k < models.size(); ++k) {
    Rng rng(Rng::derive_seed(k < options.seeds.size() ? options.seeds[k] : k, 0x1b));
    auto base = Tensor<double>::zeros({1, c, h, w});
    for (auto& v : base.mutable_data()) v = rng.normal();
    const auto ref = models[k].forward(base);
    auto probe_values = [&](const Tensor<double>& out) {
      std::vector<double> v(static_cast<std::size_t>(c));
      for (std::int64_t ch = 0; ch < c; ++ch) {
        v[static_cast<std::size_t>(ch)] = out.values()[static_cast<std::size_t>(ch * plane + probe_h * w + probe_w)];
      }
      return v;
    };
    const auto ref_v = probe_values(ref);
    double scale = 1.0;
    for (double v : ref_v) scale = std::max(scale, std::abs(v));
    for (std::int64_t pos = 0; pos < plane; ++pos) {
      if (r.member[static_cast<std::size_t>(pos)]) continue;
      auto x = base.detach();
      auto xd = x.mutable_data();
      for (std::int64_t ch = 0; ch < c; ++ch) xd[static_cast<std::size_t>(ch * plane + pos)] += options.epsilon;
      const auto v = probe_values(models[k].forward(x));
      double diff = 0;
      for (std::size_t ch = 0; ch < v.size(); ++ch) diff = std::max(diff, std::abs(v[ch] - ref_v[ch]));
      if (diff > options.threshold * scale) r.member[static_cast<std::size_t>(pos)] = 1;
    }
  }
  return r;
}

ReachabilitySet reachability_probe(const StackSpec& spec, std::int64_t probe_h, std::int64_t probe_w,
                                   const ProbeOptions& options) {
  std::vector<ProbeStack> models;
  for (auto seed : options.seeds) models.emplace_back(spec, seed);
  return reachability_probe(models, probe_h, probe_w, options);
}

}  // namespace shuffle_former
