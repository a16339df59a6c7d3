#include "shuffle_former/cost.hpp"

#include <iomanip>
#include <sstream>

namespace shuffle_former {

std::int64_t window_attention_core_flops(std::int64_t hw, std::int64_t channels, std::int64_t window) {
  return 2 * window * window * hw * channels;
}

std::int64_t global_attention_core_flops(std::int64_t hw, std::int64_t channels) {
  return 2 * hw * hw * channels;
}

std::int64_t attention_projection_flops(std::int64_t hw, std::int64_t channels) {
  return 4 * hw * channels * channels;
}

std::int64_t CostReport::total_params() const {
  std::int64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}

std::int64_t CostReport::total_flops() const {
  std::int64_t n = 0;
  for (const auto& r : rows) n += r.flops;
  return n;
}

const CostRow* CostReport::find(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

std::string CostReport::to_csv(const std::string& echo) const {
  std::ostringstream os;
  std::istringstream lines(echo);
  for (std::string line; std::getline(lines, line);) {
    if (line.empty()) continue;
    os << (line.front() == '#' ? "" : "# ") << line << '\n';
  }
  os << "# model=" << model << '\n'
     << "# resolution=" << height << 'x' << width << '\n'
     << "# convention=" << convention << '\n'
     << "name,params,flops\n";
  for (const auto& r : rows) os << r.name << ',' << r.params << ',' << r.flops << '\n';
  os << "TOTAL," << total_params() << ',' << total_flops() << '\n';
  return os.str();
}

std::string CostReport::to_text() const {
  std::ostringstream os;
  os << "model: " << model << " @ " << height << 'x' << width << '\n'
     << "convention: " << convention << '\n';
  os << std::fixed << std::setprecision(2) << "params: " << total_params() / 1e6 << " M\n"
     << std::setprecision(3) << "FLOPs:  " << total_flops() / 1e9 << " G\n";
  return os.str();
}

namespace {

void add_conv(CostReport& r, const std::string& name, std::int64_t cin, std::int64_t cout,
              std::int64_t k, std::int64_t groups, bool bias, std::int64_t out_hw) {
  const std::int64_t weights = k * k * cin * cout / groups;
  r.rows.push_back({name, weights + (bias ? cout : 0), weights * out_hw});
}

void add_norm(CostReport& r, const std::string& name, std::int64_t channels) {
  r.rows.push_back({name, 2 * channels, 0});
}

}  // namespace

CostReport cost_ledger(const ModelConfig& config, std::int64_t height, std::int64_t width) {
  config.validate();
  config.check_resolution(height, width);
  CostReport r;
  r.model = config.name;
  r.height = height;
  r.width = width;

  const std::int64_t c0 = config.embed_dim;
  const std::int64_t m = config.window;
  std::int64_t gh = (height + 1) / 2, gw = (width + 1) / 2;  // 3x3 stride 2 pad 1
  add_conv(r, "embed.conv1", config.in_chans, c0 / 2, 3, 1, false, gh * gw);
  add_norm(r, "embed.norm1", c0 / 2);
  gh = (gh + 1) / 2;
  gw = (gw + 1) / 2;
  add_conv(r, "embed.conv2", c0 / 2, c0, 3, 1, false, gh * gw);
  add_norm(r, "embed.norm2", c0);

  for (std::size_t s = 0; s < config.stages(); ++s) {
    const std::int64_t c = config.stage_channels(s);
    const std::string stage = "stages." + std::to_string(s);
    if (s > 0) {
      gh /= 2;
      gw /= 2;
      add_conv(r, stage + ".merge", c / 2, c, 2, 1, true, gh * gw);
    }
    const std::int64_t hw = gh * gw;
    const std::int64_t hidden = c * config.mlp_ratio;
    for (std::int64_t i = 0; i < config.depths[s]; ++i) {
      const std::string blk = stage + ".blocks." + std::to_string(i);
      add_norm(r, blk + ".norm1", c);
      const std::int64_t proj_bias = config.attn_bias ? c : 0;
      r.rows.push_back({blk + ".attn.qkv", 3 * (c * c + proj_bias), 3 * hw * c * c});
      std::int64_t core_params = 0;
      if (config.rel_pos_bias) core_params = (2 * m - 1) * (2 * m - 1) * (c / config.head_dim);
      r.rows.push_back({blk + ".attn.core", core_params, window_attention_core_flops(hw, c, m)});
      r.rows.push_back({blk + ".attn.proj", c * c + proj_bias, hw * c * c});
      if (config.nwc == NwcPosition::A || config.nwc == NwcPosition::B) {
        add_conv(r, blk + ".nwc", c, c, m, c, true, hw);
      }
      add_norm(r, blk + ".norm2", c);
      add_conv(r, blk + ".mlp.fc1", c, hidden, 1, 1, true, hw);
      if (config.nwc == NwcPosition::C) add_conv(r, blk + ".mlp.nwc", hidden, hidden, m, hidden, true, hw);
      add_conv(r, blk + ".mlp.fc2", hidden, c, 1, 1, true, hw);
    }
  }
  const std::int64_t last = config.stage_channels(config.stages() - 1);
  add_norm(r, "head.norm", last);
  r.rows.push_back({"head.fc", last * config.num_classes + config.num_classes, last * config.num_classes});
  return r;
}

CostReport count_params(const ModelConfig& config) {
  return cost_ledger(config, config.img_size, config.img_size);
}

CostReport count_flops(const ModelConfig& config, std::int64_t height, std::int64_t width) {
  return cost_ledger(config, height, width);
}

}  // namespace shuffle_former
