#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "shuffle_former/model.hpp"

namespace shuffle_former {

// One residual layer of a probe stack.
//   wmsa:  x + (Shuffle-)WMSA(BN(x))
//   nwc:   x + depthwise(x)
//   mlp:   x + MLP(BN(x))
//   block: full block (attention, NWC at `nwc`, MLP)
enum class ProbeLayerKind { wmsa, nwc, mlp, block };

struct ProbeLayer {
  ProbeLayerKind kind = ProbeLayerKind::wmsa;
  ShuffleMode shuffle = ShuffleMode::none;
  NwcPosition nwc = NwcPosition::none;  // block only
};

// A stack of layers on an H x W grid with window size M. Even windows pad
// the NWC kernel asymmetrically (offsets [-(M-1)/2, M/2]).
struct StackSpec {
  std::int64_t height = 8;
  std::int64_t width = 8;
  std::int64_t window = 2;
  std::int64_t channels = 4;
  std::int64_t head_dim = 2;
  std::uint64_t shuffle_seed = 0;  // random-mode permutations
  std::vector<ProbeLayer> layers;

  // Comma-separated layer tokens:
  //   wmsa | swmsa[:long|short|random] | nwc | mlp | block[:<shuffle>[:<A|B|C|none>]]
  static StackSpec parse(const std::string& layers, std::int64_t height, std::int64_t width,
                         std::int64_t window);
  std::string describe() const;
  void validate() const;

  BlockConfig block_config(std::size_t layer) const;
  WindowShuffle shuffle_for(std::size_t layer) const;
};

struct ReachabilitySet {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::int64_t probe_h = 0;
  std::int64_t probe_w = 0;
  std::vector<char> member;  // row-major H x W
  std::string method;        // "fd" or "symbolic"
  double threshold = 0.0;
  double epsilon = 0.0;
  std::vector<std::uint64_t> seeds;

  bool contains(std::int64_t h, std::int64_t w) const {
    return member[static_cast<std::size_t>(h * width + w)] != 0;
  }
  std::int64_t size() const;
  std::vector<std::pair<std::int64_t, std::int64_t>> members() const;
  std::vector<std::int64_t> rows() const;  // distinct member rows, ascending
  std::vector<std::int64_t> cols() const;
  bool full() const { return size() == height * width; }
  bool same_members(const ReachabilitySet& other) const { return member == other.member; }
  bool subset_of(const ReachabilitySet& other) const;
  // Member rows (and columns) that do not form one contiguous interval.
  bool strided() const;
  std::string to_json() const;
};

// Exact relation composition: each layer maps an output position set to the
// input positions it reads (window classes after shuffle, NWC offset box,
// identity for pointwise parts and residuals).
ReachabilitySet symbolic_reachability(const StackSpec& spec, std::int64_t probe_h, std::int64_t probe_w);

// Float64 instance of a stack with every weight drawn from N(0, 0.5^2) and
// batch norms in eval mode with randomized statistics.
class ProbeStack {
 public:
  ProbeStack(StackSpec spec, std::uint64_t weight_seed);

  Tensor<double> forward(const Tensor<double>& x);
  const StackSpec& spec() const { return spec_; }
  // Zeroes every parameter (used to exercise degenerate-weight rejection).
  void zero_weights();
  // Name of the first non-bias parameter that is entirely zero, or empty.
  std::string degenerate_parameter() const;

 private:
  struct Layer {
    ProbeLayerKind kind;
    BatchNormState<double> norm;
    WmsaParams<double> attn;
    NwcParams<double> nwc;
    MlpParams<double> mlp;
    BlockParams<double> block;
    WindowShuffle shuffle;
  };
  ParameterList<double> state() const;

  StackSpec spec_;
  std::vector<Layer> layers_;
};

struct ProbeOptions {
  double epsilon = 1e-3;
  // Influence when max_c |out'(c) - out(c)| > threshold * max(1, max_c |out(c)|).
  double threshold = 1e-9;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

// Finite-difference reachability: perturbs each input position (all
// channels) by epsilon and records whether the probe output moves. The
// result is the union over one randomized model per seed.
ReachabilitySet reachability_probe(const StackSpec& spec, std::int64_t probe_h, std::int64_t probe_w,
                                   const ProbeOptions& options = {});

// Same, over caller-built models (all must share one spec).
ReachabilitySet reachability_probe(std::vector<ProbeStack>& models, std::int64_t probe_h,
                                   std::int64_t probe_w, const ProbeOptions& options = {});

}  // namespace shuffle_former
