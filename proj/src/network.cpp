#include "tulip/network.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include "tulip/error.hpp"
#include "tulip/kv_text.hpp"
#include "tulip/parallel.hpp"

namespace tulip {

using kv::format_double;
using kv::parse_bool;
using kv::parse_double;
using kv::parse_int;
using kv::trim;

// ---------------------------------------------------------------------------
// Configuration

void NetworkConfig::validate() const {
  require(input_height >= 1 && input_width >= 1, Errc::kInvalidArgument,
          "input dimensions must be positive");
  require(patch_h >= 1 && patch_w >= 1, Errc::kInvalidArgument, "patch size must be positive");
  require(input_height % patch_h == 0 && input_width % patch_w == 0, Errc::kIndivisibleShape,
          "input not divisible by patch size");
  require(embed_dim >= 1 && embed_dim % 2 == 0, Errc::kInvalidArgument,
          "embed_dim must be positive and even");
  require(num_stages >= 1 && num_stages <= 8, Errc::kInvalidArgument, "num_stages out of range");
  require(blocks_per_stage >= 1 && bottleneck_blocks >= 1, Errc::kInvalidArgument,
          "block counts must be positive");
  require(window_h >= 1 && window_w >= 1, Errc::kInvalidArgument, "window must be positive");
  require(!rectangular || window_w > window_h, Errc::kInvalidArgument,
          "rectangular windows need window_w > window_h");
  require(static_cast<int>(heads_per_stage.size()) == num_stages, Errc::kInvalidArgument,
          "heads_per_stage needs one entry per stage");
  for (int s = 0; s < num_stages; ++s) {
    const int h = heads_per_stage[s];
    require(h >= 1 && channels(s) % h == 0, Errc::kIndivisibleChannels,
            "stage " + std::to_string(s) + " channels not divisible by head count");
  }
  require(channels(num_stages) % heads_per_stage.back() == 0, Errc::kIndivisibleChannels,
          "bottleneck channels not divisible by head count");
  require(mlp_ratio > 0, Errc::kInvalidArgument, "mlp_ratio must be positive");
  require(dropout_p >= 0 && dropout_p < 1, Errc::kInvalidArgument, "dropout_p must be in [0,1)");
  require(beta >= 1, Errc::kInvalidArgument, "beta must be >= 1");
  require(ln_eps >= 0, Errc::kInvalidArgument, "ln_eps must be non-negative");
  stage_geometry(*this);
}

std::string NetworkConfig::to_text() const {
  std::ostringstream out;
  out << "input_height=" << input_height << "\n";
  out << "input_width=" << input_width << "\n";
  out << "patch_h=" << patch_h << "\n";
  out << "patch_w=" << patch_w << "\n";
  out << "embed_dim=" << embed_dim << "\n";
  out << "num_stages=" << num_stages << "\n";
  out << "blocks_per_stage=" << blocks_per_stage << "\n";
  out << "bottleneck_blocks=" << bottleneck_blocks << "\n";
  out << "window_h=" << window_h << "\n";
  out << "window_w=" << window_w << "\n";
  out << "rectangular=" << (rectangular ? 1 : 0) << "\n";
  out << "heads_per_stage=";
  for (std::size_t i = 0; i < heads_per_stage.size(); ++i)
    out << (i ? "," : "") << heads_per_stage[i];
  out << "\n";
  out << "mlp_ratio=" << format_double(mlp_ratio) << "\n";
  out << "dropout_p=" << format_double(dropout_p) << "\n";
  out << "beta=" << beta << "\n";
  out << "range_adaptations=" << (range_adaptations ? 1 : 0) << "\n";
  out << "ln_eps=" << format_double(ln_eps) << "\n";
  out << "mc_inference=" << (mc_inference ? 1 : 0) << "\n";
  return out.str();
}

NetworkConfig NetworkConfig::from_text(std::string_view text) {
  NetworkConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    require(eq != std::string::npos, Errc::kInvalidArgument, "expected key=value: " + t);
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string v = trim(std::string_view(t).substr(eq + 1));
    if (key == "input_height") cfg.input_height = parse_int(key, v);
    else if (key == "input_width") cfg.input_width = parse_int(key, v);
    else if (key == "patch_h") cfg.patch_h = parse_int(key, v);
    else if (key == "patch_w") cfg.patch_w = parse_int(key, v);
    else if (key == "embed_dim") cfg.embed_dim = parse_int(key, v);
    else if (key == "num_stages") cfg.num_stages = parse_int(key, v);
    else if (key == "blocks_per_stage") cfg.blocks_per_stage = parse_int(key, v);
    else if (key == "bottleneck_blocks") cfg.bottleneck_blocks = parse_int(key, v);
    else if (key == "window_h") cfg.window_h = parse_int(key, v);
    else if (key == "window_w") cfg.window_w = parse_int(key, v);
    else if (key == "rectangular") cfg.rectangular = parse_bool(key, v);
    else if (key == "heads_per_stage") {
      cfg.heads_per_stage.clear();
      std::istringstream list(v);
      std::string item;
      while (std::getline(list, item, ',')) cfg.heads_per_stage.push_back(parse_int(key, trim(item)));
    } else if (key == "mlp_ratio") cfg.mlp_ratio = parse_double(key, v);
    else if (key == "dropout_p") cfg.dropout_p = parse_double(key, v);
    else if (key == "beta") cfg.beta = parse_int(key, v);
    else if (key == "range_adaptations") cfg.range_adaptations = parse_bool(key, v);
    else if (key == "ln_eps") cfg.ln_eps = parse_double(key, v);
    else if (key == "mc_inference") cfg.mc_inference = parse_bool(key, v);
    else fail(Errc::kInvalidArgument, "unknown network config key: " + key);
  }
  return cfg;
}

NetworkConfig NetworkConfig::tulip() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::tulip_large() {
  NetworkConfig cfg;
  cfg.num_stages = 4;
  cfg.heads_per_stage = {2, 4, 8, 8};
  return cfg;
}

std::vector<StageGeometry> stage_geometry(const NetworkConfig& cfg) {
  std::vector<StageGeometry> out;
  int h = cfg.input_height / cfg.patch_h;
  int w = cfg.input_width / cfg.patch_w;
  for (int s = 0; s <= cfg.num_stages; ++s) {
    StageGeometry g;
    g.grid_h = h;
    g.grid_w = w;
    g.channels = cfg.channels(s);
    g.heads = s < cfg.num_stages ? cfg.heads_per_stage[s] : cfg.heads_per_stage.back();
    g.window_h = std::min(cfg.window_h, h);
    g.window_w = std::min(cfg.window_w, w);
    require(h % g.window_h == 0 && w % g.window_w == 0, Errc::kIndivisibleGrid,
            "stage " + std::to_string(s) + " grid " + std::to_string(h) + "x" +
                std::to_string(w) + " not divisible by window " + std::to_string(g.window_h) +
                "x" + std::to_string(g.window_w));
    g.merge_fh = h == 1 ? 1 : 2;
    if (s < cfg.num_stages) {
      require(w % 2 == 0 && (h == 1 || h % 2 == 0), Errc::kOddGrid,
              "stage " + std::to_string(s) + " grid " + std::to_string(h) + "x" +
                  std::to_string(w) + " cannot be merged");
      h /= g.merge_fh;
      w /= 2;
    }
    out.push_back(g);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Window bookkeeping

WindowPlan make_window_plan(int grid_h, int grid_w, int window_h, int window_w, bool shift,
                            bool mask_horizontal_seam, int batch) {
  require(batch >= 1, Errc::kInvalidArgument, "window plan batch must be positive");
  require(window_h >= 1 && window_w >= 1 && grid_h % window_h == 0 && grid_w % window_w == 0,
          Errc::kIndivisibleGrid,
          "grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
              " not divisible by window " + std::to_string(window_h) + "x" +
              std::to_string(window_w));
  WindowPlan plan;
  plan.grid_h = grid_h;
  plan.grid_w = grid_w;
  plan.window_h = window_h;
  plan.window_w = window_w;
  plan.batch = batch;
  plan.shift_h = shift && window_h < grid_h ? window_h / 2 : 0;
  plan.shift_w = shift && window_w < grid_w ? window_w / 2 : 0;
  const bool mask_w = mask_horizontal_seam && plan.shift_w > 0;
  plan.masked = plan.shift_h > 0 || mask_w;

  const int n = grid_h * grid_w;
  const int t_count = plan.tokens_per_window();
  const int wins_w = grid_w / window_w;
  const int wins = (grid_h / window_h) * wins_w;
  std::vector<std::int64_t> partition(static_cast<std::size_t>(n) * batch);
  std::vector<std::int64_t> restore(partition.size());
  std::vector<int> label(n, 0);
  for (int p = 0; p < n; ++p) {
    const int win = p / t_count;
    const int t = p % t_count;
    const int si = (win / wins_w) * window_h + t / window_w;
    const int sj = (win % wins_w) * window_w + t % window_w;
    const int oi = (si + plan.shift_h) % grid_h;
    const int oj = (sj + plan.shift_w) % grid_w;
    partition[p] = oi * grid_w + oj;
    label[p] = (plan.shift_h > 0 && si >= grid_h - plan.shift_h ? 1 : 0) +
               (mask_w && sj >= grid_w - plan.shift_w ? 2 : 0);
  }
  // Samples are stacked row-wise; each gets its own copy of the layout.
  for (int b = 1; b < batch; ++b)
    for (int p = 0; p < n; ++p)
      partition[static_cast<std::size_t>(b) * n + p] = partition[p] + std::int64_t{b} * n;
  for (std::size_t p = 0; p < partition.size(); ++p)
    restore[static_cast<std::size_t>(partition[p])] = static_cast<std::int64_t>(p);
  if (plan.masked) {
    const std::size_t per = static_cast<std::size_t>(wins) * t_count * t_count;
    plan.blocked.assign(per * batch, 0);
    for (int win = 0; win < wins; ++win)
      for (int i = 0; i < t_count; ++i)
        for (int j = 0; j < t_count; ++j)
          plan.blocked[(static_cast<std::size_t>(win) * t_count + i) * t_count + j] =
              label[win * t_count + i] != label[win * t_count + j];
    for (int b = 1; b < batch; ++b)
      std::copy_n(plan.blocked.begin(), per, plan.blocked.begin() + per * b);
  }
  plan.partition = std::make_shared<const std::vector<std::int64_t>>(std::move(partition));
  plan.restore = std::make_shared<const std::vector<std::int64_t>>(std::move(restore));
  return plan;
}

ops::RowIndex relative_position_index(int window_h, int window_w) {
  const int t_count = window_h * window_w;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(t_count) * t_count);
  for (int a = 0; a < t_count; ++a) {
    for (int b = 0; b < t_count; ++b) {
      const int di = a / window_w - b / window_w + window_h - 1;
      const int dj = a % window_w - b % window_w + window_w - 1;
      idx[static_cast<std::size_t>(a) * t_count + b] = di * (2 * window_w - 1) + dj;
    }
  }
  return std::make_shared<const std::vector<std::int64_t>>(std::move(idx));
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Var<T> patch_embed(Var<T> img, int patch_h, int patch_w, Var<T> weight, Var<T> bias) {
  require(img.value().rank() == 2, Errc::kShapeMismatch, "patch_embed expects [H, W]");
  const auto h = img.shape()[0];
  const auto w = img.shape()[1];
  require(h % patch_h == 0 && w % patch_w == 0, Errc::kIndivisibleShape,
          "image " + to_string(img.shape()) + " not divisible by patch " +
              std::to_string(patch_h) + "x" + std::to_string(patch_w));
  const std::int64_t hg = h / patch_h;
  const std::int64_t wg = w / patch_w;
  auto x = ops::reshape(img, {hg, patch_h, wg, patch_w});
  x = ops::permute(x, {0, 2, 1, 3});
  x = ops::reshape(x, {hg * wg, std::int64_t{patch_h} * patch_w});
  return ops::linear(x, weight, bias);
}

namespace {

// Per window-and-head scratch: q, k, v as [T, d] plus transposed k and v
// as [d, T], so every inner loop below runs over contiguous memory.
template <typename T>
struct HeadScratch {
  std::vector<T> q, k, v, kt, vt;
  HeadScratch(std::int64_t tw, std::int64_t d)
      : q(tw * d), k(tw * d), v(tw * d), kt(tw * d), vt(tw * d) {}

  void load(const T* qkv, const std::int64_t* idx, std::int64_t tw, std::int64_t d,
            std::int64_t c, std::int64_t head) {
    const std::int64_t c3 = 3 * c;
    for (std::int64_t t = 0; t < tw; ++t) {
      const T* src = qkv + idx[t] * c3 + head * d;
      for (std::int64_t e = 0; e < d; ++e) {
        q[t * d + e] = src[e];
        k[t * d + e] = src[c + e];
        v[t * d + e] = src[2 * c + e];
        kt[e * tw + t] = src[c + e];
        vt[e * tw + t] = src[2 * c + e];
      }
    }
  }
};

// Softmax attention inside every window and head, reading q/k/v straight
// from the grid-ordered projection qkv [N, 3C] and writing the
// head-concatenated result [N, C] back in grid order.
template <typename T>
Var<T> windowed_mix(Var<T> qkv, Var<T> rel_bias, const WindowPlan& plan, int heads) {
  Tape<T>& tape = *qkv.tape;
  const std::int64_t n = qkv.shape()[0];
  const std::int64_t c = qkv.shape()[1] / 3;
  const std::int64_t d = c / heads;
  const std::int64_t tw = plan.tokens_per_window();
  const std::int64_t nw = plan.windows();
  const auto rel = relative_position_index(plan.window_h, plan.window_w);
  require(rel_bias.value().rank() == 2 &&
              rel_bias.shape()[0] == std::int64_t{2 * plan.window_h - 1} * (2 * plan.window_w - 1) &&
              rel_bias.shape()[1] == heads,
          Errc::kShapeMismatch, "relative bias table " + to_string(rel_bias.shape()) +
                                    " does not match the window");
  const T scale = T(1) / std::sqrt(T(d));
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(nw * heads * tw * tw));
  Tensor<T> out({n, c});
  const T* pb = rel_bias.value().ptr();
  const std::int64_t* part = plan.partition->data();
  const std::int64_t* ri = rel->data();
  HeadScratch<T> hs(tw, d);
  std::vector<T> o(tw * d);
  for (std::int64_t w = 0; w < nw; ++w) {
    const std::int64_t* idx = part + w * tw;
    const std::uint8_t* blk = plan.masked ? plan.blocked.data() + w * tw * tw : nullptr;
    for (std::int64_t h = 0; h < heads; ++h) {
      hs.load(qkv.value().ptr(), idx, tw, d, c, h);
      T* P = probs->data() + (w * heads + h) * tw * tw;
      for (std::int64_t i = 0; i < tw; ++i) {
        T* __restrict row = P + i * tw;
        for (std::int64_t j = 0; j < tw; ++j) row[j] = pb[ri[i * tw + j] * heads + h];
        for (std::int64_t e = 0; e < d; ++e) {
          const T qe = hs.q[i * d + e] * scale;
          const T* __restrict kte = hs.kt.data() + e * tw;
          for (std::int64_t j = 0; j < tw; ++j) row[j] += qe * kte[j];
        }
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < tw; ++j) {
          if (blk == nullptr || blk[i * tw + j] == 0) mx = std::max(mx, row[j]);
        }
        T total = 0;
        for (std::int64_t j = 0; j < tw; ++j) {
          const bool off = blk != nullptr && blk[i * tw + j] != 0;
          row[j] = off ? T(0) : ops::fast_exp(row[j] - mx);
          total += row[j];
        }
        const T inv = T(1) / total;
        for (std::int64_t j = 0; j < tw; ++j) row[j] *= inv;
        T* __restrict oi = o.data() + i * d;
        std::fill(oi, oi + d, T(0));
        for (std::int64_t j = 0; j < tw; ++j) {
          const T pij = row[j];
          const T* __restrict vj = hs.v.data() + j * d;
          for (std::int64_t e = 0; e < d; ++e) oi[e] += pij * vj[e];
        }
      }
      for (std::int64_t i = 0; i < tw; ++i)
        std::copy_n(o.data() + i * d, d, out.ptr() + idx[i] * c + h * d);
    }
  }
  const int iq = qkv.id;
  const int ib = rel_bias.id;
  const ops::RowIndex partition = plan.partition;
  return tape.record(std::move(out), {iq, ib},
                     [=](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
    T* gq = t.requires_grad(iq) ? t.grad_slot(iq).ptr() : nullptr;
    T* gb = t.requires_grad(ib) ? t.grad_slot(ib).ptr() : nullptr;
    const std::int64_t* part = partition->data();
    const std::int64_t* ri = rel->data();
    const std::int64_t c3 = 3 * c;
    HeadScratch<T> hs(tw, d);
    std::vector<T> go(tw * d), dq(tw * d), dk(tw * d), dv(tw * d), dl(tw * tw);
    for (std::int64_t w = 0; w < nw; ++w) {
      const std::int64_t* idx = part + w * tw;
      for (std::int64_t h = 0; h < heads; ++h) {
        hs.load(t.value(iq).ptr(), idx, tw, d, c, h);
        const T* P = probs->data() + (w * heads + h) * tw * tw;
        for (std::int64_t i = 0; i < tw; ++i)
          std::copy_n(g.ptr() + idx[i] * c + h * d, d, go.data() + i * d);
        std::fill(dq.begin(), dq.end(), T(0));
        std::fill(dk.begin(), dk.end(), T(0));
        std::fill(dv.begin(), dv.end(), T(0));
        for (std::int64_t i = 0; i < tw; ++i) {
          const T* __restrict row = P + i * tw;
          const T* __restrict gi = go.data() + i * d;
          T* __restrict dli = dl.data() + i * tw;
          // dP = dO V^T, row i
          std::fill(dli, dli + tw, T(0));
          for (std::int64_t e = 0; e < d; ++e) {
            const T ge = gi[e];
            const T* __restrict vte = hs.vt.data() + e * tw;
            for (std::int64_t j = 0; j < tw; ++j) dli[j] += ge * vte[j];
          }
          T weighted = 0;
          for (std::int64_t j = 0; j < tw; ++j) weighted += row[j] * dli[j];
          for (std::int64_t j = 0; j < tw; ++j) dli[j] = row[j] * (dli[j] - weighted);
          // dV += P^T dO
          for (std::int64_t j = 0; j < tw; ++j) {
            const T pij = row[j];
            T* __restrict dvj = dv.data() + j * d;
            for (std::int64_t e = 0; e < d; ++e) dvj[e] += pij * gi[e];
          }
        }
        if (gb != nullptr) {
          for (std::int64_t k = 0; k < tw * tw; ++k) gb[ri[k] * heads + h] += dl[k];
        }
        if (gq == nullptr) continue;
        for (std::int64_t i = 0; i < tw; ++i) {
          const T* __restrict dli = dl.data() + i * tw;
          const T* __restrict qi = hs.q.data() + i * d;
          T* __restrict dqi = dq.data() + i * d;
          for (std::int64_t j = 0; j < tw; ++j) {
            const T s = dli[j] * scale;
            const T* __restrict kj = hs.k.data() + j * d;
            T* __restrict dkj = dk.data() + j * d;
            for (std::int64_t e = 0; e < d; ++e) {
              dqi[e] += s * kj[e];
              dkj[e] += s * qi[e];
            }
          }
        }
        for (std::int64_t i = 0; i < tw; ++i) {
          T* dst = gq + idx[i] * c3 + h * d;
          for (std::int64_t e = 0; e < d; ++e) {
            dst[e] += dq[i * d + e];
            dst[c + e] += dk[i * d + e];
            dst[2 * c + e] += dv[i * d + e];
          }
        }
      }
    }
  });
}

}  // namespace

template <typename T>
Var<T> window_attention(Var<T> x, const WindowPlan& plan, int heads,
                        const AttentionWeights<T>& w, const DropoutContext& drop,
                        std::string_view site) {
  const std::int64_t n = std::int64_t{plan.batch} * plan.grid_h * plan.grid_w;
  require(x.value().rank() == 2 && x.shape()[0] == n, Errc::kShapeMismatch,
          "tokens " + to_string(x.shape()) + " do not match the window plan grid");
  const std::int64_t c = x.shape()[1];
  require(heads >= 1 && c % heads == 0, Errc::kIndivisibleChannels,
          "channels not divisible by head count");
  // The projections act per token, so they run in grid order; only the
  // mixing step needs the window grouping.
  auto qkv = ops::linear(x, w.qkv_w, w.qkv_b);
  auto out = ops::linear(windowed_mix(qkv, w.rel_bias, plan, heads), w.proj_w, w.proj_b);
  const std::string drop_site = std::string(site) + ".attn.drop";
  return ops::dropout(out, drop.p, drop.rng(drop_site), drop.active);
}

template <typename T>
Var<T> swin_block(Var<T> x, const WindowPlan& plan, int heads, const BlockWeights<T>& w, T eps,
                  const DropoutContext& drop, std::string_view site) {
  auto h = ops::layer_norm(x, w.norm1_g, w.norm1_b, eps);
  x = ops::add(x, window_attention(h, plan, heads, w.attn, drop, site));
  h = ops::layer_norm(x, w.norm2_g, w.norm2_b, eps);
  h = ops::gelu(ops::linear(h, w.fc1_w, w.fc1_b));
  h = ops::dropout(h, drop.p, drop.rng(std::string(site) + ".mlp.drop1"), drop.active);
  h = ops::linear(h, w.fc2_w, w.fc2_b);
  h = ops::dropout(h, drop.p, drop.rng(std::string(site) + ".mlp.drop2"), drop.active);
  return ops::add(x, h);
}

template <typename T>
Var<T> space_to_channels(Var<T> x, int h, int w, int fh, int fw) {
  require(x.value().rank() == 2 && x.shape()[0] == std::int64_t{h} * w, Errc::kShapeMismatch,
          "tokens do not match grid");
  require(h % fh == 0 && w % fw == 0, Errc::kOddGrid,
          "grid " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
              std::to_string(fh) + "x" + std::to_string(fw));
  const std::int64_t c = x.shape()[1];
  auto y = ops::reshape(x, {h / fh, fh, w / fw, fw, c});
  y = ops::permute(y, {0, 2, 1, 3, 4});
  return ops::reshape(y, {std::int64_t{h / fh} * (w / fw), std::int64_t{fh} * fw * c});
}

template <typename T>
Var<T> channels_to_space(Var<T> x, int h, int w, int fh, int fw) {
  require(x.value().rank() == 2 && x.shape()[0] == std::int64_t{h} * w, Errc::kShapeMismatch,
          "tokens do not match grid");
  const std::int64_t c = x.shape()[1];
  require(c % (fh * fw) == 0, Errc::kIndivisibleChannels,
          "channels " + std::to_string(c) + " not divisible by " + std::to_string(fh * fw));
  const std::int64_t k = c / (fh * fw);
  auto y = ops::reshape(x, {h, w, fh, fw, k});
  y = ops::permute(y, {0, 2, 1, 3, 4});
  return ops::reshape(y, {std::int64_t{h} * fh * w * fw, k});
}

template <typename T>
Var<T> patch_merge(Var<T> x, int h, int w, Var<T> norm_g, Var<T> norm_b, Var<T> reduction,
                   T eps, int batch) {
  require(w % 2 == 0 && (h == 1 || h % 2 == 0), Errc::kOddGrid,
          "cannot merge grid " + std::to_string(h) + "x" + std::to_string(w));
  const int fh = h == 1 ? 1 : 2;
  auto y = space_to_channels(x, h * batch, w, fh, 2);
  y = ops::layer_norm(y, norm_g, norm_b, eps);
  return ops::linear(y, reduction, Var<T>{});
}

template <typename T>
Var<T> patch_unmerge(Var<T> x, int h, int w, int fh, Var<T> expand) {
  require(x.value().rank() == 2 && x.shape()[1] % 2 == 0, Errc::kIndivisibleChannels,
          "unmerge needs an even channel count");
  return channels_to_space(ops::linear(x, expand, Var<T>{}), h, w, fh, 2);
}

template <typename T>
Var<T> token_duplicate(Var<T> x, int h, int w, int fh, Var<T> project) {
  require(x.value().rank() == 2 && x.shape()[0] == std::int64_t{h} * w, Errc::kShapeMismatch,
          "tokens do not match grid");
  const int oh = h * fh;
  const int ow = w * 2;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(oh) * ow);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) idx[static_cast<std::size_t>(i) * ow + j] = (i / fh) * w + j / 2;
  auto y = ops::gather_rows(x, std::make_shared<const std::vector<std::int64_t>>(std::move(idx)));
  return ops::linear(y, project, Var<T>{});
}

template <typename T>
Var<T> skip_fuse(Var<T> decoder, Var<T> encoder, Var<T> weight, Var<T> bias) {
  require(decoder.shape() == encoder.shape(), Errc::kShapeMismatch,
          "skip connection shapes differ: " + to_string(decoder.shape()) + " vs " +
              to_string(encoder.shape()));
  return ops::linear(ops::concat<T>({decoder, encoder}, 1), weight, bias);
}

template <typename T>
Var<T> projection_head(Var<T> x, int hg, int wg, int rv, int rh, Var<T> expand_w,
                       Var<T> expand_b, Var<T> out_w, Var<T> out_b) {
  require(x.value().rank() == 2 && x.shape()[0] == std::int64_t{hg} * wg, Errc::kShapeMismatch,
          "head tokens do not match grid");
  require(expand_w.value().rank() == 2 && expand_w.shape()[1] == std::int64_t{rv} * rh,
          Errc::kShapeMismatch, "head expansion must produce rv*rh channels");
  auto e = ops::leaky_relu(ops::linear(x, expand_w, expand_b), T(0.01));
  e = ops::permute(ops::reshape(e, {hg, wg, rv, rh}), {0, 2, 1, 3});
  e = ops::reshape(e, {std::int64_t{hg} * rv, std::int64_t{wg} * rh});
  return ops::add(ops::mul(e, out_w), out_b);
}

template <typename T>
Var<T> patch_expand_head(Var<T> x, int hg, int wg, int rv, int rh, Var<T> expand_w,
                         Var<T> norm_g, Var<T> norm_b, Var<T> out_w, Var<T> out_b, T eps) {
  require(x.value().rank() == 2 && x.shape()[0] == std::int64_t{hg} * wg, Errc::kShapeMismatch,
          "head tokens do not match grid");
  const std::int64_t c = x.shape()[1];
  auto e = ops::linear(x, expand_w, Var<T>{});
  e = ops::permute(ops::reshape(e, {hg, wg, rv, rh, c}), {0, 2, 1, 3, 4});
  e = ops::reshape(e, {std::int64_t{hg} * rv * wg * rh, c});
  e = ops::layer_norm(e, norm_g, norm_b, eps);
  e = ops::linear(e, out_w, out_b);
  return ops::reshape(e, {std::int64_t{hg} * rv, std::int64_t{wg} * rh});
}

// ---------------------------------------------------------------------------
// Model

namespace {

template <typename T>
void add_block_params(ParameterSet<T>& ps, const std::string& p, std::int64_t c, int heads,
                      int wh, int ww, std::int64_t hidden) {
  ps.add(p + ".norm1.weight", Tensor<T>({c}));
  ps.add(p + ".norm1.bias", Tensor<T>({c}));
  ps.add(p + ".attn.qkv.weight", Tensor<T>({c, 3 * c}));
  ps.add(p + ".attn.qkv.bias", Tensor<T>({3 * c}));
  ps.add(p + ".attn.proj.weight", Tensor<T>({c, c}));
  ps.add(p + ".attn.proj.bias", Tensor<T>({c}));
  ps.add(p + ".attn.rel_bias", Tensor<T>({std::int64_t{2 * wh - 1} * (2 * ww - 1), heads}));
  ps.add(p + ".norm2.weight", Tensor<T>({c}));
  ps.add(p + ".norm2.bias", Tensor<T>({c}));
  ps.add(p + ".mlp.fc1.weight", Tensor<T>({c, hidden}));
  ps.add(p + ".mlp.fc1.bias", Tensor<T>({hidden}));
  ps.add(p + ".mlp.fc2.weight", Tensor<T>({hidden, c}));
  ps.add(p + ".mlp.fc2.bias", Tensor<T>({c}));
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace

template <typename T>
TulipModel<T>::TulipModel(NetworkConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  geometry_ = stage_geometry(cfg_);
  const int stages = cfg_.num_stages;
  const std::int64_t c0 = cfg_.embed_dim;
  auto hidden = [&](std::int64_t c) {
    return std::max<std::int64_t>(1, std::llround(double(c) * cfg_.mlp_ratio));
  };
  auto& ps = params_;
  ps.add("embed.weight", Tensor<T>({std::int64_t{cfg_.patch_h} * cfg_.patch_w, c0}));
  ps.add("embed.bias", Tensor<T>({c0}));
  ps.add("embed.norm.weight", Tensor<T>({c0}));
  ps.add("embed.norm.bias", Tensor<T>({c0}));
  for (int s = 0; s < stages; ++s) {
    const auto& g = geometry_[s];
    const std::string p = "enc.stage" + std::to_string(s);
    for (int b = 0; b < cfg_.blocks_per_stage; ++b)
      add_block_params(ps, p + ".block" + std::to_string(b), g.channels, g.heads, g.window_h,
                       g.window_w, hidden(g.channels));
    const std::int64_t cat = std::int64_t{g.merge_fh} * 2 * g.channels;
    ps.add(p + ".merge.norm.weight", Tensor<T>({cat}));
    ps.add(p + ".merge.norm.bias", Tensor<T>({cat}));
    ps.add(p + ".merge.reduction.weight", Tensor<T>({cat, 2 * std::int64_t{g.channels}}));
  }
  const auto& bn = geometry_[stages];
  for (int b = 0; b < cfg_.bottleneck_blocks; ++b)
    add_block_params(ps, "bottleneck.block" + std::to_string(b), bn.channels, bn.heads,
                     bn.window_h, bn.window_w, hidden(bn.channels));
  for (int s = 0; s < stages; ++s) {
    const auto& g = geometry_[s];
    const std::string p = "dec.stage" + std::to_string(s);
    const std::int64_t deep = geometry_[s + 1].channels;
    if (cfg_.range_adaptations) {
      ps.add(p + ".unmerge.expand.weight",
             Tensor<T>({deep, std::int64_t{g.merge_fh} * 2 * (deep / 2)}));
    } else {
      ps.add(p + ".upsample.project.weight", Tensor<T>({deep, deep / 2}));
    }
    ps.add(p + ".fuse.weight", Tensor<T>({2 * std::int64_t{g.channels}, g.channels}));
    ps.add(p + ".fuse.bias", Tensor<T>({g.channels}));
    for (int b = 0; b < cfg_.blocks_per_stage; ++b)
      add_block_params(ps, p + ".block" + std::to_string(b), g.channels, g.heads, g.window_h,
                       g.window_w, hidden(g.channels));
  }
  ps.add("dec.norm.weight", Tensor<T>({c0}));
  ps.add("dec.norm.bias", Tensor<T>({c0}));
  const std::int64_t rv = std::int64_t{cfg_.beta} * cfg_.patch_h;
  const std::int64_t rh = cfg_.patch_w;
  if (cfg_.range_adaptations) {
    ps.add("head.expand.weight", Tensor<T>({c0, rv * rh}));
    ps.add("head.expand.bias", Tensor<T>({rv * rh}));
    ps.add("head.project.weight", Tensor<T>({1}));
    ps.add("head.project.bias", Tensor<T>({1}));
  } else {
    ps.add("head.expand.weight", Tensor<T>({c0, rv * rh * c0}));
    ps.add("head.norm.weight", Tensor<T>({c0}));
    ps.add("head.norm.bias", Tensor<T>({c0}));
    ps.add("head.project.weight", Tensor<T>({c0, 1}));
    ps.add("head.project.bias", Tensor<T>({1}));
  }
  init_parameters(init_seed);
}

template <typename T>
void TulipModel<T>::init_parameters(std::uint64_t seed) {
  for (auto& p : params_) {
    const std::string& name = p.name;
    p.zero_grad();
    if (ends_with(name, ".bias")) {
      std::fill(p.value.data().begin(), p.value.data().end(), T(0));
    } else if (name.find("norm.weight") != std::string::npos ||
               ends_with(name, "norm1.weight") || ends_with(name, "norm2.weight") ||
               (name == "head.project.weight" && p.value.size() == 1)) {
      std::fill(p.value.data().begin(), p.value.data().end(), T(1));
    } else {
      // Truncated normal, std 0.02, cut at two standard deviations.
      CounterRng rng(seed, rng_purpose::kInit, fnv1a(name));
      for (auto& v : p.value.data()) {
        double z = rng.normal();
        while (std::abs(z) > 2.0) z = rng.normal();
        v = static_cast<T>(0.02 * z);
      }
    }
  }
}

template <typename T>
Var<T> TulipModel<T>::forward(Tape<T>& tape, Var<T> image, const DropoutContext& drop,
                              std::vector<Tensor<T>>* sinks) const {
  require(image.value().rank() == 2 && image.shape()[0] > 0 &&
              image.shape()[0] % cfg_.input_height == 0,
          Errc::kShapeMismatch,
          "input " + to_string(image.shape()) + " does not match model height " +
              std::to_string(cfg_.input_height));
  const int batch = static_cast<int>(image.shape()[0] / cfg_.input_height);
  require(sinks == nullptr || sinks->size() == params_.size(), Errc::kShapeMismatch,
          "gradient sink count does not match parameters");
  std::vector<Var<T>> bound(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i)
    bound[i] = tape.parameter(params_.at(i).value, sinks ? &(*sinks)[i] : nullptr);
  auto P = [&](const std::string& name) { return bound[params_.index_of(name)]; };
  auto block_weights = [&](const std::string& p) {
    BlockWeights<T> w;
    w.norm1_g = P(p + ".norm1.weight");
    w.norm1_b = P(p + ".norm1.bias");
    w.attn.qkv_w = P(p + ".attn.qkv.weight");
    w.attn.qkv_b = P(p + ".attn.qkv.bias");
    w.attn.proj_w = P(p + ".attn.proj.weight");
    w.attn.proj_b = P(p + ".attn.proj.bias");
    w.attn.rel_bias = P(p + ".attn.rel_bias");
    w.norm2_g = P(p + ".norm2.weight");
    w.norm2_b = P(p + ".norm2.bias");
    w.fc1_w = P(p + ".mlp.fc1.weight");
    w.fc1_b = P(p + ".mlp.fc1.bias");
    w.fc2_w = P(p + ".mlp.fc2.weight");
    w.fc2_b = P(p + ".mlp.fc2.bias");
    return w;
  };
  const T eps = static_cast<T>(cfg_.ln_eps);
  const bool mask_w = !cfg_.range_adaptations;
  DropoutContext d = drop;
  d.p = cfg_.dropout_p;
  auto run_blocks = [&](Var<T> x, const std::string& prefix, int count, const StageGeometry& g,
                        int h, int w) {
    const WindowPlan plain =
        make_window_plan(h, w, g.window_h, g.window_w, false, mask_w, batch);
    const WindowPlan shifted =
        make_window_plan(h, w, g.window_h, g.window_w, true, mask_w, batch);
    for (int b = 0; b < count; ++b) {
      const std::string site = prefix + ".block" + std::to_string(b);
      x = swin_block(x, b % 2 ? shifted : plain, g.heads, block_weights(site), eps, d, site);
    }
    return x;
  };

  const int stages = cfg_.num_stages;
  const int wg0 = static_cast<int>(image.shape()[1] / cfg_.patch_w);
  auto x = patch_embed(image, cfg_.patch_h, cfg_.patch_w, P("embed.weight"), P("embed.bias"));
  x = ops::layer_norm(x, P("embed.norm.weight"), P("embed.norm.bias"), eps);

  struct Skip {
    Var<T> x;
    int h, w;
  };
  std::vector<Skip> skips;
  int h = geometry_[0].grid_h;
  int w = wg0;
  for (int s = 0; s < stages; ++s) {
    const auto& g = geometry_[s];
    const std::string p = "enc.stage" + std::to_string(s);
    x = run_blocks(x, p, cfg_.blocks_per_stage, g, h, w);
    skips.push_back({x, h, w});
    x = patch_merge(x, h, w, P(p + ".merge.norm.weight"), P(p + ".merge.norm.bias"),
                    P(p + ".merge.reduction.weight"), eps, batch);
    h /= g.merge_fh;
    w /= 2;
  }
  x = run_blocks(x, "bottleneck", cfg_.bottleneck_blocks, geometry_[stages], h, w);
  for (int s = stages - 1; s >= 0; --s) {
    const auto& g = geometry_[s];
    const std::string p = "dec.stage" + std::to_string(s);
    if (cfg_.range_adaptations) {
      x = patch_unmerge(x, h * batch, w, g.merge_fh, P(p + ".unmerge.expand.weight"));
    } else {
      x = token_duplicate(x, h * batch, w, g.merge_fh, P(p + ".upsample.project.weight"));
    }
    h = skips[s].h;
    w = skips[s].w;
    x = skip_fuse(x, skips[s].x, P(p + ".fuse.weight"), P(p + ".fuse.bias"));
    x = run_blocks(x, p, cfg_.blocks_per_stage, g, h, w);
  }
  x = ops::layer_norm(x, P("dec.norm.weight"), P("dec.norm.bias"), eps);
  const int rv = cfg_.beta * cfg_.patch_h;
  const int rh = cfg_.patch_w;
  if (cfg_.range_adaptations) {
    return projection_head(x, h * batch, w, rv, rh, P("head.expand.weight"), P("head.expand.bias"),
                           P("head.project.weight"), P("head.project.bias"));
  }
  return patch_expand_head(x, h * batch, w, rv, rh, P("head.expand.weight"), P("head.norm.weight"),
                           P("head.norm.bias"), P("head.project.weight"),
                           P("head.project.bias"), eps);
}

namespace {
template <typename T>
Tensor<T> clamp_unit(Tensor<T> t) {
  for (auto& v : t.data()) v = std::clamp(v, T(0), T(1));
  return t;
}
}  // namespace

template <typename T>
Tensor<T> TulipModel<T>::predict(const Tensor<T>& image) const {
  Tape<T> tape(false);
  return clamp_unit(forward(tape, tape.constant(image), DropoutContext{}).value());
}

template <typename T>
Tensor<T> TulipModel<T>::predict_stochastic(const Tensor<T>& image, std::uint64_t seed,
                                            std::uint64_t stream) const {
  Tape<T> tape(false);
  DropoutContext drop;
  drop.active = true;
  drop.seed = seed;
  drop.stream = stream;
  return clamp_unit(forward(tape, tape.constant(image), drop).value());
}

template class TulipModel<float>;
template class TulipModel<double>;

// ---------------------------------------------------------------------------
// Inference

void InferenceConfig::validate() const {
  require(mc_passes >= 1, Errc::kInvalidArgument, "mc_passes must be >= 1");
  require(!mc_enabled || mc_passes >= 2, Errc::kInvalidArgument,
          "MC dropout needs at least 2 passes");
  require(mc_threshold >= 0 && !std::isnan(mc_threshold), Errc::kInvalidArgument,
          "mc_threshold must be non-negative");
}

RangeImage McResult::mean_image() const {
  RangeImage img(intrinsics);
  for (std::size_t i = 0; i < mean.size(); ++i)
    img.pixels()[i] = std::clamp(static_cast<float>(mean[i]), 0.0f, intrinsics.max_range);
  return img;
}

RangeImage McResult::std_image() const {
  RangeImage img(intrinsics);
  for (std::size_t i = 0; i < stddev.size(); ++i)
    img.pixels()[i] = std::clamp(static_cast<float>(stddev[i]), 0.0f, intrinsics.max_range);
  return img;
}

RangeImage McResult::filtered_image() const {
  RangeImage img = mean_image();
  for (std::size_t i = 0; i < valid.size(); ++i)
    if (!valid[i]) img.pixels()[i] = 0.0f;
  return img;
}

std::size_t McResult::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

template <typename T>
Tensor<T> image_to_tensor(const RangeImage& img) {
  Tensor<T> t({img.height(), img.width()});
  const double scale = 1.0 / img.intrinsics().max_range;
  for (std::size_t i = 0; i < img.size(); ++i)
    t[i] = static_cast<T>(double(img.pixels()[i]) * scale);
  return t;
}

template <typename T>
RangeImage tensor_to_image(const Tensor<T>& t, const SensorIntrinsics& intr) {
  require(t.rank() == 2 && t.shape()[0] == intr.height && t.shape()[1] == intr.width,
          Errc::kShapeMismatch, "tensor " + to_string(t.shape()) + " does not match intrinsics");
  RangeImage img(intr);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = std::clamp(double(t[i]), 0.0, 1.0) * intr.max_range;
    img.pixels()[i] = std::min(static_cast<float>(r), intr.max_range);
  }
  return img;
}

SensorIntrinsics upsampled_intrinsics(const SensorIntrinsics& low, int beta) {
  SensorIntrinsics high = low;
  high.height = low.height * beta;
  return high;
}

template <typename T>
McResult mc_dropout_infer(const TulipModel<T>& model, const RangeImage& low,
                          const InferenceConfig& icfg, bool keep_passes) {
  icfg.validate();
  const auto& cfg = model.config();
  require(low.height() == cfg.input_height, Errc::kShapeMismatch,
          "input height " + std::to_string(low.height()) + " does not match model height " +
              std::to_string(cfg.input_height));
  McResult res;
  res.intrinsics = upsampled_intrinsics(low.intrinsics(), cfg.beta);
  const double max_range = low.intrinsics().max_range;
  const Tensor<T> x = image_to_tensor<T>(low);
  const int passes = icfg.mc_enabled ? icfg.mc_passes : 1;
  std::vector<Tensor<T>> outs(static_cast<std::size_t>(passes));
  parallel_for(static_cast<std::size_t>(passes), [&](std::size_t k) {
    outs[k] = icfg.mc_enabled ? model.predict_stochastic(x, icfg.seed, k) : model.predict(x);
  });
  const std::size_t n = outs[0].size();
  res.mean.assign(n, 0.0);
  std::vector<double> m2(n, 0.0);
  // Welford, in pass order so results do not depend on scheduling.
  for (int k = 0; k < passes; ++k) {
    const auto& o = outs[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < n; ++i) {
      const double v = double(o[i]) * max_range;
      const double delta = v - res.mean[i];
      res.mean[i] += delta / (k + 1);
      m2[i] += delta * (v - res.mean[i]);
    }
  }
  res.stddev.resize(n);
  res.valid.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    res.stddev[i] = std::sqrt(std::max(0.0, m2[i] / passes));
    res.valid[i] = res.stddev[i] <= icfg.mc_threshold ? 1 : 0;
  }
  if (keep_passes) {
    for (const auto& o : outs) {
      std::vector<double> p(n);
      for (std::size_t i = 0; i < n; ++i) p[i] = double(o[i]) * max_range;
      res.passes.push_back(std::move(p));
    }
  }
  return res;
}

#define TULIP_INSTANTIATE_NETWORK(T)                                                         \
  template Var<T> patch_embed<T>(Var<T>, int, int, Var<T>, Var<T>);                          \
  template Var<T> window_attention<T>(Var<T>, const WindowPlan&, int,                        \
                                      const AttentionWeights<T>&, const DropoutContext&,     \
                                      std::string_view);                                     \
  template Var<T> swin_block<T>(Var<T>, const WindowPlan&, int, const BlockWeights<T>&, T,   \
                                const DropoutContext&, std::string_view);                    \
  template Var<T> space_to_channels<T>(Var<T>, int, int, int, int);                          \
  template Var<T> channels_to_space<T>(Var<T>, int, int, int, int);                          \
  template Var<T> patch_merge<T>(Var<T>, int, int, Var<T>, Var<T>, Var<T>, T, int);          \
  template Var<T> patch_unmerge<T>(Var<T>, int, int, int, Var<T>);                           \
  template Var<T> token_duplicate<T>(Var<T>, int, int, int, Var<T>);                         \
  template Var<T> skip_fuse<T>(Var<T>, Var<T>, Var<T>, Var<T>);                              \
  template Var<T> projection_head<T>(Var<T>, int, int, int, int, Var<T>, Var<T>, Var<T>,     \
                                     Var<T>);                                                \
  template Var<T> patch_expand_head<T>(Var<T>, int, int, int, int, Var<T>, Var<T>, Var<T>,   \
                                       Var<T>, Var<T>, T);                                   \
  template Tensor<T> image_to_tensor<T>(const RangeImage&);                                  \
  template RangeImage tensor_to_image<T>(const Tensor<T>&, const SensorIntrinsics&);         \
  template McResult mc_dropout_infer<T>(const TulipModel<T>&, const RangeImage&,             \
                                        const InferenceConfig&, bool);

TULIP_INSTANTIATE_NETWORK(float)
TULIP_INSTANTIATE_NETWORK(double)

}  // namespace tulip
