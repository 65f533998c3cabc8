#include "celldiff/mmdit.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "celldiff/rng.hpp"

namespace celldiff {

void ModelConfig::validate() const {
  if (gene_dim < 1 || width < 1 || blocks < 1 || heads < 1)
    throw std::invalid_argument("model config: dimensions must be positive");
  if (width % heads != 0)
    throw std::invalid_argument("model config: width must divide by heads");
  if ((2 * width) % heads != 0)
    throw std::invalid_argument("model config: joint width must divide by heads");
  if (n_contexts < 1 || n_perturbations < 1 || n_doses < 1)
    throw std::invalid_argument("model config: vocabularies must be non-empty");
}

Tensor& ParamStore::add(std::string name, Tensor init) {
  if (index_.count(name))
    throw std::invalid_argument("duplicate parameter name: " + name);
  index_[name] = items_.size();
  items_.emplace_back(std::move(name), std::move(init));
  return items_.back().second;
}

Tensor& ParamStore::by_name(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::invalid_argument("unknown parameter: " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::by_name(const std::string& name) const {
  return const_cast<ParamStore*>(this)->by_name(name);
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

MmDit::MmDit(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  build_params(seed);
  ema_ = params_;  // shadow starts equal to the parameters
}

void MmDit::build_params(uint64_t seed) {
  Rng rng(seed);
  const int g = cfg_.gene_dim, d = cfg_.width;
  const int in_pert = cfg_.self_cond ? 2 * g : g;

  auto dense = [&](std::vector<int> shape) {
    const double std = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    return Tensor::randn(std::move(shape), rng, std);
  };
  auto table = [&](int rows) { return Tensor::randn({rows, d}, rng, 0.02); };

  params_ = ParamStore();
  params_.add("in_pert.w", dense({in_pert, d}));
  params_.add("in_pert.b", Tensor::zeros({d}));
  params_.add("in_ctrl.w", dense({g, d}));
  params_.add("in_ctrl.b", Tensor::zeros({d}));
  params_.add("time.w1", dense({d, d}));
  params_.add("time.b1", Tensor::zeros({d}));
  params_.add("time.w2", dense({d, d}));
  params_.add("time.b2", Tensor::zeros({d}));
  params_.add("emb.context", table(cfg_.n_contexts + 1));
  params_.add("emb.pert", table(cfg_.n_perturbations + 1));
  params_.add("emb.dose", table(cfg_.n_doses + 1));
  params_.add("cov.w", dense({2 * d, d}));
  params_.add("cov.b", Tensor::zeros({d}));
  params_.add("cond.w1", dense({2 * d, d}));
  params_.add("cond.b1", Tensor::zeros({d}));
  params_.add("cond.w2", dense({d, d}));
  params_.add("cond.b2", Tensor::zeros({d}));
  for (int l = 0; l < cfg_.blocks; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    // AdaLN-Zero heads: final affine exactly zero
    params_.add(b + "mod_pert.w", Tensor::zeros({d, 6 * d}));
    params_.add(b + "mod_pert.b", Tensor::zeros({6 * d}));
    params_.add(b + "mod_ctrl.w", Tensor::zeros({d, 6 * d}));
    params_.add(b + "mod_ctrl.b", Tensor::zeros({6 * d}));
    params_.add(b + "attn.qkv_w", dense({2 * d, 6 * d}));
    params_.add(b + "attn.qkv_b", Tensor::zeros({6 * d}));
    params_.add(b + "attn.out_w", dense({2 * d, 2 * d}));
    params_.add(b + "attn.out_b", Tensor::zeros({2 * d}));
    params_.add(b + "mlp_pert.w1", dense({d, 4 * d}));
    params_.add(b + "mlp_pert.b1", Tensor::zeros({4 * d}));
    params_.add(b + "mlp_pert.w2", dense({4 * d, d}));
    params_.add(b + "mlp_pert.b2", Tensor::zeros({d}));
    params_.add(b + "mlp_ctrl.w1", dense({d, 4 * d}));
    params_.add(b + "mlp_ctrl.b1", Tensor::zeros({4 * d}));
    params_.add(b + "mlp_ctrl.w2", dense({4 * d, d}));
    params_.add(b + "mlp_ctrl.b2", Tensor::zeros({d}));
  }
  // zero-initialized output head: the untrained model predicts exactly 0
  params_.add("head.w", Tensor::zeros({d, g}));
  params_.add("head.b", Tensor::zeros({g}));
}

void MmDit::reinit_io_layers(uint64_t seed) {
  Rng rng(seed);
  const int d = cfg_.width;
  auto reinit = [&](Tensor& t) {
    const double std = 1.0 / std::sqrt(static_cast<double>(t.shape[0]));
    for (auto& x : t.v) x = std * rng.normal();
  };
  reinit(params_.by_name("in_pert.w"));
  reinit(params_.by_name("in_ctrl.w"));
  for (auto* n : {"in_pert.b", "in_ctrl.b"})
    params_.by_name(n) = Tensor::zeros({d});
  params_.by_name("head.w") = Tensor::zeros({d, cfg_.gene_dim});
  params_.by_name("head.b") = Tensor::zeros({cfg_.gene_dim});
  ema_ = params_;
}

Tensor MmDit::sinusoidal_code(double t, int dim) {
  if (dim % 2 != 0) throw std::invalid_argument("sinusoidal code: dim must be even");
  const int half = dim / 2;
  Tensor out = Tensor::zeros({1, dim});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out.v[i] = std::sin(t * freq);
    out.v[half + i] = std::cos(t * freq);
  }
  return out;
}

std::vector<ad::Tape::Id> MmDit::register_params(ad::Tape& tape,
                                                 const ParamStore& p) const {
  std::vector<ad::Tape::Id> ids;
  ids.reserve(p.count());
  for (size_t i = 0; i < p.count(); ++i) ids.push_back(tape.input(p.tensor(i)));
  return ids;
}

int MmDit::resolve_index(int id, int vocab, bool null_mask,
                         const char* what) const {
  if (null_mask) return vocab;  // shared null token row
  if (id < 0 || id >= vocab)
    throw std::invalid_argument(std::string(what) + " id " + std::to_string(id)
                                + " outside vocabulary of size " + std::to_string(vocab));
  return id;
}

// Index bookkeeping for one forward pass.
struct MmDit::Ctx {
  ad::Tape& t;
  const ParamStore& store;
  const std::vector<ad::Tape::Id>& pids;

  ad::Tape::Id pid(const std::string& name) const {
    // store order == pid order
    for (size_t i = 0; i < store.count(); ++i)
      if (store.name(i) == name) return pids[i];
    throw std::invalid_argument("unknown parameter: " + name);
  }
  ad::Tape::Id linear(ad::Tape::Id x, const std::string& prefix,
                      const char* w = ".w", const char* b = ".b") const {
    return t.add_row(t.matmul(x, pid(prefix + w)), pid(prefix + b));
  }
};

ad::Tape::Id MmDit::forward(ad::Tape& tape,
                            const std::vector<ad::Tape::Id>& pids,
                            ad::Tape::Id bt, ad::Tape::Id b_sc,
                            ad::Tape::Id b_ctrl, int t,
                            const Condition& cond) const {
  return tape.relu(forward_raw(tape, pids, bt, b_sc, b_ctrl, t, cond));
}

ad::Tape::Id MmDit::forward_raw(ad::Tape& tape,
                                const std::vector<ad::Tape::Id>& pids,
                                ad::Tape::Id bt, ad::Tape::Id b_sc,
                                ad::Tape::Id b_ctrl, int t,
                                const Condition& cond) const {
  if (pids.size() != params_.count())
    throw std::invalid_argument("forward: parameter id list mismatch");
  const int d = cfg_.width;
  const int m = tape.value(bt).rows();
  if (tape.value(bt).cols() != cfg_.gene_dim ||
      tape.value(b_ctrl).cols() != cfg_.gene_dim)
    throw std::invalid_argument("forward: gene dimension mismatch");
  if (tape.value(b_ctrl).rows() != m)
    throw std::invalid_argument("forward: stream length mismatch");
  if (t < 0) throw std::invalid_argument("forward: negative timestep");

  Ctx c{tape, params_, pids};

  // token streams
  ad::Tape::Id x_in = bt;
  if (cfg_.self_cond) {
    if (tape.value(b_sc).shape != tape.value(bt).shape)
      throw std::invalid_argument("forward: self-conditioning batch shape mismatch");
    x_in = tape.concat_last({bt, b_sc});
  }
  auto h_pert = c.linear(x_in, "in_pert");
  auto h_ctrl = c.linear(b_ctrl, "in_ctrl");

  // conditioning vector s = MLP([e_t, e_y])
  auto code = tape.input(sinusoidal_code(t, d), false);
  auto e_t = c.linear(tape.relu(c.linear(code, "time", ".w1", ".b1")),
                      "time", ".w2", ".b2");
  auto e_c = tape.row(c.pid("emb.context"),
                      resolve_index(cond.context, cfg_.n_contexts,
                                    cond.null_mask, "context"));
  const bool mask_pert = cond.null_mask || cond.marginal;
  auto e_p = tape.row(c.pid("emb.pert"),
                      resolve_index(cond.perturbation, cfg_.n_perturbations,
                                    mask_pert, "perturbation"));
  auto e_d = tape.row(c.pid("emb.dose"),
                      resolve_index(cond.dose, cfg_.n_doses, mask_pert,
                                    "dose"));
  auto e_y = c.linear(tape.concat_last({e_c, tape.add(e_p, e_d)}), "cov");
  auto s = c.linear(tape.relu(c.linear(tape.concat_last({e_t, e_y}),
                                       "cond", ".w1", ".b1")),
                    "cond", ".w2", ".b2");
  auto s_act = tape.relu(s);

  const int dh = 2 * d / cfg_.heads;
  for (int l = 0; l < cfg_.blocks; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    auto mod_pert = c.linear(s_act, b + "mod_pert");
    auto mod_ctrl = c.linear(s_act, b + "mod_ctrl");
    auto part = [&](ad::Tape::Id mod, int k) {
      return tape.slice_last(mod, k * d, d);
    };
    auto modulate = [&](ad::Tape::Id h, ad::Tape::Id mod, int off) {
      // LN(h) * (1 + gamma) + beta
      auto gamma1p = tape.affine(part(mod, off + 1), 1.0, 1.0);
      return tape.add_row(tape.mul_row(tape.layer_norm(h), gamma1p),
                          part(mod, off + 0));
    };

    // joint attention over feature-concatenated tokens
    auto u = tape.concat_last({modulate(h_pert, mod_pert, 0),
                               modulate(h_ctrl, mod_ctrl, 0)});
    auto qkv = c.linear(u, b + "attn", ".qkv_w", ".qkv_b");
    auto q = tape.slice_last(qkv, 0, 2 * d);
    auto k = tape.slice_last(qkv, 2 * d, 2 * d);
    auto v = tape.slice_last(qkv, 4 * d, 2 * d);
    std::vector<ad::Tape::Id> heads_out;
    for (int h = 0; h < cfg_.heads; ++h) {
      auto qh = tape.slice_last(q, h * dh, dh);
      auto kh = tape.slice_last(k, h * dh, dh);
      auto vh = tape.slice_last(v, h * dh, dh);
      auto scores = tape.scale(tape.matmul(qh, tape.transpose(kh)),
                               1.0 / std::sqrt(static_cast<double>(dh)));
      heads_out.push_back(tape.matmul(tape.softmax_last(scores), vh));
    }
    auto attn = c.linear(tape.concat_last(heads_out), b + "attn", ".out_w",
                         ".out_b");
    h_pert = tape.add(h_pert, tape.mul_row(tape.slice_last(attn, 0, d),
                                           part(mod_pert, 2)));
    h_ctrl = tape.add(h_ctrl, tape.mul_row(tape.slice_last(attn, d, d),
                                           part(mod_ctrl, 2)));

    // per-stream gated MLP sublayer
    auto mlp = [&](ad::Tape::Id h, ad::Tape::Id mod, const std::string& name) {
      auto x = modulate(h, mod, 3);
      auto hidden = tape.relu(c.linear(x, name, ".w1", ".b1"));
      auto delta = c.linear(hidden, name, ".w2", ".b2");
      return tape.add(h, tape.mul_row(delta, part(mod, 5)));
    };
    h_pert = mlp(h_pert, mod_pert, b + "mlp_pert");
    h_ctrl = mlp(h_ctrl, mod_ctrl, b + "mlp_ctrl");
  }

  // output head, perturbed stream only (caller clamps)
  return c.linear(h_pert, "head");
}

Tensor MmDit::denoise(const ParamStore& p, const Tensor& bt, const Tensor& b_sc,
                      const Tensor& b_ctrl, int t, const Condition& cond) const {
  ad::Tape tape;
  auto pids = register_params(tape, p);
  auto bt_id = tape.input(bt, false);
  auto sc_id = tape.input(b_sc, false);
  auto ctrl_id = tape.input(b_ctrl, false);
  auto out = forward(tape, pids, bt_id, sc_id, ctrl_id, t, cond);
  return tape.value(out);
}

DenoiserFn MmDit::denoiser_fn(bool use_ema) const {
  const ParamStore& store = use_ema ? ema_ : params_;
  return [this, &store](const Tensor& bt, const Tensor& b_sc,
                        const Tensor& b_ctrl, int t, const Condition& cond) {
    return denoise(store, bt, b_sc, b_ctrl, t, cond);
  };
}

namespace {

constexpr char kMagic[9] = "CDIFCKPT";
constexpr uint32_t kVersion = 1;

void write_i64(std::ostream& os, int64_t x) {
  os.write(reinterpret_cast<const char*>(&x), sizeof(x));
}
int64_t read_i64(std::istream& is) {
  int64_t x = 0;
  is.read(reinterpret_cast<char*>(&x), sizeof(x));
  return x;
}
void write_store(std::ostream& os, const ParamStore& p) {
  for (size_t i = 0; i < p.count(); ++i) {
    const auto& t = p.tensor(i);
    os.write(reinterpret_cast<const char*>(t.v.data()),
             static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  }
}
void read_store(std::istream& is, ParamStore& p) {
  for (size_t i = 0; i < p.count(); ++i) {
    auto& t = p.tensor(i);
    is.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  }
}

}  // namespace

void MmDit::save_checkpoint(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 8);
  os.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
  write_i64(os, cfg_.gene_dim);
  write_i64(os, cfg_.width);
  write_i64(os, cfg_.blocks);
  write_i64(os, cfg_.heads);
  write_i64(os, cfg_.self_cond ? 1 : 0);
  write_i64(os, cfg_.n_contexts);
  write_i64(os, cfg_.n_perturbations);
  write_i64(os, cfg_.n_doses);
  write_i64(os, params_.total_elements());
  write_store(os, params_);
  write_store(os, ema_);
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

MmDit MmDit::load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (version != kVersion)
    throw std::runtime_error("unsupported checkpoint version");
  ModelConfig cfg;
  cfg.gene_dim = static_cast<int>(read_i64(is));
  cfg.width = static_cast<int>(read_i64(is));
  cfg.blocks = static_cast<int>(read_i64(is));
  cfg.heads = static_cast<int>(read_i64(is));
  cfg.self_cond = read_i64(is) != 0;
  cfg.n_contexts = static_cast<int>(read_i64(is));
  cfg.n_perturbations = static_cast<int>(read_i64(is));
  cfg.n_doses = static_cast<int>(read_i64(is));
  const int64_t count = read_i64(is);
  MmDit model(cfg, /*seed=*/0);
  if (count != model.params_.total_elements())
    throw std::runtime_error("checkpoint parameter count mismatch");
  read_store(is, model.params_);
  read_store(is, model.ema_);
  if (!is) throw std::runtime_error("checkpoint truncated: " + path);
  return model;
}

}  // namespace celldiff
