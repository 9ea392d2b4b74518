#include "vspad/activation_trace.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace vspad {

AttentionStack AttentionStack::padded(std::size_t positions) const {
  require_shape(positions >= n_positions, "cannot pad attention to fewer positions");
  AttentionStack out(n_layers, n_heads, positions);
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t p = 0; p < n_positions; ++p) out.at(l, h, p) = at(l, h, p);
    }
  }
  return out;
}

const LayerActivations& ActivationTrace::layer(int index) const {
  for (const auto& l : layers) {
    if (l.layer == index) return l;
  }
  throw ShapeError("layer " + std::to_string(index) + " not recorded in trace");
}

Matrix ActivationTrace::image(int layer_index, std::size_t i) const {
  require_shape(i < n_images, "image index out of range");
  const auto& z = layer(layer_index).z;
  const auto np = static_cast<Eigen::Index>(n_patches());
  return z.middleRows(static_cast<Eigen::Index>(i) * np, np);
}

std::vector<std::string> ActivationTrace::distinct_labels() const {
  std::set<std::string> s(labels.begin(), labels.end());
  return {s.begin(), s.end()};
}

void ActivationTrace::validate(double tol) const {
  const auto rows = static_cast<Eigen::Index>(n_images * n_patches());
  for (const auto& l : layers) {
    require_shape(l.z.rows() == rows, "layer " + std::to_string(l.layer) +
                                          ": rows != n_images * rows * cols");
    require_shape(l.z.allFinite(), "layer " + std::to_string(l.layer) + ": non-finite activation");
  }
  if (patches) require_shape(patches->rows() == rows, "patches: rows != n_images * n_patches");
  require_shape(labels.empty() || labels.size() == n_images, "labels must be one per image");
  require_shape(tokens.empty() || tokens.size() == token_ids.size(), "tokens/token_ids length mismatch");
  require_shape(attn.empty() || attn.size() == token_ids.size(), "one attention stack per text token");
  for (std::size_t t = 0; t < attn.size(); ++t) {
    const auto& a = attn[t];
    require_shape(a.weights.size() == a.n_layers * a.n_heads * a.n_positions, "attention size mismatch");
    require_shape(a.n_positions == attn.front().n_positions, "attention stacks differ in length");
    for (std::size_t l = 0; l < a.n_layers; ++l) {
      for (std::size_t h = 0; h < a.n_heads; ++h) {
        double sum = 0.0;
        for (std::size_t p = 0; p < a.n_positions; ++p) {
          const float w = a.at(l, h, p);
          require_shape(w >= 0.0f, "negative attention weight");
          sum += w;
        }
        require_shape(std::abs(sum - 1.0) <= tol, "attention row of token " + std::to_string(t) +
                                                      " does not sum to 1");
      }
    }
  }
}

io::TensorFile ActivationTrace::to_file() const {
  validate();
  io::TensorFile f;
  const auto np = static_cast<std::uint64_t>(n_patches());
  std::vector<int> layer_ids;
  for (const auto& l : layers) {
    std::vector<float> data(l.z.data(), l.z.data() + l.z.size());
    f.add("z.layer" + std::to_string(l.layer),
          {static_cast<std::uint64_t>(n_images), np, static_cast<std::uint64_t>(l.z.cols())},
          std::move(data));
    layer_ids.push_back(l.layer);
  }
  if (patches) {
    std::vector<float> data(patches->data(), patches->data() + patches->size());
    f.add("patches", {static_cast<std::uint64_t>(n_images), np, static_cast<std::uint64_t>(patches->cols())},
          std::move(data));
  }
  if (!attn.empty()) {
    const auto& a0 = attn.front();
    std::vector<float> data;
    data.reserve(attn.size() * a0.weights.size());
    for (const auto& a : attn) data.insert(data.end(), a.weights.begin(), a.weights.end());
    f.add("attn", {attn.size(), a0.n_layers, a0.n_heads, a0.n_positions}, std::move(data));
  }
  f.manifest = {
      {"kind", "trace"},
      {"n_images", n_images},
      {"patch_grid", {grid.rows, grid.cols}},
      {"layers", layer_ids},
      {"token_ids", token_ids},
      {"tokens", tokens},
      {"labels", labels},
      {"meta", meta},
  };
  return f;
}

ActivationTrace ActivationTrace::from_file(const io::TensorFile& f) {
  if (f.kind() != "trace") throw io::FormatError("not a trace file (kind=" + f.kind() + ")");
  const auto& m = f.manifest;
  ActivationTrace t;
  t.n_images = m.at("n_images").get<std::size_t>();
  t.grid.rows = m.at("patch_grid").at(0).get<std::size_t>();
  t.grid.cols = m.at("patch_grid").at(1).get<std::size_t>();
  const auto np = static_cast<std::uint64_t>(t.n_patches());
  for (const int id : m.at("layers").get<std::vector<int>>()) {
    const auto& e = f.at("z.layer" + std::to_string(id));
    require_shape(e.rank() == 3 && e.shape[0] == t.n_images && e.shape[1] == np,
                  "z.layer" + std::to_string(id) + ": shape does not match manifest");
    LayerActivations la;
    la.layer = id;
    la.z.resize(static_cast<Eigen::Index>(e.shape[0] * e.shape[1]), static_cast<Eigen::Index>(e.shape[2]));
    std::copy(e.data.begin(), e.data.end(), la.z.data());
    t.layers.push_back(std::move(la));
  }
  if (const auto* p = f.find("patches")) {
    require_shape(p->rank() == 3 && p->shape[0] == t.n_images && p->shape[1] == np, "patches: bad shape");
    Matrix pm(static_cast<Eigen::Index>(p->shape[0] * p->shape[1]), static_cast<Eigen::Index>(p->shape[2]));
    std::copy(p->data.begin(), p->data.end(), pm.data());
    t.patches = std::move(pm);
  }
  if (const auto* a = f.find("attn")) {
    require_shape(a->rank() == 4, "attn must be rank 4");
    const std::size_t per = a->shape[1] * a->shape[2] * a->shape[3];
    for (std::uint64_t r = 0; r < a->shape[0]; ++r) {
      AttentionStack s(a->shape[1], a->shape[2], a->shape[3]);
      std::copy_n(a->data.begin() + static_cast<std::ptrdiff_t>(r * per), per, s.weights.begin());
      t.attn.push_back(std::move(s));
    }
  }
  t.token_ids = m.value("token_ids", std::vector<TokenId>{});
  t.tokens = m.value("tokens", std::vector<std::string>{});
  t.labels = m.value("labels", std::vector<std::string>{});
  t.meta = m.value("meta", nlohmann::json::object());
  t.validate();
  return t;
}

}  // namespace vspad
