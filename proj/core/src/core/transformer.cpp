#include "detox/core/transformer.hpp"

namespace detox::core {

namespace {

template <typename T>
Tensor<T> weight(Shape shape, Init init, Rng& rng) {
  if (init == Init::kZeros) return Tensor<T>::zeros(std::move(shape), true);
  return normal_tensor<T>(std::move(shape), T(0.02), rng);
}

}  // namespace

template <typename T>
BlockWeights<T> register_block(ParameterSet<T>& params, const std::string& prefix,
                               std::size_t d_model, std::size_t d_ff, Init init, Rng& rng) {
  const std::size_t d = d_model;
  params.add(prefix + ".ln1.gamma", Tensor<T>::full({d}, T(1), true));
  params.add(prefix + ".ln1.beta", Tensor<T>::zeros({d}, true));
  params.add(prefix + ".attn.w_qkv", weight<T>({d, 3 * d}, init, rng));
  params.add(prefix + ".attn.b_qkv", Tensor<T>::zeros({3 * d}, true));
  params.add(prefix + ".attn.w_out", weight<T>({d, d}, init, rng));
  params.add(prefix + ".attn.b_out", Tensor<T>::zeros({d}, true));
  params.add(prefix + ".ln2.gamma", Tensor<T>::full({d}, T(1), true));
  params.add(prefix + ".ln2.beta", Tensor<T>::zeros({d}, true));
  params.add(prefix + ".mlp.w_fc", weight<T>({d, d_ff}, init, rng));
  params.add(prefix + ".mlp.b_fc", Tensor<T>::zeros({d_ff}, true));
  params.add(prefix + ".mlp.w_proj", weight<T>({d_ff, d}, init, rng));
  params.add(prefix + ".mlp.b_proj", Tensor<T>::zeros({d}, true));
  return bind_block(params, prefix);
}

template <typename T>
BlockWeights<T> bind_block(ParameterSet<T>& params, const std::string& prefix) {
  BlockWeights<T> w;
  w.ln1_gamma = params.at(prefix + ".ln1.gamma");
  w.ln1_beta = params.at(prefix + ".ln1.beta");
  w.w_qkv = params.at(prefix + ".attn.w_qkv");
  w.b_qkv = params.at(prefix + ".attn.b_qkv");
  w.w_out = params.at(prefix + ".attn.w_out");
  w.b_out = params.at(prefix + ".attn.b_out");
  w.ln2_gamma = params.at(prefix + ".ln2.gamma");
  w.ln2_beta = params.at(prefix + ".ln2.beta");
  w.w_fc = params.at(prefix + ".mlp.w_fc");
  w.b_fc = params.at(prefix + ".mlp.b_fc");
  w.w_proj = params.at(prefix + ".mlp.w_proj");
  w.b_proj = params.at(prefix + ".mlp.b_proj");
  return w;
}

template <typename T>
Tensor<T> feature_transform(const Tensor<T>& u, const BlockWeights<T>& w) {
  Tensor<T> hidden = gelu(linear(layer_norm(u, w.ln2_gamma, w.ln2_beta), w.w_fc, w.b_fc));
  return add(u, linear(hidden, w.w_proj, w.b_proj));
}

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& h, const BlockWeights<T>& w, std::size_t n_heads,
                            const AttentionLayout& layout) {
  Tensor<T> qkv = linear(layer_norm(h, w.ln1_gamma, w.ln1_beta), w.w_qkv, w.b_qkv);
  Tensor<T> attended = linear(multi_head_attention(qkv, n_heads, layout), w.w_out, w.b_out);
  return feature_transform(add(attended, h), w);
}

template BlockWeights<float> register_block(ParameterSet<float>&, const std::string&,
                                            std::size_t, std::size_t, Init, Rng&);
template BlockWeights<double> register_block(ParameterSet<double>&, const std::string&,
                                             std::size_t, std::size_t, Init, Rng&);
template BlockWeights<float> bind_block(ParameterSet<float>&, const std::string&);
template BlockWeights<double> bind_block(ParameterSet<double>&, const std::string&);
template Tensor<float> feature_transform(const Tensor<float>&, const BlockWeights<float>&);
template Tensor<double> feature_transform(const Tensor<double>&, const BlockWeights<double>&);
template Tensor<float> transformer_block(const Tensor<float>&, const BlockWeights<float>&,
                                         std::size_t, const AttentionLayout&);
template Tensor<double> transformer_block(const Tensor<double>&, const BlockWeights<double>&,
                                          std::size_t, const AttentionLayout&);

}  // namespace detox::core
