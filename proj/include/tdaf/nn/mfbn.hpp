#pragma once

#include "tdaf/core/ops.hpp"
#include "tdaf/core/parameter.hpp"

namespace tdaf {

/// Multi-flow batch normalization: one shared affine pair (gamma, alpha) for
/// all flows, but separate running statistics per flow. Train mode normalizes
/// with the current batch's per-channel statistics (over batch and spatial
/// dims) and updates the addressed flow's running stats; eval mode normalizes
/// with that flow's stored stats. Only gamma and alpha are learnable.
template <typename Scalar>
class MfbnLayer {
 public:
  MfbnLayer(int channels, int num_flows, ParameterStore<Scalar>& store, const std::string& name)
      : channels_(channels), num_flows_(num_flows), name_(name) {
    require(channels >= 1 && num_flows >= 1, "MfbnLayer: bad channels/flows ", channels, "/",
            num_flows);
    gamma_ = store.add(name + ".gamma", Shape(1, channels, 1, 1));
    init_constant(gamma_, Scalar(1));
    alpha_ = store.add(name + ".alpha", Shape(1, channels, 1, 1));
    init_constant(alpha_, Scalar(0));
    reset_stats();
  }

  MfbnLayer(const MfbnLayer&) = delete;
  MfbnLayer& operator=(const MfbnLayer&) = delete;

  void reset_stats() {
    running_mean_ = RowMatrixX<Scalar>::Zero(num_flows_, channels_);
    running_var_ = RowMatrixX<Scalar>::Ones(num_flows_, channels_);
  }

  int channels() const { return channels_; }
  int num_flows() const { return num_flows_; }
  const std::string& name() const { return name_; }
  const TensorPtr<Scalar>& gamma() const { return gamma_; }
  const TensorPtr<Scalar>& alpha() const { return alpha_; }
  RowMatrixX<Scalar>& running_mean() { return running_mean_; }
  RowMatrixX<Scalar>& running_var() { return running_var_; }
  const RowMatrixX<Scalar>& running_mean() const { return running_mean_; }
  const RowMatrixX<Scalar>& running_var() const { return running_var_; }

  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);
  bool train_mode = true;

 private:
  int channels_;
  int num_flows_;
  std::string name_;
  TensorPtr<Scalar> gamma_, alpha_;
  RowMatrixX<Scalar> running_mean_, running_var_;  // one row per flow
};

template <typename Scalar>
TensorPtr<Scalar> mfbn_forward(Tape<Scalar>* tape, const TensorPtr<Scalar>& x, int flow_id,
                               MfbnLayer<Scalar>& layer) {
  const Shape& xs = x->shape;
  require(xs.c == layer.channels(), "mfbn_forward: input channels ", xs.c, " != layer channels ",
          layer.channels());
  require(flow_id >= 0 && flow_id < layer.num_flows(), "mfbn_forward: flow_id ", flow_id,
          " out of range [0,", layer.num_flows(), ")");
  const int C = xs.c;
  const std::int64_t hw = xs.spatial();
  const std::int64_t m = std::int64_t(xs.n) * hw;
  auto out = make_tensor<Scalar>(xs);
  const auto& gamma = layer.gamma();
  const auto& alpha = layer.alpha();

  if (layer.train_mode) {
    require(m >= 2, "mfbn_forward: train mode needs batch*H*W >= 2, got ", m, " for input ",
            xs.str());
    auto mean = std::make_shared<ArrayX<Scalar>>(C);
    auto invstd = std::make_shared<ArrayX<Scalar>>(C);
    auto xhat = std::make_shared<ArrayX<Scalar>>(x->values.size());
    ArrayX<Scalar> var(C);
    for (int c = 0; c < C; ++c) {
      Scalar sum(0);
      for (int n = 0; n < xs.n; ++n)
        sum += x->values.segment((std::int64_t(n) * C + c) * hw, hw).sum();
      const Scalar mu = sum / Scalar(m);
      Scalar sq(0);
      for (int n = 0; n < xs.n; ++n)
        sq += (x->values.segment((std::int64_t(n) * C + c) * hw, hw) - mu).square().sum();
      const Scalar v = sq / Scalar(m);  // biased
      (*mean)[c] = mu;
      var[c] = v;
      (*invstd)[c] = Scalar(1) / std::sqrt(v + layer.eps);
      for (int n = 0; n < xs.n; ++n) {
        const std::int64_t off = (std::int64_t(n) * C + c) * hw;
        xhat->segment(off, hw) = (x->values.segment(off, hw) - mu) * (*invstd)[c];
        out->values.segment(off, hw) = gamma->values[c] * xhat->segment(off, hw) + alpha->values[c];
      }
      // Running stats take the unbiased variance.
      layer.running_mean()(flow_id, c) =
          (Scalar(1) - layer.momentum) * layer.running_mean()(flow_id, c) + layer.momentum * mu;
      layer.running_var()(flow_id, c) =
          (Scalar(1) - layer.momentum) * layer.running_var()(flow_id, c) +
          layer.momentum * v * Scalar(m) / Scalar(m - 1);
    }

    if (detail::wants_tape(tape, {x.get(), gamma.get(), alpha.get()})) {
      out->requires_grad = true;
      TensorPtr<Scalar> g = gamma, a = alpha;
      tape->record([x, out, g, a, mean, invstd, xhat, m]() {
        if (!out->has_grad()) return;
        const Shape& xs = x->shape;
        const int C = xs.c;
        const std::int64_t hw = xs.spatial();
        x->ensure_grad();
        g->ensure_grad();
        a->ensure_grad();
        for (int c = 0; c < C; ++c) {
          Scalar sum_dy(0), sum_dy_xhat(0), sum_dxhat(0), sum_dxhat_xhat(0);
          for (int n = 0; n < xs.n; ++n) {
            const std::int64_t off = (std::int64_t(n) * C + c) * hw;
            auto dy = out->grad.segment(off, hw);
            auto xh = xhat->segment(off, hw);
            sum_dy += dy.sum();
            sum_dy_xhat += (dy * xh).sum();
          }
          a->grad[c] += sum_dy;
          g->grad[c] += sum_dy_xhat;
          // dxhat = dy * gamma; sums of dxhat follow from the dy sums.
          sum_dxhat = sum_dy * g->values[c];
          sum_dxhat_xhat = sum_dy_xhat * g->values[c];
          const Scalar is = (*invstd)[c];
          const Scalar dvar = Scalar(-0.5) * is * is * sum_dxhat_xhat;
          Scalar sum_xmu(0);
          for (int n = 0; n < xs.n; ++n) {
            const std::int64_t off = (std::int64_t(n) * C + c) * hw;
            sum_xmu += (x->values.segment(off, hw) - (*mean)[c]).sum();
          }
          const Scalar dmu =
              -is * sum_dxhat + dvar * Scalar(-2) / Scalar(m) * sum_xmu;
          for (int n = 0; n < xs.n; ++n) {
            const std::int64_t off = (std::int64_t(n) * C + c) * hw;
            auto dy = out->grad.segment(off, hw);
            auto xmu = x->values.segment(off, hw) - (*mean)[c];
            x->grad.segment(off, hw) += dy * g->values[c] * is +
                                        dvar * Scalar(2) / Scalar(m) * xmu + dmu / Scalar(m);
          }
        }
      });
    }
  } else {
    auto rm = std::make_shared<ArrayX<Scalar>>(C);
    auto rstd = std::make_shared<ArrayX<Scalar>>(C);
    for (int c = 0; c < C; ++c) {
      (*rm)[c] = layer.running_mean()(flow_id, c);
      (*rstd)[c] = Scalar(1) / std::sqrt(layer.running_var()(flow_id, c) + layer.eps);
      for (int n = 0; n < xs.n; ++n) {
        const std::int64_t off = (std::int64_t(n) * C + c) * hw;
        out->values.segment(off, hw) =
            gamma->values[c] * (x->values.segment(off, hw) - (*rm)[c]) * (*rstd)[c] +
            alpha->values[c];
      }
    }
    if (detail::wants_tape(tape, {x.get(), gamma.get(), alpha.get()})) {
      out->requires_grad = true;
      TensorPtr<Scalar> g = gamma, a = alpha;
      tape->record([x, out, g, a, rm, rstd]() {
        if (!out->has_grad()) return;
        const Shape& xs = x->shape;
        const int C = xs.c;
        const std::int64_t hw = xs.spatial();
        x->ensure_grad();
        g->ensure_grad();
        a->ensure_grad();
        for (int c = 0; c < C; ++c)
          for (int n = 0; n < xs.n; ++n) {
            const std::int64_t off = (std::int64_t(n) * C + c) * hw;
            auto dy = out->grad.segment(off, hw);
            auto xh = (x->values.segment(off, hw) - (*rm)[c]) * (*rstd)[c];
            a->grad[c] += dy.sum();
            g->grad[c] += (dy * xh).sum();
            x->grad.segment(off, hw) += dy * g->values[c] * (*rstd)[c];
          }
      });
    }
  }
  return out;
}

template <typename Scalar>
void mfbn_reset_stats(MfbnLayer<Scalar>& layer) {
  layer.reset_stats();
}

}  // namespace tdaf
