//! Backbone layers with explicit forward caches and hand-written backward
//! rules. Topologies are fixed (MLP or the 4-stage conv net), so layers are
//! a closed enum rather than trait objects.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward options threaded through the backbone.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOpts {
    pub mode: Mode,
    /// Batch-norm running statistics are written only when this is set
    /// (train mode with an unfrozen backbone).
    pub update_bn_stats: bool,
    /// Dropout masks are drawn only when this is set and mode is Train.
    pub dropout_active: bool,
}

#[derive(Clone, Debug)]
pub struct Dense<S: Scalar> {
    pub weight: Tensor<S>, // [in, out]
    pub bias: Tensor<S>,   // [out]
}

#[derive(Clone, Debug)]
pub struct Conv2d<S: Scalar> {
    pub weight: Tensor<S>, // [c_out, c_in, k, k]
    pub bias: Tensor<S>,   // [c_out]
    pub kernel: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Tensor<S>,        // [c]
    pub beta: Tensor<S>,         // [c]
    pub running_mean: Tensor<S>, // [c]
    pub running_var: Tensor<S>,  // [c]
}

#[derive(Clone, Debug)]
pub enum Layer<S: Scalar> {
    Dense(Dense<S>),
    Relu,
    Conv2d(Conv2d<S>),
    BatchNorm2d(BatchNorm2d<S>),
    Dropout { rate: f64 },
    GlobalAvgPool,
}

/// Saved forward state consumed by the matching backward rule.
pub enum LayerCache<S: Scalar> {
    Dense { input: Tensor<S> },
    Relu { input: Tensor<S> },
    Conv2d { input: Tensor<S> },
    BatchNorm2d { x_hat: Tensor<S>, inv_std: Vec<S>, train_stats: bool },
    Dropout { mask: Option<Tensor<S>> },
    GlobalAvgPool { spatial: usize },
}

impl<S: Scalar> Layer<S> {
    /// Parameter slots in declaration order: (name, trainable).
    pub fn param_slots(&self) -> &'static [(&'static str, bool)] {
        match self {
            Layer::Dense(_) => &[("weight", true), ("bias", true)],
            Layer::Conv2d(_) => &[("weight", true), ("bias", true)],
            Layer::BatchNorm2d(_) => &[
                ("gamma", true),
                ("beta", true),
                ("running_mean", false),
                ("running_var", false),
            ],
            Layer::Relu | Layer::Dropout { .. } | Layer::GlobalAvgPool => &[],
        }
    }

    pub fn param(&self, slot: usize) -> &Tensor<S> {
        match (self, slot) {
            (Layer::Dense(d), 0) => &d.weight,
            (Layer::Dense(d), 1) => &d.bias,
            (Layer::Conv2d(c), 0) => &c.weight,
            (Layer::Conv2d(c), 1) => &c.bias,
            (Layer::BatchNorm2d(b), 0) => &b.gamma,
            (Layer::BatchNorm2d(b), 1) => &b.beta,
            (Layer::BatchNorm2d(b), 2) => &b.running_mean,
            (Layer::BatchNorm2d(b), 3) => &b.running_var,
            _ => panic!("invalid parameter slot {slot}"),
        }
    }

    pub fn param_mut(&mut self, slot: usize) -> &mut Tensor<S> {
        match (self, slot) {
            (Layer::Dense(d), 0) => &mut d.weight,
            (Layer::Dense(d), 1) => &mut d.bias,
            (Layer::Conv2d(c), 0) => &mut c.weight,
            (Layer::Conv2d(c), 1) => &mut c.bias,
            (Layer::BatchNorm2d(b), 0) => &mut b.gamma,
            (Layer::BatchNorm2d(b), 1) => &mut b.beta,
            (Layer::BatchNorm2d(b), 2) => &mut b.running_mean,
            (Layer::BatchNorm2d(b), 3) => &mut b.running_var,
            _ => panic!("invalid parameter slot {slot}"),
        }
    }

    /// Short kind tag used to build parameter-group names.
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Conv2d(_) => "conv",
            Layer::BatchNorm2d(_) => "bn",
            Layer::Dropout { .. } => "dropout",
            Layer::GlobalAvgPool => "pool",
        }
    }

    pub fn forward(
        &mut self,
        x: &Tensor<S>,
        opts: ForwardOpts,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<S>, LayerCache<S>)> {
        match self {
            Layer::Dense(d) => {
                let mut y = matmul(x, &d.weight)?;
                let out = d.bias.data();
                for r in 0..y.rows() {
                    for (v, b) in y.row_mut(r).iter_mut().zip(out) {
                        *v += *b;
                    }
                }
                Ok((y, LayerCache::Dense { input: x.clone() }))
            }
            Layer::Relu => {
                let y = x.map(|v| v.maximum(S::ZERO));
                Ok((y, LayerCache::Relu { input: x.clone() }))
            }
            Layer::Conv2d(c) => {
                let y = conv2d_forward(c, x)?;
                Ok((y, LayerCache::Conv2d { input: x.clone() }))
            }
            Layer::BatchNorm2d(b) => batchnorm_forward(b, x, opts),
            Layer::Dropout { rate } => {
                if opts.mode == Mode::Train && opts.dropout_active && *rate > 0.0 {
                    let keep = 1.0 - *rate;
                    let scale = S::from_f64(1.0 / keep);
                    let mut mask = Tensor::zeros(x.shape());
                    for m in mask.data_mut() {
                        if rng.random::<f64>() >= *rate {
                            *m = scale;
                        }
                    }
                    let mut y = x.clone();
                    for (v, m) in y.data_mut().iter_mut().zip(mask.data()) {
                        *v *= *m;
                    }
                    Ok((y, LayerCache::Dropout { mask: Some(mask) }))
                } else {
                    Ok((x.clone(), LayerCache::Dropout { mask: None }))
                }
            }
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = dims4(x)?;
                let spatial = h * w;
                let inv = S::from_f64(1.0 / spatial as f64);
                let mut y = Tensor::zeros(&[n, c]);
                let xd = x.data();
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        let mut acc = S::ZERO;
                        for v in &xd[base..base + spatial] {
                            acc += *v;
                        }
                        y.row_mut(i)[ch] = acc * inv;
                    }
                }
                Ok((y, LayerCache::GlobalAvgPool { spatial }))
            }
        }
    }

    /// Eval-mode forward without caches or mutation; used by concurrent
    /// readers and prediction paths.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match self {
            Layer::Dense(d) => {
                let mut y = matmul(x, &d.weight)?;
                for r in 0..y.rows() {
                    for (v, b) in y.row_mut(r).iter_mut().zip(d.bias.data()) {
                        *v += *b;
                    }
                }
                Ok(y)
            }
            Layer::Relu => Ok(x.map(|v| v.maximum(S::ZERO))),
            Layer::Conv2d(c) => conv2d_forward(c, x),
            Layer::BatchNorm2d(b) => {
                let (y, _) = batchnorm_eval(b, x)?;
                Ok(y)
            }
            Layer::Dropout { .. } => Ok(x.clone()),
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = dims4(x)?;
                let spatial = h * w;
                let inv = S::from_f64(1.0 / spatial as f64);
                let mut y = Tensor::zeros(&[n, c]);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        let mut acc = S::ZERO;
                        for v in &x.data()[base..base + spatial] {
                            acc += *v;
                        }
                        y.row_mut(i)[ch] = acc * inv;
                    }
                }
                Ok(y)
            }
        }
    }

    /// Returns (d_input, parameter gradients in slot order; None for
    /// non-differentiated slots such as running statistics).
    pub fn backward(
        &self,
        cache: &LayerCache<S>,
        dy: &Tensor<S>,
    ) -> Result<(Tensor<S>, Vec<Option<Tensor<S>>>)> {
        match (self, cache) {
            (Layer::Dense(d), LayerCache::Dense { input }) => {
                let dw = matmul_tn(input, dy)?;
                let mut db = Tensor::zeros(&[d.bias.len()]);
                for r in 0..dy.rows() {
                    for (acc, v) in db.data_mut().iter_mut().zip(dy.row(r)) {
                        *acc += *v;
                    }
                }
                let dx = matmul_nt(dy, &d.weight)?;
                Ok((dx, vec![Some(dw), Some(db)]))
            }
            (Layer::Relu, LayerCache::Relu { input }) => {
                let mut dx = dy.clone();
                for (g, x) in dx.data_mut().iter_mut().zip(input.data()) {
                    if *x <= S::ZERO {
                        *g = S::ZERO;
                    }
                }
                Ok((dx, vec![]))
            }
            (Layer::Conv2d(c), LayerCache::Conv2d { input }) => conv2d_backward(c, input, dy),
            (Layer::BatchNorm2d(b), LayerCache::BatchNorm2d { x_hat, inv_std, train_stats }) => {
                batchnorm_backward(b, x_hat, inv_std, *train_stats, dy)
            }
            (Layer::Dropout { .. }, LayerCache::Dropout { mask }) => {
                let dx = match mask {
                    None => dy.clone(),
                    Some(m) => {
                        let mut dx = dy.clone();
                        for (g, mv) in dx.data_mut().iter_mut().zip(m.data()) {
                            *g *= *mv;
                        }
                        dx
                    }
                };
                Ok((dx, vec![]))
            }
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool { spatial }) => {
                let (n, c) = match dy.shape() {
                    [n, c] => (*n, *c),
                    other => {
                        return Err(Error::ShapeMismatch(format!(
                            "pool backward expects 2-D upstream, got {other:?}"
                        )))
                    }
                };
                let inv = S::from_f64(1.0 / *spatial as f64);
                let mut dx = Tensor::zeros(&[n, c, *spatial]);
                for i in 0..n {
                    for ch in 0..c {
                        let g = dy.row(i)[ch] * inv;
                        let base = (i * c + ch) * spatial;
                        for v in &mut dx.data_mut()[base..base + spatial] {
                            *v = g;
                        }
                    }
                }
                // Caller reshapes back to [n, c, h, w]; the flat layout matches.
                Ok((dx, vec![]))
            }
            _ => Err(Error::ShapeMismatch("layer/cache kind mismatch".into())),
        }
    }
}

fn dims4<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::ShapeMismatch(format!("expected 4-D NCHW, got {other:?}"))),
    }
}

fn conv2d_forward<S: Scalar>(conv: &Conv2d<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c_in, h, w) = dims4(x)?;
    let k = conv.kernel;
    let c_out = conv.bias.len();
    let pad = k / 2;
    if conv.weight.shape() != [c_out, c_in, k, k] {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {:?} does not accept input {:?}",
            conv.weight.shape(),
            x.shape()
        )));
    }
    let mut y = Tensor::zeros(&[n, c_out, h, w]);
    let xd = x.data();
    let wd = conv.weight.data();
    let bd = conv.bias.data();
    for i in 0..n {
        for co in 0..c_out {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = bd[co];
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy + ky).wrapping_sub(pad);
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox + kx).wrapping_sub(pad);
                                if ix >= w {
                                    continue;
                                }
                                let xi = ((i * c_in + ci) * h + iy) * w + ix;
                                let wi = ((co * c_in + ci) * k + ky) * k + kx;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    let yi = ((i * c_out + co) * h + oy) * w + ox;
                    y.data_mut()[yi] = acc;
                }
            }
        }
    }
    Ok(y)
}

fn conv2d_backward<S: Scalar>(
    conv: &Conv2d<S>,
    input: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<Option<Tensor<S>>>)> {
    let (n, c_in, h, w) = dims4(input)?;
    let k = conv.kernel;
    let c_out = conv.bias.len();
    let pad = k / 2;
    let mut dx = Tensor::zeros(&[n, c_in, h, w]);
    let mut dw = Tensor::zeros(&[c_out, c_in, k, k]);
    let mut db = Tensor::zeros(&[c_out]);
    let xd = input.data();
    let wd = conv.weight.data();
    let gd = dy.data();
    for i in 0..n {
        for co in 0..c_out {
            for oy in 0..h {
                for ox in 0..w {
                    let g = gd[((i * c_out + co) * h + oy) * w + ox];
                    db.data_mut()[co] += g;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy + ky).wrapping_sub(pad);
                            if iy >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox + kx).wrapping_sub(pad);
                                if ix >= w {
                                    continue;
                                }
                                let xi = ((i * c_in + ci) * h + iy) * w + ix;
                                let wi = ((co * c_in + ci) * k + ky) * k + kx;
                                dw.data_mut()[wi] += g * xd[xi];
                                dx.data_mut()[xi] += g * wd[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, vec![Some(dw), Some(db)]))
}

fn batchnorm_eval<S: Scalar>(
    bn: &BatchNorm2d<S>,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, (Tensor<S>, Vec<S>))> {
    let (n, c, h, w) = dims4(x)?;
    check_bn_channels(bn, c)?;
    let eps = S::from_f64(BN_EPS);
    let spatial = h * w;
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        inv_std.push(S::ONE / (bn.running_var.data()[ch] + eps).sqrt());
    }
    let mut x_hat = x.clone();
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let mu = bn.running_mean.data()[ch];
            let is = inv_std[ch];
            let g = bn.gamma.data()[ch];
            let b = bn.beta.data()[ch];
            let base = (i * c + ch) * spatial;
            for off in 0..spatial {
                let xh = (x.data()[base + off] - mu) * is;
                x_hat.data_mut()[base + off] = xh;
                y.data_mut()[base + off] = g * xh + b;
            }
        }
    }
    Ok((y, (x_hat, inv_std)))
}

fn batchnorm_forward<S: Scalar>(
    bn: &mut BatchNorm2d<S>,
    x: &Tensor<S>,
    opts: ForwardOpts,
) -> Result<(Tensor<S>, LayerCache<S>)> {
    if opts.mode == Mode::Eval {
        let (y, (x_hat, inv_std)) = batchnorm_eval(bn, x)?;
        return Ok((y, LayerCache::BatchNorm2d { x_hat, inv_std, train_stats: false }));
    }
    let (n, c, h, w) = dims4(x)?;
    check_bn_channels(bn, c)?;
    let eps = S::from_f64(BN_EPS);
    let spatial = h * w;
    let m = S::from_usize(n * spatial);
    let mut x_hat = x.clone();
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std_all = Vec::with_capacity(c);
    for ch in 0..c {
        let mut mean = S::ZERO;
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for off in 0..spatial {
                mean += x.data()[base + off];
            }
        }
        mean = mean / m;
        let mut var = S::ZERO;
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for off in 0..spatial {
                let d = x.data()[base + off] - mean;
                var += d * d;
            }
        }
        var = var / m; // biased variance, used for both normalization and the running update
        let inv_std = S::ONE / (var + eps).sqrt();
        inv_std_all.push(inv_std);
        let g = bn.gamma.data()[ch];
        let b = bn.beta.data()[ch];
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for off in 0..spatial {
                let xh = (x.data()[base + off] - mean) * inv_std;
                x_hat.data_mut()[base + off] = xh;
                y.data_mut()[base + off] = g * xh + b;
            }
        }
        if opts.update_bn_stats {
            let mom = S::from_f64(BN_MOMENTUM);
            let keep = S::ONE - mom;
            bn.running_mean.data_mut()[ch] = keep * bn.running_mean.data()[ch] + mom * mean;
            bn.running_var.data_mut()[ch] = keep * bn.running_var.data()[ch] + mom * var;
        }
    }
    Ok((y, LayerCache::BatchNorm2d { x_hat, inv_std: inv_std_all, train_stats: true }))
}

fn batchnorm_backward<S: Scalar>(
    bn: &BatchNorm2d<S>,
    x_hat: &Tensor<S>,
    inv_std: &[S],
    train_stats: bool,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<Option<Tensor<S>>>)> {
    let (n, c, h, w) = dims4(x_hat)?;
    let spatial = h * w;
    let m = S::from_usize(n * spatial);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(x_hat.shape());
    for ch in 0..c {
        let g = bn.gamma.data()[ch];
        let is = inv_std[ch];
        let mut sum_dy = S::ZERO;
        let mut sum_dy_xhat = S::ZERO;
        let mut sum_xhat = S::ZERO;
        for i in 0..n {
            let base = (i * c + ch) * spatial;
            for off in 0..spatial {
                let gd = dy.data()[base + off];
                let xh = x_hat.data()[base + off];
                sum_dy += gd;
                sum_dy_xhat += gd * xh;
                sum_xhat += xh;
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        if train_stats {
            // Batch statistics participated in the forward pass, so the
            // gradient flows through the mean and variance as well.
            let dvar = S::from_f64(-0.5) * is * is * g * sum_dy_xhat;
            let two = S::from_f64(2.0);
            let dmu = -is * g * sum_dy - dvar * two / m * (sum_xhat / is);
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for off in 0..spatial {
                    let gd = dy.data()[base + off];
                    let xh = x_hat.data()[base + off];
                    dx.data_mut()[base + off] =
                        g * is * gd + dvar * two * xh / (is * m) + dmu / m;
                }
            }
        } else {
            let scale = g * is;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for off in 0..spatial {
                    dx.data_mut()[base + off] = dy.data()[base + off] * scale;
                }
            }
        }
    }
    Ok((dx, vec![Some(dgamma), Some(dbeta), None, None]))
}

fn check_bn_channels<S: Scalar>(bn: &BatchNorm2d<S>, c: usize) -> Result<()> {
    if bn.gamma.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch norm over {} channels applied to {} channels",
            bn.gamma.len(),
            c
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn opts(mode: Mode) -> ForwardOpts {
        ForwardOpts { mode, update_bn_stats: mode == Mode::Train, dropout_active: true }
    }

    #[test]
    fn dense_forward_hand_example() {
        let mut layer = Layer::Dense(Dense {
            weight: Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            bias: Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap(),
        });
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let (y, _) = layer.forward(&x, opts(Mode::Eval), &mut rng()).unwrap();
        assert_eq!(y.data(), &[4.5, 5.5]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut layer = Layer::Dropout { rate: 0.5 };
        let x = Tensor::from_vec(&[1, 1000], vec![1.0f64; 1000]).unwrap();
        let (y_eval, _) = layer.forward(&x, opts(Mode::Eval), &mut rng()).unwrap();
        assert_eq!(y_eval.data(), x.data());
        let (y_train, cache) = layer.forward(&x, opts(Mode::Train), &mut rng()).unwrap();
        let kept = y_train.data().iter().filter(|v| **v != 0.0).count();
        assert!(kept > 350 && kept < 650, "kept {kept} of 1000 at rate 0.5");
        for v in y_train.data() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
        match cache {
            LayerCache::Dropout { mask: Some(_) } => {}
            _ => panic!("train-mode dropout must record a mask"),
        }
    }

    #[test]
    fn dropout_draws_are_seed_deterministic() {
        let mut layer = Layer::Dropout { rate: 0.3 };
        let x = Tensor::from_vec(&[1, 64], vec![1.0f32; 64]).unwrap();
        let (a, _) = layer.forward(&x, opts(Mode::Train), &mut rng()).unwrap();
        let (b, _) = layer.forward(&x, opts(Mode::Train), &mut rng()).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn pool_averages_spatial_cells() {
        let mut layer = Layer::GlobalAvgPool;
        let x = Tensor::from_vec(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let (y, _) = layer.forward(&x, opts(Mode::Eval), &mut rng()).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.5, 6.5]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running_stats() {
        let mut bn = Layer::BatchNorm2d(BatchNorm2d {
            gamma: Tensor::from_vec(&[1], vec![1.0f64]).unwrap(),
            beta: Tensor::from_vec(&[1], vec![0.0]).unwrap(),
            running_mean: Tensor::from_vec(&[1], vec![0.0]).unwrap(),
            running_var: Tensor::from_vec(&[1], vec![1.0]).unwrap(),
        });
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = bn.forward(&x, opts(Mode::Train), &mut rng()).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        if let Layer::BatchNorm2d(b) = &bn {
            // mean 2.5, biased var 1.25, momentum 0.1
            assert!((b.running_mean.data()[0] - 0.25).abs() < 1e-12);
            assert!((b.running_var.data()[0] - (0.9 + 0.125)).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_stats_held_when_updates_disabled() {
        let mut bn = Layer::BatchNorm2d(BatchNorm2d {
            gamma: Tensor::from_vec(&[1], vec![1.0f64]).unwrap(),
            beta: Tensor::from_vec(&[1], vec![0.0]).unwrap(),
            running_mean: Tensor::from_vec(&[1], vec![0.0]).unwrap(),
            running_var: Tensor::from_vec(&[1], vec![1.0]).unwrap(),
        });
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let frozen = ForwardOpts { mode: Mode::Train, update_bn_stats: false, dropout_active: true };
        bn.forward(&x, frozen, &mut rng()).unwrap();
        if let Layer::BatchNorm2d(b) = &bn {
            assert_eq!(b.running_mean.data()[0], 0.0);
            assert_eq!(b.running_var.data()[0], 1.0);
        }
    }
}
