//! Group linear layers, the ASMA regression head and a dense baseline.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `groups` independent affine maps over contiguous slices of the input.
/// With one group this is an ordinary dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLinear {
    groups: usize,
    in_per_group: usize,
    out_per_group: usize,
    /// Per group, `out_per_group x in_per_group` row-major.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl GroupLinear {
    pub fn zeros(c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !c_in.is_multiple_of(groups) {
            return Err(Error::NotDivisible { width: c_in, groups });
        }
        if !c_out.is_multiple_of(groups) {
            return Err(Error::NotDivisible { width: c_out, groups });
        }
        let (gi, go) = (c_in / groups, c_out / groups);
        Ok(Self {
            groups,
            in_per_group: gi,
            out_per_group: go,
            weights: vec![0.0; groups * gi * go],
            biases: vec![0.0; c_out],
        })
    }

    /// Xavier-uniform weights, per group, zero biases.
    pub fn xavier(c_in: usize, c_out: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut layer = Self::zeros(c_in, c_out, groups)?;
        let bound = (6.0 / (layer.in_per_group + layer.out_per_group) as f64).sqrt();
        layer.weights.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        Ok(layer)
    }

    pub fn dense(c_in: usize, c_out: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        Self::from_parts(1, c_in, c_out, weights, biases)
    }

    pub fn from_parts(groups: usize, c_in: usize, c_out: usize, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        let mut layer = Self::zeros(c_in, c_out, groups)?;
        if weights.len() != layer.weights.len() || biases.len() != c_out {
            return Err(Error::WidthMismatch(format!(
                "expected {} weights and {c_out} biases, got {} and {}",
                layer.weights.len(),
                weights.len(),
                biases.len()
            )));
        }
        layer.weights = weights;
        layer.biases = biases;
        Ok(layer)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn in_width(&self) -> usize {
        self.groups * self.in_per_group
    }

    pub fn out_width(&self) -> usize {
        self.groups * self.out_per_group
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Weight of output `o` on input `i` within group `g`.
    pub fn weight(&self, g: usize, o: usize, i: usize) -> f64 {
        self.weights[(g * self.out_per_group + o) * self.in_per_group + i]
    }

    pub fn param_count(&self) -> (usize, usize) {
        (self.weights.len(), self.biases.len())
    }

    /// Pre-activation `W_k x_k + b_k` for every group, concatenated.
    pub fn affine(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !x.len().is_multiple_of(self.groups) {
            return Err(Error::NotDivisible {
                width: x.len(),
                groups: self.groups,
            });
        }
        if x.len() != self.in_width() {
            return Err(Error::WidthMismatch(format!(
                "input width {} but layer expects {}",
                x.len(),
                self.in_width()
            )));
        }
        let (gi, go) = (self.in_per_group, self.out_per_group);
        let mut out = self.biases.clone();
        for g in 0..self.groups {
            let xg = &x[g * gi..(g + 1) * gi];
            for o in 0..go {
                let row = &self.weights[(g * go + o) * gi..(g * go + o + 1) * gi];
                out[g * go + o] += row.iter().zip(xg).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        Ok(out)
    }

    /// Gradients of `upstream . affine(x)`: input gradient, weight gradient, bias gradient.
    fn affine_backward(&self, x: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (gi, go) = (self.in_per_group, self.out_per_group);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; self.weights.len()];
        for g in 0..self.groups {
            let xg = &x[g * gi..(g + 1) * gi];
            for o in 0..go {
                let u = upstream[g * go + o];
                if u == 0.0 {
                    continue;
                }
                let base = (g * go + o) * gi;
                for i in 0..gi {
                    dw[base + i] = u * xg[i];
                    dx[g * gi + i] += u * self.weights[base + i];
                }
            }
        }
        (dx, dw, upstream.to_vec())
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|a| *a = a.max(0.0));
}

/// Group linear layer followed by a rectifier.
pub fn gll_forward(x: &[f64], layer: &GroupLinear) -> Result<Vec<f64>> {
    let mut out = layer.affine(x)?;
    relu(&mut out);
    Ok(out)
}

/// Gradients for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Parameter gradients of a three-layer head, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub layers: [LayerGrad; 3],
}

/// Two rectified layers and a linear output layer. Shared by the ASMA head
/// (grouped hidden layers) and the dense baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layers3 {
    layers: [GroupLinear; 3],
}

impl Layers3 {
    fn new(layers: [GroupLinear; 3]) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::WidthMismatch(format!(
                    "layer output {} feeds input {}",
                    pair[0].out_width(),
                    pair[1].in_width()
                )));
            }
        }
        Ok(Self { layers })
    }

    fn forward_cached(&self, x: &[f64]) -> Result<[Vec<f64>; 4]> {
        let h1 = gll_forward(x, &self.layers[0])?;
        let h2 = gll_forward(&h1, &self.layers[1])?;
        let y = self.layers[2].affine(&h2)?;
        Ok([x.to_vec(), h1, h2, y])
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let [_, _, _, y] = self.forward_cached(x)?;
        Ok(y)
    }

    fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, HeadGrads)> {
        let [x, h1, h2, y] = self.forward_cached(x)?;
        if upstream.len() != y.len() {
            return Err(Error::WidthMismatch(format!(
                "upstream gradient width {} but output width {}",
                upstream.len(),
                y.len()
            )));
        }
        let (mut d2, w3, b3) = self.layers[2].affine_backward(&h2, upstream);
        // rectifier gates: zero where the activation was clipped
        d2.iter_mut().zip(&h2).for_each(|(d, h)| {
            if *h <= 0.0 {
                *d = 0.0
            }
        });
        let (mut d1, w2, b2) = self.layers[1].affine_backward(&h1, &d2);
        d1.iter_mut().zip(&h1).for_each(|(d, h)| {
            if *h <= 0.0 {
                *d = 0.0
            }
        });
        let (dx, w1, b1) = self.layers[0].affine_backward(&x, &d1);
        let lg = |weights, biases| LayerGrad { weights, biases };
        Ok((
            dx,
            HeadGrads {
                layers: [lg(w1, b1), lg(w2, b2), lg(w3, b3)],
            },
        ))
    }

    fn param_count(&self) -> (usize, usize) {
        self.layers
            .iter()
            .map(|l| l.param_count())
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = (&mut Vec<f64>, &mut Vec<f64>)> {
        self.layers.iter_mut().map(|l| (&mut l.weights, &mut l.biases))
    }
}

/// Two group linear layers with rectifiers, fused by one dense linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsmaHead(Layers3);

impl AsmaHead {
    pub fn new(gll1: GroupLinear, gll2: GroupLinear, fusion: GroupLinear) -> Result<Self> {
        if fusion.groups() != 1 {
            return Err(Error::InvalidArgument("fusion layer must be dense".into()));
        }
        Ok(Self(Layers3::new([gll1, gll2, fusion])?))
    }

    /// Xavier-initialized head over `widths = [in, hidden1, hidden2, out]`.
    pub fn init(widths: [usize; 4], groups: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gll1 = GroupLinear::xavier(widths[0], widths[1], groups, &mut rng)?;
        let gll2 = GroupLinear::xavier(widths[1], widths[2], groups, &mut rng)?;
        let fusion = GroupLinear::xavier(widths[2], widths[3], 1, &mut rng)?;
        Self::new(gll1, gll2, fusion)
    }

    pub fn layers(&self) -> &[GroupLinear; 3] {
        &self.0.layers
    }
}

/// Three dense layers with rectifiers between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHead(Layers3);

impl MlpHead {
    pub fn new(l1: GroupLinear, l2: GroupLinear, l3: GroupLinear) -> Result<Self> {
        if l1.groups() != 1 || l2.groups() != 1 || l3.groups() != 1 {
            return Err(Error::InvalidArgument("MLP layers must be dense".into()));
        }
        Ok(Self(Layers3::new([l1, l2, l3])?))
    }

    pub fn init(widths: [usize; 4], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = GroupLinear::xavier(widths[0], widths[1], 1, &mut rng)?;
        let l2 = GroupLinear::xavier(widths[1], widths[2], 1, &mut rng)?;
        let l3 = GroupLinear::xavier(widths[2], widths[3], 1, &mut rng)?;
        Self::new(l1, l2, l3)
    }

    pub fn layers(&self) -> &[GroupLinear; 3] {
        &self.0.layers
    }
}

/// Common interface of the regression heads.
pub trait Head {
    fn layers3(&self) -> &Layers3;
    fn layers3_mut(&mut self) -> &mut Layers3;

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.layers3().forward(x)
    }

    fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, HeadGrads)> {
        self.layers3().backward(x, upstream)
    }

    /// `(weights, biases)`.
    fn param_count(&self) -> (usize, usize) {
        self.layers3().param_count()
    }
}

impl Head for AsmaHead {
    fn layers3(&self) -> &Layers3 {
        &self.0
    }
    fn layers3_mut(&mut self) -> &mut Layers3 {
        &mut self.0
    }
}

impl Head for MlpHead {
    fn layers3(&self) -> &Layers3 {
        &self.0
    }
    fn layers3_mut(&mut self) -> &mut Layers3 {
        &mut self.0
    }
}

pub fn asma_forward(x: &[f64], head: &AsmaHead) -> Result<Vec<f64>> {
    head.forward(x)
}

pub fn asma_backward(x: &[f64], head: &AsmaHead, upstream: &[f64]) -> Result<(Vec<f64>, HeadGrads)> {
    head.backward(x, upstream)
}

pub fn param_count(head: &impl Head) -> (usize, usize) {
    head.param_count()
}

/// One regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Inverse-time decay: epoch `e` uses `lr / (1 + decay * e)`.
    pub decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.01,
            momentum: 0.9,
            batch: 32,
            decay: 0.0,
            seed: 7,
        }
    }
}

/// Mean squared error over samples and output components.
pub fn mse(head: &impl Head, set: &[Sample]) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for sample in set {
        let y = head.forward(&sample.features)?;
        if y.len() != sample.target.len() {
            return Err(Error::WidthMismatch("target width differs from head output".into()));
        }
        s += y
            .iter()
            .zip(&sample.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        n += y.len();
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Minibatch SGD with momentum on the mean squared error; returns the
/// held-out MSE of the trained head.
pub fn train_toy_regressor(
    train: &[Sample],
    held_out: &[Sample],
    head: &mut impl Head,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<(Vec<f64>, Vec<f64>)> = head
        .layers3_mut()
        .params_mut()
        .map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = cfg.batch.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr / (1.0 + cfg.decay * epoch as f64);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut acc: Option<HeadGrads> = None;
            for &i in chunk {
                let s = &train[i];
                let y = head.forward(&s.features)?;
                let scale = 2.0 / (y.len() * chunk.len()) as f64;
                let up: Vec<f64> = y.iter().zip(&s.target).map(|(a, b)| scale * (a - b)).collect();
                epoch_loss += y.iter().zip(&s.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let (_, g) = head.backward(&s.features, &up)?;
                acc = Some(match acc {
                    None => g,
                    Some(mut a) => {
                        for (la, lg) in a.layers.iter_mut().zip(g.layers) {
                            la.weights.iter_mut().zip(lg.weights).for_each(|(x, y)| *x += y);
                            la.biases.iter_mut().zip(lg.biases).for_each(|(x, y)| *x += y);
                        }
                        a
                    }
                });
            }
            let Some(grads) = acc else { continue };
            for (((w, b), (vw, vb)), g) in head
                .layers3_mut()
                .params_mut()
                .zip(velocity.iter_mut())
                .zip(grads.layers.iter())
            {
                for ((p, v), d) in w.iter_mut().zip(vw.iter_mut()).zip(&g.weights) {
                    *v = cfg.momentum * *v - lr * d;
                    *p += *v;
                }
                for ((p, v), d) in b.iter_mut().zip(vb.iter_mut()).zip(&g.biases) {
                    *v = cfg.momentum * *v - lr * d;
                    *p += *v;
                }
            }
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence(epoch));
        }
    }
    mse(head, held_out)
}
