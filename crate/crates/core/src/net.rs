//! Two-layer attribute embedder with hand-derived gradients, coupled L2
//! weight decay and Adam.
//!
//! Layout: `w1` is `d_attr x hidden` and `w2` is `hidden x d_feat`, both
//! row-major, so a prototype is `relu(w2ᵀ relu(w1ᵀ a + b1) + b2)`.

use rand::Rng;

use crate::domain::{Matrix, Prototype};
use crate::error::{CplError, Result};
use crate::rng::{self, Stream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d_attr: usize,
    pub hidden: usize,
    pub d_feat: usize,
}

impl Dims {
    pub fn new(d_attr: usize, hidden: usize, d_feat: usize) -> Self {
        Self {
            d_attr,
            hidden,
            d_feat,
        }
    }

    pub fn w1_len(&self) -> usize {
        self.d_attr * self.hidden
    }

    pub fn w2_len(&self) -> usize {
        self.hidden * self.d_feat
    }

    pub fn n_params(&self) -> usize {
        self.w1_len() + self.hidden + self.w2_len() + self.d_feat
    }
}

macro_rules! param_arrays {
    ($t:ty) => {
        impl $t {
            /// The four parameter arrays in checkpoint order: w1, b1, w2, b2.
            pub fn arrays(&self) -> [(&'static str, &[f64]); 4] {
                [
                    ("w1", &self.w1),
                    ("b1", &self.b1),
                    ("w2", &self.w2),
                    ("b2", &self.b2),
                ]
            }

            pub fn arrays_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
                [
                    ("w1", &mut self.w1),
                    ("b1", &mut self.b1),
                    ("w2", &mut self.w2),
                    ("b2", &mut self.b2),
                ]
            }
        }
    };
}

/// Parameters of the attribute-to-prototype map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeEmbedder {
    pub dims: Dims,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every embedder parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

param_arrays!(AttributeEmbedder);
param_arrays!(GradientSet);

impl GradientSet {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w1: vec![0.0; dims.w1_len()],
            b1: vec![0.0; dims.hidden],
            w2: vec![0.0; dims.w2_len()],
            b2: vec![0.0; dims.d_feat],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.arrays().iter().all(|(_, a)| a.iter().all(|v| *v == 0.0))
    }
}

/// Pre-activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub inputs: Matrix,
    pub hidden_pre: Matrix,
    pub output_pre: Matrix,
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

// Derivative at exactly 0 is taken as 0.
#[inline]
fn relu_gate(pre: f64, g: f64) -> f64 {
    if pre > 0.0 {
        g
    } else {
        0.0
    }
}

impl AttributeEmbedder {
    /// Uniform Glorot initialisation per layer, zero biases.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut rng = rng::derive(seed, Stream::Init, 0, 0);
        let mut layer = |fan_in: usize, fan_out: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect()
        };
        let w1 = layer(dims.d_attr, dims.hidden);
        let w2 = layer(dims.hidden, dims.d_feat);
        Self {
            dims,
            w1,
            b1: vec![0.0; dims.hidden],
            w2,
            b2: vec![0.0; dims.d_feat],
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        let g = GradientSet::zeros(dims);
        Self {
            dims,
            w1: g.w1,
            b1: g.b1,
            w2: g.w2,
            b2: g.b2,
        }
    }

    /// Checks array lengths against `dims` and that every entry is finite.
    pub fn check(&self) -> Result<()> {
        let d = self.dims;
        let expected = [d.w1_len(), d.hidden, d.w2_len(), d.d_feat];
        for ((name, arr), want) in self.arrays().into_iter().zip(expected) {
            if arr.len() != want {
                return Err(CplError::Dimension {
                    what: format!("embedder {name}"),
                    expected: want,
                    found: arr.len(),
                });
            }
            if let Some(i) = arr.iter().position(|v| !v.is_finite()) {
                return Err(CplError::Numeric(format!("embedder {name}[{i}] is not finite")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, attribute: &[f64]) -> Result<(Prototype, ForwardCache)> {
        let inputs = Matrix::from_rows(self.dims.d_attr, &[attribute]).map_err(|_| {
            CplError::shape(format!(
                "attribute length {} does not match embedder input {}",
                attribute.len(),
                self.dims.d_attr
            ))
        })?;
        let (out, cache) = self.forward_batch(&inputs)?;
        Ok((Prototype::from_relu_output(out.into_vec()), cache))
    }

    /// Maps each attribute row to a prototype row.
    pub fn forward_batch(&self, attributes: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let Dims {
            d_attr,
            hidden,
            d_feat,
        } = self.dims;
        if attributes.cols() != d_attr {
            return Err(CplError::shape(format!(
                "attribute length {} does not match embedder input {d_attr}",
                attributes.cols()
            )));
        }
        let n = attributes.rows();
        let mut hidden_pre = Matrix::zeros(n, hidden);
        let mut output_pre = Matrix::zeros(n, d_feat);
        let mut out = Matrix::zeros(n, d_feat);
        let mut h = vec![0.0; hidden];
        for r in 0..n {
            let a = attributes.row(r);
            let hp = hidden_pre.row_mut(r);
            hp.copy_from_slice(&self.b1);
            for (i, &ai) in a.iter().enumerate() {
                let w = &self.w1[i * hidden..(i + 1) * hidden];
                for (acc, &wij) in hp.iter_mut().zip(w) {
                    *acc += ai * wij;
                }
            }
            for (hj, &p) in h.iter_mut().zip(hp.iter()) {
                *hj = relu(p);
            }
            let op = output_pre.row_mut(r);
            op.copy_from_slice(&self.b2);
            for (j, &hj) in h.iter().enumerate() {
                if hj == 0.0 {
                    continue;
                }
                let w = &self.w2[j * d_feat..(j + 1) * d_feat];
                for (acc, &wjk) in op.iter_mut().zip(w) {
                    *acc += hj * wjk;
                }
            }
            for (o, &p) in out.row_mut(r).iter_mut().zip(op.iter()) {
                *o = relu(p);
            }
        }
        Ok((
            out,
            ForwardCache {
                inputs: attributes.clone(),
                hidden_pre,
                output_pre,
            },
        ))
    }

    /// Backpropagates `upstream` (dL/dprototype, one row per cached input)
    /// and sums the per-row parameter gradients in row order.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<GradientSet> {
        let Dims {
            d_attr,
            hidden,
            d_feat,
        } = self.dims;
        let n = cache.inputs.rows();
        if upstream.rows() != n || upstream.cols() != d_feat {
            return Err(CplError::shape(format!(
                "upstream gradient is {}x{}, expected {n}x{d_feat}",
                upstream.rows(),
                upstream.cols()
            )));
        }
        if cache.inputs.cols() != d_attr
            || cache.hidden_pre.cols() != hidden
            || cache.output_pre.cols() != d_feat
        {
            return Err(CplError::shape("forward cache does not match embedder dimensions"));
        }
        let mut g = GradientSet::zeros(self.dims);
        let mut g_out = vec![0.0; d_feat];
        let mut g_hidden = vec![0.0; hidden];
        for r in 0..n {
            let a = cache.inputs.row(r);
            let hp = cache.hidden_pre.row(r);
            for ((go, &up), &p) in g_out.iter_mut().zip(upstream.row(r)).zip(cache.output_pre.row(r)) {
                *go = relu_gate(p, up);
            }
            for (gb, &go) in g.b2.iter_mut().zip(&g_out) {
                *gb += go;
            }
            for j in 0..hidden {
                let w = &self.w2[j * d_feat..(j + 1) * d_feat];
                let back: f64 = w.iter().zip(&g_out).map(|(w, g)| w * g).sum();
                g_hidden[j] = relu_gate(hp[j], back);
                let hj = relu(hp[j]);
                if hj != 0.0 {
                    let gw = &mut g.w2[j * d_feat..(j + 1) * d_feat];
                    for (acc, &go) in gw.iter_mut().zip(&g_out) {
                        *acc += hj * go;
                    }
                }
            }
            for (gb, &gh) in g.b1.iter_mut().zip(&g_hidden) {
                *gb += gh;
            }
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let gw = &mut g.w1[i * hidden..(i + 1) * hidden];
                for (acc, &gh) in gw.iter_mut().zip(&g_hidden) {
                    *acc += ai * gh;
                }
            }
        }
        Ok(g)
    }

    pub fn weight_sq_norm(&self) -> f64 {
        self.w1.iter().chain(&self.w2).map(|w| w * w).sum()
    }
}

/// Adds `decay * w` to the weight gradients. Biases are not decayed.
pub fn apply_weight_decay(grads: &GradientSet, emb: &AttributeEmbedder, decay: f64) -> GradientSet {
    let mut out = grads.clone();
    if decay != 0.0 {
        for (g, w) in out.w1.iter_mut().zip(&emb.w1) {
            *g += decay * w;
        }
        for (g, w) in out.w2.iter_mut().zip(&emb.w2) {
            *g += decay * w;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: GradientSet,
    pub second_moment: GradientSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dims: Dims) -> Self {
        Self {
            first_moment: GradientSet::zeros(dims),
            second_moment: GradientSet::zeros(dims),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// One bias-corrected Adam update of `emb` in place.
pub fn adam_step(
    emb: &mut AttributeEmbedder,
    grads: &GradientSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(CplError::config(format!("learning rate must be > 0, got {lr}")));
    }
    for (name, g) in grads.arrays() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(CplError::Numeric(format!("gradient {name}[{i}] is not finite")));
        }
    }
    let shapes_ok = emb
        .arrays()
        .iter()
        .zip(grads.arrays().iter())
        .zip(state.first_moment.arrays().iter())
        .all(|(((_, p), (_, g)), (_, m))| p.len() == g.len() && p.len() == m.len());
    if !shapes_ok {
        return Err(CplError::shape("gradient or optimizer state does not match embedder"));
    }

    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let t = state.step as f64;
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let params = emb.arrays_mut();
    let ms = state.first_moment.arrays_mut();
    let vs = state.second_moment.arrays_mut();
    for ((((_, p), (_, g)), (_, m)), (_, v)) in params.into_iter().zip(grads.arrays()).zip(ms).zip(vs) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_net() -> AttributeEmbedder {
        AttributeEmbedder {
            dims: Dims::new(1, 1, 1),
            w1: vec![2.0],
            b1: vec![-1.0],
            w2: vec![3.0],
            b2: vec![0.0],
        }
    }

    fn random_net(dims: Dims, rng: &mut ChaCha8Rng) -> AttributeEmbedder {
        let mut e = AttributeEmbedder::zeros(dims);
        for (_, a) in e.arrays_mut() {
            a.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        e
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let d = Dims::new(5, 7, 3);
        let a = AttributeEmbedder::init(d, 42);
        assert_eq!(a, AttributeEmbedder::init(d, 42));
        assert_ne!(a, AttributeEmbedder::init(d, 43));
        assert!(a.b1.iter().chain(&a.b2).all(|b| *b == 0.0));
        a.check().unwrap();
    }

    #[test]
    fn init_variance_matches_uniform_scale() {
        let e = AttributeEmbedder::init(Dims::new(1024, 1024, 1), 0);
        let scale = (6.0f64 / 2048.0).sqrt();
        let expected = (2.0 * scale).powi(2) / 12.0;
        let n = e.w1.len() as f64;
        let mean = e.w1.iter().sum::<f64>() / n;
        let var = e.w1.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        assert!((var - expected).abs() / expected < 0.1, "{var} vs {expected}");
        assert!(e.w1.iter().all(|w| w.abs() <= scale));
    }

    #[test]
    fn zero_net_gives_zero_prototype() {
        let e = AttributeEmbedder::zeros(Dims::new(3, 4, 2));
        let (p, _) = e.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(&*p, &[0.0, 0.0]);
    }

    #[test]
    fn scalar_forward_by_hand() {
        let e = scalar_net();
        assert_eq!(&*e.forward(&[1.0]).unwrap().0, &[3.0]);
        assert_eq!(&*e.forward(&[0.0]).unwrap().0, &[0.0]);
        assert!(matches!(e.forward(&[1.0, 2.0]), Err(CplError::Shape(_))));
    }

    #[test]
    fn scalar_backward_by_hand() {
        let e = scalar_net();
        let (_, cache) = e.forward(&[1.0]).unwrap();
        let g = e.backward(&cache, &Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        // out = 3 * relu(2a - 1) with a=1: d/dw2 = 1, d/db2 = 1, d/dw1 = 3a = 3, d/db1 = 3.
        assert_eq!(g.w2, vec![1.0]);
        assert_eq!(g.b2, vec![1.0]);
        assert_eq!(g.w1, vec![3.0]);
        assert_eq!(g.b1, vec![3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_net(Dims::new(3, 4, 2), &mut rng);
        let attrs = Matrix::from_vec(2, 3, vec![0.2, 0.5, 0.9, 0.1, 0.3, 0.7]).unwrap();
        let (_, cache) = e.forward_batch(&attrs).unwrap();
        let g = e.backward(&cache, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.is_zero());
        assert!(e.backward(&cache, &Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = Dims::new(3, 4, 2);
        let h = 1e-6;
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let e = random_net(dims, &mut rng);
            let attrs = Matrix::from_vec(3, 3, (0..9).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let up = Matrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            // scalar loss = sum(upstream ⊙ prototypes)
            let loss = |net: &AttributeEmbedder| -> f64 {
                let (out, _) = net.forward_batch(&attrs).unwrap();
                out.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = e.forward_batch(&attrs).unwrap();
            let g = e.backward(&cache, &up).unwrap();
            for k in 0..4 {
                for i in 0..g.arrays()[k].1.len() {
                    let mut plus = e.clone();
                    plus.arrays_mut()[k].1[i] += h;
                    let mut minus = e.clone();
                    minus.arrays_mut()[k].1[i] -= h;
                    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    let an = g.arrays()[k].1[i];
                    let abs = (fd - an).abs();
                    if abs > 1e-8 {
                        worst = worst.max(abs / fd.abs().max(an.abs()));
                    }
                }
            }
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn weight_decay_touches_weights_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_net(Dims::new(2, 3, 2), &mut rng);
        let zero = GradientSet::zeros(e.dims);
        assert_eq!(apply_weight_decay(&zero, &e, 0.0), zero);
        let g = apply_weight_decay(&zero, &e, 1e-4);
        for (a, w) in g.w1.iter().zip(&e.w1) {
            assert_eq!(*a, 1e-4 * w);
        }
        for (a, w) in g.w2.iter().zip(&e.w2) {
            assert_eq!(*a, 1e-4 * w);
        }
        assert!(g.b1.iter().chain(&g.b2).all(|b| *b == 0.0));
    }

    #[test]
    fn decay_alone_shrinks_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut e = random_net(Dims::new(2, 3, 2), &mut rng);
        let zero = GradientSet::zeros(e.dims);
        let mut prev = e.weight_sq_norm();
        for _ in 0..10 {
            let g = apply_weight_decay(&zero, &e, 0.1);
            for (p, gr) in e.arrays_mut().into_iter().zip(g.arrays()) {
                for (w, d) in p.1.iter_mut().zip(gr.1) {
                    *w -= 0.5 * d;
                }
            }
            let now = e.weight_sq_norm();
            assert!(now < prev);
            prev = now;
        }
    }

    fn scalar_param(value: f64) -> AttributeEmbedder {
        AttributeEmbedder {
            dims: Dims::new(1, 1, 0),
            w1: vec![value],
            b1: vec![0.0],
            w2: vec![],
            b2: vec![],
        }
    }

    fn scalar_grad(g: f64) -> GradientSet {
        GradientSet {
            w1: vec![g],
            b1: vec![0.0],
            w2: vec![],
            b2: vec![],
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut e = random_net(Dims::new(2, 3, 2), &mut rng);
        let before = e.clone();
        let mut st = AdamState::new(e.dims);
        let zero = GradientSet::zeros(e.dims);
        adam_step(&mut e, &zero, &mut st, 0.1).unwrap();
        assert_eq!(e, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut e = scalar_param(0.0);
        let mut st = AdamState::new(e.dims);
        adam_step(&mut e, &scalar_grad(1.0), &mut st, 0.1).unwrap();
        // m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
        assert!((e.w1[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_solves_scalar_quadratic() {
        let mut e = scalar_param(0.0);
        let mut st = AdamState::new(e.dims);
        for _ in 0..200 {
            let g = 2.0 * (e.w1[0] - 3.0);
            adam_step(&mut e, &scalar_grad(g), &mut st, 0.1).unwrap();
        }
        assert!((e.w1[0] - 3.0).abs() < 0.05, "{}", e.w1[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut e = scalar_param(0.0);
        let mut st = AdamState::new(e.dims);
        let err = adam_step(&mut e, &scalar_grad(f64::NAN), &mut st, 0.1).unwrap_err();
        assert!(err.to_string().contains("w1"));
        assert_eq!(st.step, 0);
    }
}
