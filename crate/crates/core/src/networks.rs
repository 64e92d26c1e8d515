//! Parameterized building blocks: spectrally normalized linear layers, MLPs,
//! and the backbone / evidential heads / energy head / integration gate /
//! router that make up a GEM model.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, GemError, Result};
use crate::rng::{substream, Rng};

/// Index into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Flat registry of every trainable tensor, in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Binds parameters onto a tape lazily and carries the dropout stream.
pub struct Graph<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    dropout: Option<Rng>,
}

impl<'a> Graph<'a> {
    /// `trainable` registers parameters as gradient leaves; `dropout` enables
    /// training-mode dropout masks drawn from the given stream.
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, trainable: bool, dropout: Option<Rng>) -> Self {
        Self {
            tape,
            store,
            bound: vec![None; store.len()],
            trainable,
            dropout,
        }
    }

    /// Uses caller-provided tape variables for every parameter, in store order.
    pub fn with_bindings(tape: &'a mut Tape, store: &'a ParamStore, vars: &[Var], dropout: Option<Rng>) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per parameter");
        Self {
            tape,
            store,
            bound: vars.iter().map(|v| Some(*v)).collect(),
            trainable: true,
            dropout,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Gradient for every bound parameter, zero-filled for unused ones.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.store
            .iter()
            .zip(&self.bound)
            .map(|(p, v)| {
                v.and_then(|v| self.tape.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()))
            })
            .collect()
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let (r, c) = self.tape.shape(x);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.tape.constant(Tensor::new(r, c, mask)?);
        self.tape.mul(x, m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Power-iteration state. `u` spans the output space, `v` the input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Affine map `y = x·W + b`. `W` is stored `in × out` so batches multiply
/// from the left without a transpose; its singular values are those of the
/// conventional `out × in` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub sn: Option<SpectralState>,
    /// Target top singular value of the normalized weight.
    #[serde(default = "unit")]
    pub sn_coeff: f64,
}

fn unit() -> f64 {
    1.0
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Result of one spectral-normalization update.
#[derive(Clone, Debug)]
pub struct SpectralEstimate {
    pub effective: Tensor,
    pub sigma: f64,
    /// Set when `W` is (numerically) zero and is returned unchanged.
    pub degenerate: bool,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, sn: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.register(format!("{name}.weight"), Tensor::new(in_dim, out_dim, w).expect("sized"));
        let bias = store.register(format!("{name}.bias"), Tensor::row_vector(&b));
        let sn = sn.then(|| {
            let mut u: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut v: Vec<f64> = (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            normalize(&mut u);
            normalize(&mut v);
            SpectralState { u, v }
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            sn,
            sn_coeff: 1.0,
        }
    }

    /// Runs `iters` power iterations on the layer's state vectors and
    /// returns `c·W / σ̂₁` for coefficient `c`. Layers without spectral state return `W` as is.
    pub fn spectral_normalize(&mut self, store: &ParamStore, iters: usize) -> SpectralEstimate {
        let w = store.get(self.weight);
        let Some(state) = self.sn.as_mut() else {
            return SpectralEstimate {
                effective: w.clone(),
                sigma: 1.0,
                degenerate: false,
            };
        };
        for _ in 0..iters {
            // v ← W u, u ← Wᵀ v (W is in × out)
            let mut v = vec![0.0; w.rows()];
            for (i, vi) in v.iter_mut().enumerate() {
                *vi = w.row(i).iter().zip(&state.u).map(|(a, b)| a * b).sum();
            }
            if normalize(&mut v) == 0.0 {
                break;
            }
            let mut u = vec![0.0; w.cols()];
            for (i, vi) in v.iter().enumerate() {
                for (uj, wij) in u.iter_mut().zip(w.row(i)) {
                    *uj += wij * vi;
                }
            }
            if normalize(&mut u) == 0.0 {
                break;
            }
            state.u = u;
            state.v = v;
        }
        let sigma = spectral_sigma(w, state);
        if sigma.abs() < 1e-12 {
            log::warn!("spectral normalization skipped: weight matrix is zero");
            return SpectralEstimate {
                effective: w.clone(),
                sigma,
                degenerate: true,
            };
        }
        SpectralEstimate {
            effective: w.map(|x| self.sn_coeff * x / sigma),
            sigma,
            degenerate: false,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, cols) = g.tape.shape(x);
        if cols != self.in_dim {
            return Err(GemError::Shape {
                op: "linear",
                lhs: (0, cols),
                rhs: (self.in_dim, self.out_dim),
            });
        }
        let mut w = g.param(self.weight);
        if let Some(state) = &self.sn {
            if spectral_sigma(g.tape.value(w), state).abs() >= 1e-12 {
                let vt = g.tape.constant(Tensor::row_vector(&state.v));
                let u = g.tape.constant(Tensor::col_vector(&state.u));
                let vw = g.tape.matmul(vt, w)?;
                let mut sigma = g.tape.matmul(vw, u)?;
                if self.sn_coeff != 1.0 {
                    sigma = g.tape.scale(sigma, 1.0 / self.sn_coeff)?;
                }
                w = g.tape.div(w, sigma)?;
            }
        }
        let b = g.param(self.bias);
        let xw = g.tape.matmul(x, w)?;
        g.tape.add(xw, b)
    }
}

fn spectral_sigma(w: &Tensor, state: &SpectralState) -> f64 {
    let mut s = 0.0;
    for (i, vi) in state.v.iter().enumerate() {
        s += vi * w.row(i).iter().zip(&state.u).map(|(a, b)| a * b).sum::<f64>();
    }
    s
}

/// Stack of linear layers with an activation (and dropout in training mode)
/// between consecutive layers; the last layer is left linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        dropout: f64,
        sn: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| LinearLayer::new(store, &format!("{name}.{i}"), d[0], d[1], sn, rng))
            .collect();
        Self {
            layers,
            activation,
            dropout,
        }
    }

    /// Sets the spectral-normalization coefficient of every layer.
    pub fn with_sn_coeff(mut self, coeff: f64) -> Self {
        self.layers.iter_mut().for_each(|l| l.sn_coeff = coeff);
        self
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = self.activation.apply(g.tape, h)?;
                h = g.dropout(h, self.dropout)?;
            }
        }
        Ok(h)
    }

    pub fn power_iterate(&mut self, store: &ParamStore, iters: usize) {
        for l in &mut self.layers {
            l.spectral_normalize(store, iters);
        }
    }
}

/// Layer sizes and regularization of a GEM model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub backbone_hidden: Vec<usize>,
    pub activation: Activation,
    /// Hidden width of the energy head, gate net, router and each evidential head.
    pub aux_hidden: usize,
    /// Dropout in the backbone and evidential heads.
    pub dropout: f64,
    /// Dropout in the energy head, gate net and router.
    pub internal_dropout: f64,
    /// Per-layer Lipschitz target of the spectrally normalized backbone.
    pub sn_coeff: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::toy2d()
    }
}

impl ArchConfig {
    /// 2→64→64→16 tanh backbone for two-dimensional toys.
    pub fn toy2d() -> Self {
        Self {
            input_dim: 2,
            classes: 2,
            feature_dim: 16,
            backbone_hidden: vec![64, 64],
            activation: Activation::Tanh,
            aux_hidden: 32,
            dropout: 0.05,
            internal_dropout: 0.02,
            sn_coeff: 3.0,
        }
    }

    /// 784→256→128→32 relu backbone for the MNIST subset.
    pub fn mnist() -> Self {
        Self {
            input_dim: 784,
            classes: 10,
            feature_dim: 32,
            backbone_hidden: vec![256, 128],
            activation: Activation::Relu,
            aux_hidden: 32,
            dropout: 0.05,
            internal_dropout: 0.02,
            sn_coeff: 1.0,
        }
    }
}

/// Every network of a GEM model plus their shared parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemNetworks {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub backbone: Mlp,
    pub heads: Vec<Mlp>,
    pub energy: Mlp,
    pub gate: Mlp,
    pub router: Mlp,
}

impl GemNetworks {
    /// Builds all networks; every component initializes from its own
    /// substream of `seed`, so the head count does not perturb the backbone.
    pub fn new(arch: &ArchConfig, heads: usize, sn: bool, seed: u64) -> Result<Self> {
        if heads == 0 {
            return Err(contract("at least one evidential head is required"));
        }
        if arch.classes < 2 {
            return Err(contract("at least two classes are required"));
        }
        let mut store = ParamStore::default();
        let d = arch.feature_dim;
        let h = arch.aux_hidden;
        let act = arch.activation;
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.backbone_hidden);
        dims.push(d);

        let mut rng = substream(seed, "init/backbone");
        let mut backbone = Mlp::new(&mut store, "backbone", &dims, act, arch.dropout, sn, &mut rng).with_sn_coeff(arch.sn_coeff);
        backbone.power_iterate(&store, 10);
        let heads = (0..heads)
            .map(|k| {
                let mut rng = substream(seed, &format!("init/head{k}"));
                Mlp::new(&mut store, &format!("head{k}"), &[d, h, arch.classes], act, arch.dropout, false, &mut rng)
            })
            .collect::<Vec<_>>();
        let mut rng = substream(seed, "init/energy");
        let energy = Mlp::new(&mut store, "energy", &[d, h, 1], act, arch.internal_dropout, false, &mut rng);
        let mut rng = substream(seed, "init/gate");
        let gate = Mlp::new(&mut store, "gate", &[d + 1, h, arch.classes], act, arch.internal_dropout, false, &mut rng);
        let mut rng = substream(seed, "init/router");
        let router = Mlp::new(&mut store, "router", &[d + 1, h, heads.len()], act, arch.internal_dropout, false, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            store,
            backbone,
            heads,
            energy,
            gate,
            router,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// One power-iteration step on every spectrally normalized layer.
    pub fn power_iterate(&mut self, iters: usize) {
        let store = &self.store;
        self.backbone.power_iterate(store, iters);
    }

    /// `z = f_θ(x)`.
    pub fn backbone_forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        self.backbone.forward(g, x)
    }

    /// Raw logits of head `k` divided by `temperature`.
    pub fn head_logits(&self, g: &mut Graph<'_>, z: Var, k: usize, temperature: f64) -> Result<Var> {
        let head = self.heads.get(k).ok_or_else(|| contract(format!("no head {k}")))?;
        let u = head.forward(g, z)?;
        if temperature == 1.0 {
            Ok(u)
        } else {
            g.tape.scale(u, 1.0 / temperature)
        }
    }

    /// Energy head output `N×1`; higher means less representation support.
    /// With `tanh`, the pre-activation is halved when `desaturate` is set.
    pub fn energy_forward(&self, g: &mut Graph<'_>, z: Var, tanh: bool, desaturate: bool) -> Result<Var> {
        let e = self.energy.forward(g, z)?;
        if !tanh {
            return Ok(e);
        }
        let e = if desaturate { g.tape.scale(e, 0.5)? } else { e };
        g.tape.tanh(e)
    }

    /// Per-class gates `s = s_min + (s_max − s_min)·σ(G([z, ŝ]))`.
    pub fn gate_forward(&self, g: &mut Graph<'_>, z: Var, s_hat: Var, bounds: (f64, f64)) -> Result<Var> {
        let (lo, hi) = bounds;
        let input = g.tape.concat_cols(&[z, s_hat])?;
        let raw = self.gate.forward(g, input)?;
        let sq = g.tape.sigmoid(raw)?;
        let scaled = g.tape.scale(sq, hi - lo)?;
        let s = g.tape.add_scalar(scaled, lo)?;
        // σ saturating to exactly 0 or 1 in floating point must not leak past the bounds
        g.tape.clip(s, lo, hi)
    }

    /// Router weights `π̃ = softmax(h_ω([z, ŝ]))`, `N×K`.
    pub fn router_forward(&self, g: &mut Graph<'_>, z: Var, s_hat: Var) -> Result<Var> {
        let input = g.tape.concat_cols(&[z, s_hat])?;
        let raw = self.router.forward(g, input)?;
        g.tape.softmax_rows(raw)
    }
}
