use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the toy decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// MLP hidden width as a multiple of the model width.
    pub hidden_mult: usize,
    /// Base vocabulary, before the reserved sink and gist ids.
    pub vocab: usize,
    pub rope_theta: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            head_dim: 32,
            hidden_mult: 2,
            vocab: 64,
            rope_theta: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden_mult * self.d_model()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.hidden_mult == 0 || self.vocab == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig("head_dim must be even for rotary embeddings".into()));
        }
        if self.rope_theta <= 0.0 {
            return Err(Error::InvalidConfig("rope_theta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub mlp_norm: Array1<f64>,
    pub w_gate: Array2<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

/// All trainable tensors. Also used as the gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// `[vocab + sinks + 1, d_model]`; sink rows follow the base vocabulary, the shared gist row is last.
    pub embed: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array1<f64>,
    /// `[d_model, vocab + sinks + 1]`.
    pub lm_head: Array2<f64>,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub decay: bool,
}

impl Params {
    pub fn init(cfg: &ModelConfig, total_vocab: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dm = cfg.d_model();
        let hid = cfg.hidden();
        let std = 0.02;
        let out_std = std / (2.0 * cfg.layers.max(1) as f64).sqrt();
        let mut normal = |rows: usize, cols: usize, sd: f64| {
            let dist = Normal::new(0.0, sd).unwrap();
            Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
        };
        let embed = normal(total_vocab, dm, std);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                attn_norm: Array1::ones(dm),
                wq: normal(dm, dm, std),
                wk: normal(dm, dm, std),
                wv: normal(dm, dm, std),
                wo: normal(dm, dm, out_std),
                mlp_norm: Array1::ones(dm),
                w_gate: normal(dm, hid, std),
                w_up: normal(dm, hid, std),
                w_down: normal(hid, dm, out_std),
            })
            .collect();
        let lm_head = normal(dm, total_vocab, std);
        Self {
            embed,
            layers,
            final_norm: Array1::ones(dm),
            lm_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn m<'a>(name: String, a: &'a Array2<f64>, decay: bool) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
                decay,
            }
        }
        fn v<'a>(name: String, a: &'a Array1<f64>) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
                decay: false,
            }
        }
        let mut out = vec![m("embed".into(), &self.embed, true)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(v(format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push(m(format!("layers.{i}.wq"), &l.wq, true));
            out.push(m(format!("layers.{i}.wk"), &l.wk, true));
            out.push(m(format!("layers.{i}.wv"), &l.wv, true));
            out.push(m(format!("layers.{i}.wo"), &l.wo, true));
            out.push(v(format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push(m(format!("layers.{i}.w_gate"), &l.w_gate, true));
            out.push(m(format!("layers.{i}.w_up"), &l.w_up, true));
            out.push(m(format!("layers.{i}.w_down"), &l.w_down, true));
        }
        out.push(v("final_norm".into(), &self.final_norm));
        out.push(m("lm_head".into(), &self.lm_head, true));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn m(name: String, a: &mut Array2<f64>, decay: bool) -> TensorMut<'_> {
            TensorMut {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice_mut().expect("standard layout"),
                decay,
            }
        }
        fn v(name: String, a: &mut Array1<f64>) -> TensorMut<'_> {
            TensorMut {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice_mut().expect("standard layout"),
                decay: false,
            }
        }
        let mut out = vec![m("embed".into(), &mut self.embed, true)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(v(format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push(m(format!("layers.{i}.wq"), &mut l.wq, true));
            out.push(m(format!("layers.{i}.wk"), &mut l.wk, true));
            out.push(m(format!("layers.{i}.wv"), &mut l.wv, true));
            out.push(m(format!("layers.{i}.wo"), &mut l.wo, true));
            out.push(v(format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            out.push(m(format!("layers.{i}.w_gate"), &mut l.w_gate, true));
            out.push(m(format!("layers.{i}.w_up"), &mut l.w_up, true));
            out.push(m(format!("layers.{i}.w_down"), &mut l.w_down, true));
        }
        out.push(v("final_norm".into(), &mut self.final_norm));
        out.push(m("lm_head".into(), &mut self.lm_head, true));
        out
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}
