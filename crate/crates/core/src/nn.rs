//! Parameter storage and the small set of layers the models are built from.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var, GATHER_ZERO};
use crate::error::{bail, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Named parameter tensors, each flagged trainable or frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Register a tensor. Panics on duplicate names; layer construction is
    /// programmer-controlled so a duplicate is a bug.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable: true,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries
            .iter_mut()
            .for_each(|e| e.trainable = trainable);
    }

    /// Set the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Overwrite values from `other` for every name both stores share with
    /// identical shapes; returns how many tensors were copied.
    pub fn copy_matching(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            if let Some(t) = other.by_name(&e.name) {
                if t.shape() == e.tensor.shape() {
                    e.tensor = t.clone();
                    n += 1;
                }
            }
        }
        n
    }

    /// Replace every tensor from a name → tensor map. Every parameter must be
    /// present with the right shape.
    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for e in &mut self.entries {
            let Some(t) = tensors.get(&e.name) else {
                bail!(Config, "missing tensor `{}`", e.name);
            };
            if t.shape() != e.tensor.shape() {
                bail!(
                    Config,
                    "tensor `{}` has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.tensor.shape()
                );
            }
            e.tensor = t.clone();
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values of every parameter
    /// whose name starts with `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> [u8; 32] {
        self.hash_where(|name| name.starts_with(prefix))
    }

    /// Like [`hash_prefix`](Self::hash_prefix) over the names selected by `keep`.
    pub fn hash_where(&self, keep: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| keep(&e.name)) {
            h.update(e.name.as_bytes());
            h.update((e.tensor.rows as u64).to_le_bytes());
            h.update((e.tensor.cols as u64).to_le_bytes());
            for v in &e.tensor.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Weight initializers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
}

pub fn init_tensor(rows: usize, cols: usize, init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(rows, cols),
        Init::Const(v) => Tensor::full(rows, cols, v),
        Init::Normal(std) => Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| std * rng.normal()).collect(),
        ),
        Init::FanIn(gain) => {
            let std = gain / libm::sqrt(rows.max(1) as f64);
            Tensor::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| std * rng.normal()).collect(),
            )
        }
    }
}

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            &alloc::format!("{name}.weight"),
            init_tensor(input, output, init, rng),
        );
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(1, output));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(&alloc::format!("{name}.gamma"), Tensor::full(1, width, 1.0)),
            beta: store.add(&alloc::format!("{name}.beta"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        out_init: Init,
        rng: &mut Rng,
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            fc1: Linear::new(
                store,
                &alloc::format!("{name}.fc1"),
                input,
                hidden,
                Init::FanIn(1.0),
                rng,
            ),
            fc2: Linear::new(
                store,
                &alloc::format!("{name}.fc2"),
                hidden,
                output,
                out_init,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        out_init: Init,
        rng: &mut Rng,
    ) -> Self {
        let p = |s: &str| alloc::format!("{name}.{s}");
        Self {
            q: Linear::new(store, &p("q"), width, width, Init::FanIn(1.0), rng),
            k: Linear::new(store, &p("k"), width, width, Init::FanIn(1.0), rng),
            v: Linear::new(store, &p("v"), width, width, Init::FanIn(1.0), rng),
            o: Linear::new(store, &p("o"), width, width, out_init, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, context: Var) -> Var {
        let q = self.q.forward(g, store, queries);
        let k = self.k.forward(g, store, context);
        let v = self.v.forward(g, store, context);
        let a = g.attention(q, k, v, self.heads);
        self.o.forward(g, store, a)
    }
}

/// Square-kernel 2D convolution over `(h*w) x c` feature maps with zero
/// padding `kernel / 2`. Weights are stored `(kernel*kernel*in) x out`,
/// ordered (ky, kx, channel).
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub input: usize,
    pub output: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = kernel * kernel * input;
        let weight = store.add(
            &alloc::format!("{name}.weight"),
            init_tensor(fan_in, output, init, rng),
        );
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(1, output));
        Self {
            weight,
            bias,
            kernel,
            stride,
            input,
            output,
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (height + 2 * pad - self.kernel) / self.stride + 1,
            (width + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    /// Returns the output node and its `(height, width)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        height: usize,
        width: usize,
    ) -> (Var, usize, usize) {
        let (ho, wo) = self.output_size(height, width);
        let cols = im2col_index(height, width, self.input, self.kernel, self.stride);
        let patches = g.gather(x, cols, ho * wo, self.kernel * self.kernel * self.input);
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(patches, w);
        (g.add_row(y, b), ho, wo)
    }
}

/// Gather indices for an im2col expansion with zero padding `kernel / 2`.
pub fn im2col_index(
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
) -> Vec<usize> {
    let pad = (kernel / 2) as isize;
    let ho = (height + 2 * pad as usize - kernel) / stride + 1;
    let wo = (width + 2 * pad as usize - kernel) / stride + 1;
    let mut index = Vec::with_capacity(ho * wo * kernel * kernel * channels);
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..kernel {
                let y = (oy * stride + ky) as isize - pad;
                for kx in 0..kernel {
                    let x = (ox * stride + kx) as isize - pad;
                    if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                        index.extend(core::iter::repeat_n(GATHER_ZERO, channels));
                    } else {
                        let base = (y as usize * width + x as usize) * channels;
                        index.extend(base..base + channels);
                    }
                }
            }
        }
    }
    index
}

/// Pre-norm transformer encoder block: `x + Attn(LN x)`, then `x + MLP(LN x)`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        out_init: Init,
        rng: &mut Rng,
    ) -> Self {
        let p = |s: &str| alloc::format!("{name}.{s}");
        Self {
            norm1: LayerNorm::new(store, &p("norm1"), width),
            attn: MultiHeadAttention::new(store, &p("attn"), width, heads, out_init, rng),
            norm2: LayerNorm::new(store, &p("norm2"), width),
            mlp: Mlp::new(
                store,
                &p("mlp"),
                (width, width * mlp_ratio, width),
                out_init,
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.norm1.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, store, x);
        let m = self.mlp.forward(g, store, h);
        g.add(x, m)
    }
}
