use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterCache};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rng};
use crate::train::{Dropout, Param};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Number of base parameters per block, in [`Block::params`] order.
pub(crate) const BLOCK_PARAMS: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyTransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
}

impl Default for TinyTransformerConfig {
    fn default() -> Self {
        TinyTransformerConfig {
            layers: 2,
            d_model: 32,
            heads: 4,
            vocab: 16,
            max_len: 16,
            ffn_mult: 4,
        }
    }
}

impl TinyTransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.layers == 0 || c.d_model == 0 || c.heads == 0 || c.vocab == 0 || c.max_len == 0 || c.ffn_mult == 0 {
            return Err(Error::invalid("model dimensions must all be positive"));
        }
        if c.d_model % c.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                c.d_model, c.heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Closed-form base parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff());
        let block = 4 * d + 4 * d * d + 2 * d * f + f + d;
        self.vocab * d + self.max_len * d + self.layers * block + 2 * d + d * self.vocab
    }
}

/// The four attention projections that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
}

impl ProjKind {
    pub const ALL: [ProjKind; 4] = [ProjKind::Q, ProjKind::K, ProjKind::V, ProjKind::O];

    pub fn as_str(self) -> &'static str {
        match self {
            ProjKind::Q => "Q",
            ProjKind::K => "K",
            ProjKind::V => "V",
            ProjKind::O => "O",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for ProjKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Q" | "q" => Ok(ProjKind::Q),
            "K" | "k" => Ok(ProjKind::K),
            "V" | "v" => Ok(ProjKind::V),
            "O" | "o" => Ok(ProjKind::O),
            _ => Err(Error::invalid(format!("unknown matrix name `{s}` (Q, K, V, O)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: Param::vector(&vec![1.0; d], true),
            bias: Param::vector(&vec![0.0; d], true),
        }
    }

    #[cfg(test)]
    pub(crate) fn forward_for_test(&self, x: &Matrix) -> Matrix {
        self.forward(x).0
    }

    fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let d = x.cols();
        let (g, b) = (self.gain.values(), self.bias.values());
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(s);
            for (j, h) in xhat.row_mut(i).iter_mut().enumerate() {
                *h = (row[j] - mean) * s;
            }
            let hrow = xhat.row(i).to_vec();
            for (j, out) in y.row_mut(i).iter_mut().enumerate() {
                *out = hrow[j] * g[j] + b[j];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, c: &LnCache, dy: &Matrix) -> (Matrix, Matrix, Matrix) {
        let d = dy.cols();
        let g = self.gain.values();
        let mut dx = Matrix::zeros(dy.rows(), d);
        for i in 0..dy.rows() {
            let (dyr, xh) = (dy.row(i), c.xhat.row(i));
            let dxhat: Vec<f64> = dyr.iter().zip(g).map(|(a, b)| a * b).collect();
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = c.inv_std[i] * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
        let dgain = if self.gain.trainable {
            Matrix::row_vector(&dy.hadamard(&c.xhat).expect("same shape").col_sums())
        } else {
            self.gain.zeros_like()
        };
        let dbias = if self.bias.trainable {
            Matrix::row_vector(&dy.col_sums())
        } else {
            self.bias.zeros_like()
        };
        (dx, dgain, dbias)
    }
}

fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

fn add_row_bias(m: &mut Matrix, bias: &[f64]) {
    for i in 0..m.rows() {
        m.row_mut(i).iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

/// Weight gradient `inputᵀ · dy`, or zeros for a frozen weight.
fn weight_grad(p: &Param, input: &Matrix, dy: &Matrix) -> Result<Matrix> {
    if p.trainable {
        input.t_matmul(dy)
    } else {
        Ok(p.zeros_like())
    }
}

/// Causal multi-head attention. Returns the concatenated head outputs and
/// the attention probabilities of each head.
fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> (Matrix, Vec<Matrix>) {
    let (l, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(l, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * dh;
        let mut p = Matrix::zeros(l, l);
        for i in 0..l {
            let qi = &q.row(i)[off..off + dh];
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                let kj = &k.row(j)[off..off + dh];
                *r = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*r);
            }
            let mut sum = 0.0;
            for r in row.iter_mut().take(i + 1) {
                *r = (*r - max).exp();
                sum += *r;
            }
            row.iter_mut().take(i + 1).for_each(|r| *r /= sum);
        }
        for i in 0..l {
            for j in 0..=i {
                let pij = p.get(i, j);
                let vj = &v.row(j)[off..off + dh];
                let orow = &mut out.row_mut(i)[off..off + dh];
                orow.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
            }
        }
        probs.push(p);
    }
    (out, probs)
}

fn attention_backward(
    dout: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
) -> (Matrix, Matrix, Matrix) {
    let (l, d) = q.shape();
    let heads = probs.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (Matrix::zeros(l, d), Matrix::zeros(l, d), Matrix::zeros(l, d));
    for (h, p) in probs.iter().enumerate() {
        let off = h * dh;
        for i in 0..l {
            let doi = &dout.row(i)[off..off + dh];
            let dp: Vec<f64> = (0..=i)
                .map(|j| doi.iter().zip(&v.row(j)[off..off + dh]).map(|(a, b)| a * b).sum())
                .collect();
            let dot: f64 = (0..=i).map(|j| p.get(i, j) * dp[j]).sum();
            for j in 0..=i {
                let pij = p.get(i, j);
                let ds = pij * (dp[j] - dot) * scale;
                for c in off..off + dh {
                    dv.data_mut()[j * d + c] += pij * doi[c - off];
                    dq.data_mut()[i * d + c] += ds * k.get(j, c);
                    dk.data_mut()[j * d + c] += ds * q.get(i, c);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// One pre-norm decoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    /// Q, K, V, O projections, each d_model × d_model.
    pub proj: [Param; 4],
    pub ln2: LayerNorm,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    /// Adapter in parallel to each projection, indexed like `proj`.
    pub adapters: [Option<Adapter>; 4],
}

struct ProjCache {
    adapter: AdapterCache,
    mask: Option<Matrix>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    att: Matrix,
    proj: [Option<ProjCache>; 4],
    ln2: LnCache,
    h2: Matrix,
    z: Matrix,
    a: Matrix,
}

impl Block {
    fn init(rng: &Rng, d: usize, f: usize) -> Self {
        let lin = |label: &str, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Param::new(rng.split(label).uniform_matrix(rows, cols, bound), true)
        };
        Block {
            ln1: LayerNorm::new(d),
            proj: [lin("Q", d, d), lin("K", d, d), lin("V", d, d), lin("O", d, d)],
            ln2: LayerNorm::new(d),
            w1: lin("ffn.w1", d, f),
            b1: Param::vector(&vec![0.0; f], true),
            w2: lin("ffn.w2", f, d),
            b2: Param::vector(&vec![0.0; d], true),
            adapters: [None, None, None, None],
        }
    }

    pub(crate) fn params(&self) -> [(&'static str, &Param); BLOCK_PARAMS] {
        [
            ("ln1.gain", &self.ln1.gain),
            ("ln1.bias", &self.ln1.bias),
            ("Q", &self.proj[0]),
            ("K", &self.proj[1]),
            ("V", &self.proj[2]),
            ("O", &self.proj[3]),
            ("ln2.gain", &self.ln2.gain),
            ("ln2.bias", &self.ln2.bias),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    /// Base parameters in [`Block::params`] order, and adapter parameters.
    fn split_params_mut(&mut self) -> (Vec<&mut Param>, Vec<&mut Param>) {
        let Block {
            ln1,
            proj,
            ln2,
            w1,
            b1,
            w2,
            b2,
            adapters,
        } = self;
        let [q, k, v, o] = proj;
        let base = vec![
            &mut ln1.gain,
            &mut ln1.bias,
            q,
            k,
            v,
            o,
            &mut ln2.gain,
            &mut ln2.bias,
            w1,
            b1,
            w2,
            b2,
        ];
        let adapter = adapters.iter_mut().flatten().flat_map(Adapter::params_mut).collect();
        (base, adapter)
    }

    fn project(
        &self,
        kind: usize,
        input: &Matrix,
        dropout: &mut Option<Dropout>,
    ) -> Result<(Matrix, Option<ProjCache>)> {
        let mut out = input.matmul(&self.proj[kind].value)?;
        let Some(adapter) = &self.adapters[kind] else {
            return Ok((out, None));
        };
        let mask = dropout.as_mut().map(|d| d.mask(input.rows(), input.cols()));
        let x_in = match &mask {
            Some(m) => input.hadamard(m)?,
            None => input.clone(),
        };
        let (branch, cache) = adapter.branch_train(&x_in)?;
        out.add_assign(&branch)?;
        Ok((out, Some(ProjCache { adapter: cache, mask })))
    }

    /// Gradient of a projection's input, plus the base-weight gradient and
    /// the adapter's gradients.
    fn project_backward(
        &self,
        kind: usize,
        input: &Matrix,
        cache: &Option<ProjCache>,
        dy: &Matrix,
    ) -> Result<(Matrix, Matrix, Vec<Matrix>)> {
        let p = &self.proj[kind];
        let dw = weight_grad(p, input, dy)?;
        let mut dx = dy.matmul_t(&p.value)?;
        let mut adapter_grads = Vec::new();
        if let (Some(adapter), Some(c)) = (&self.adapters[kind], cache) {
            let (dx_in, grads) = adapter.branch_backward(&c.adapter, dy)?;
            match &c.mask {
                Some(m) => dx.add_assign(&dx_in.hadamard(m)?)?,
                None => dx.add_assign(&dx_in)?,
            }
            adapter_grads = grads;
        }
        Ok((dx, dw, adapter_grads))
    }

    fn forward(&self, x: &Matrix, heads: usize, dropout: &mut Option<Dropout>) -> Result<(Matrix, BlockCache)> {
        let (h1, ln1) = self.ln1.forward(x);
        let (q, cq) = self.project(0, &h1, dropout)?;
        let (k, ck) = self.project(1, &h1, dropout)?;
        let (v, cv) = self.project(2, &h1, dropout)?;
        let (att, probs) = attention_forward(&q, &k, &v, heads);
        let (o, co) = self.project(3, &att, dropout)?;
        let x2 = x.add(&o)?;
        let (h2, ln2) = self.ln2.forward(&x2);
        let mut z = h2.matmul(&self.w1.value)?;
        add_row_bias(&mut z, self.b1.values());
        let a = z.map(gelu);
        let mut f = a.matmul(&self.w2.value)?;
        add_row_bias(&mut f, self.b2.values());
        let x3 = x2.add(&f)?;
        let cache = BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            att,
            proj: [cq, ck, cv, co],
            ln2,
            h2,
            z,
            a,
        };
        Ok((x3, cache))
    }

    /// Returns the input gradient, the 12 base gradients in
    /// [`Block::params`] order, and the adapter gradients in Q, K, V, O order.
    fn backward(&self, c: &BlockCache, dx3: &Matrix) -> Result<(Matrix, Vec<Matrix>, Vec<Matrix>)> {
        let db2 = if self.b2.trainable {
            Matrix::row_vector(&dx3.col_sums())
        } else {
            self.b2.zeros_like()
        };
        let dw2 = weight_grad(&self.w2, &c.a, dx3)?;
        let da = dx3.matmul_t(&self.w2.value)?;
        let mut dz = da;
        dz.data_mut()
            .iter_mut()
            .zip(c.z.data())
            .for_each(|(g, &z)| *g *= gelu_grad(z));
        let db1 = if self.b1.trainable {
            Matrix::row_vector(&dz.col_sums())
        } else {
            self.b1.zeros_like()
        };
        let dw1 = weight_grad(&self.w1, &c.h2, &dz)?;
        let dh2 = dz.matmul_t(&self.w1.value)?;
        let (dx2_ln, dg2, dbeta2) = self.ln2.backward(&c.ln2, &dh2);
        let mut dx2 = dx3.add(&dx2_ln)?;

        let (datt, dwo, ad_o) = self.project_backward(3, &c.att, &c.proj[3], &dx2)?;
        let (dq, dk, dv) = attention_backward(&datt, &c.q, &c.k, &c.v, &c.probs);
        let (dh_q, dwq, ad_q) = self.project_backward(0, &c.h1, &c.proj[0], &dq)?;
        let (dh_k, dwk, ad_k) = self.project_backward(1, &c.h1, &c.proj[1], &dk)?;
        let (dh_v, dwv, ad_v) = self.project_backward(2, &c.h1, &c.proj[2], &dv)?;
        let mut dh1 = dh_q;
        dh1.add_assign(&dh_k)?;
        dh1.add_assign(&dh_v)?;
        let (dx_ln, dg1, dbeta1) = self.ln1.backward(&c.ln1, &dh1);
        dx2.add_assign(&dx_ln)?;

        let base = vec![dg1, dbeta1, dwq, dwk, dwv, dwo, dg2, dbeta2, dw1, db1, dw2, db2];
        let adapters = [ad_q, ad_k, ad_v, ad_o].into_iter().flatten().collect();
        Ok((dx2, base, adapters))
    }
}

/// Decoder-only pre-norm transformer with learned positions and an untied
/// output head.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer {
    pub config: TinyTransformerConfig,
    pub embed: Param,
    pub pos: Param,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: Param,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    hf: Matrix,
}

pub fn build_model(config: &TinyTransformerConfig, rng: &Rng) -> Result<TinyTransformer> {
    config.validate()?;
    let d = config.d_model;
    let blocks = (0..config.layers)
        .map(|l| Block::init(&rng.split("layer").split_index(l as u64), d, config.d_ff()))
        .collect();
    Ok(TinyTransformer {
        config: config.clone(),
        embed: Param::new(rng.split("embed").uniform_matrix(config.vocab, d, 3f64.sqrt()), true),
        pos: Param::new(rng.split("pos").uniform_matrix(config.max_len, d, 0.2), true),
        blocks,
        ln_f: LayerNorm::new(d),
        head: Param::new(
            rng.split("head").uniform_matrix(d, config.vocab, 1.0 / (d as f64).sqrt()),
            true,
        ),
    })
}

impl TinyTransformer {
    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn base_param_count(&self) -> usize {
        self.base_params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Base parameters in canonical order: embed, pos, each block, ln_f, head.
    pub fn base_params(&self) -> Vec<(String, &Param)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.params().into_iter().map(|(n, p)| (format!("layer.{l}.{n}"), p)));
        }
        out.push(("ln_f.gain".into(), &self.ln_f.gain));
        out.push(("ln_f.bias".into(), &self.ln_f.bias));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn base_params_mut(&mut self) -> Vec<&mut Param> {
        let n = 2 + BLOCK_PARAMS * self.config.layers + 3;
        let mut all = self.all_params_mut();
        all.truncate(n);
        all
    }

    /// Base parameters followed by adapter parameters.
    pub(crate) fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let mut base = vec![&mut self.embed, &mut self.pos];
        let mut adapters = Vec::new();
        for b in &mut self.blocks {
            let (p, a) = b.split_params_mut();
            base.extend(p);
            adapters.extend(a);
        }
        base.push(&mut self.ln_f.gain);
        base.push(&mut self.ln_f.bias);
        base.push(&mut self.head);
        base.extend(adapters);
        base
    }

    /// Attached adapters in layer order, then Q, K, V, O.
    pub fn adapters(&self) -> Vec<(usize, ProjKind, &Adapter)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            for kind in ProjKind::ALL {
                if let Some(a) = &b.adapters[kind.index()] {
                    out.push((l, kind, a));
                }
            }
        }
        out
    }

    pub fn adapter(&self, layer: usize, kind: ProjKind) -> Option<&Adapter> {
        self.blocks.get(layer)?.adapters[kind.index()].as_ref()
    }

    pub fn adapter_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (l, kind, a) in self.adapters() {
            let prefix = adapter_prefix(l, kind);
            out.extend(a.named_params().into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)));
        }
        out
    }

    pub fn adapter_params_mut(&mut self) -> Vec<&mut Param> {
        let n = 2 + BLOCK_PARAMS * self.config.layers + 3;
        self.all_params_mut().into_iter().skip(n).collect()
    }

    pub fn set_base_trainable(&mut self, trainable: bool) {
        for p in self.base_params_mut() {
            p.trainable = trainable;
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::invalid(format!("token {t} outside vocab {}", self.config.vocab)));
        }
        Ok(())
    }

    /// Hidden state entering block `upto` (the final hidden state when
    /// `upto == layers`), without dropout.
    pub fn hidden(&self, tokens: &[usize], upto: usize) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let mut x = self.embed_tokens(tokens);
        for b in self.blocks.iter().take(upto) {
            x = b.forward(&x, self.config.heads, &mut None)?.0;
        }
        Ok(x)
    }

    /// Input of the attention projections in block `layer` (after ln1).
    pub fn attention_input(&self, tokens: &[usize], layer: usize) -> Result<Matrix> {
        let x = self.hidden(tokens, layer)?;
        let b = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} out of range")))?;
        Ok(b.ln1.forward(&x).0)
    }

    fn embed_tokens(&self, tokens: &[usize]) -> Matrix {
        let d = self.d_model();
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let (e, p) = (self.embed.value.row(t), self.pos.value.row(i));
            x.row_mut(i).iter_mut().enumerate().for_each(|(j, v)| *v = e[j] + p[j]);
        }
        x
    }

    /// Logits for every position, `len × vocab`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Matrix> {
        Ok(self.forward_train(tokens, None)?.0)
    }

    pub fn forward_train(&self, tokens: &[usize], mut dropout: Option<Dropout>) -> Result<(Matrix, ForwardCache)> {
        self.check_tokens(tokens)?;
        let mut x = self.embed_tokens(tokens);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(&x, self.config.heads, &mut dropout)?;
            caches.push(c);
            x = y;
        }
        let (hf, ln_f) = self.ln_f.forward(&x);
        let logits = hf.matmul(&self.head.value)?;
        Ok((
            logits,
            ForwardCache {
                tokens: tokens.to_vec(),
                blocks: caches,
                ln_f,
                hf,
            },
        ))
    }

    /// Gradients for `base_params` followed by `adapter_params`, given the
    /// gradient of the loss with respect to the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<Vec<Matrix>> {
        let dhead = weight_grad(&self.head, &cache.hf, dlogits)?;
        let dhf = dlogits.matmul_t(&self.head.value)?;
        let (mut dx, dgf, dbf) = self.ln_f.backward(&cache.ln_f, &dhf);
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dprev, base, adapters) = b.backward(c, &dx)?;
            block_grads.push((base, adapters));
            dx = dprev;
        }
        block_grads.reverse();

        let d = self.d_model();
        let mut dembed = self.embed.zeros_like();
        let mut dpos = self.pos.zeros_like();
        for (i, &t) in cache.tokens.iter().enumerate() {
            let g = dx.row(i);
            if self.embed.trainable {
                dembed.row_mut(t).iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if self.pos.trainable {
                dpos.row_mut(i)[..d].copy_from_slice(g);
            }
        }
        let mut grads = vec![dembed, dpos];
        let mut adapter_grads = Vec::new();
        for (base, adapters) in block_grads {
            grads.extend(base);
            adapter_grads.extend(adapters);
        }
        grads.extend([dgf, dbf, dhead]);
        grads.extend(adapter_grads);
        Ok(grads)
    }

    /// Per layer, the input of the Q/K/V projections and of the O projection
    /// on a plain forward pass.
    pub fn projection_inputs(&self, tokens: &[usize]) -> Result<Vec<[Matrix; 2]>> {
        let (_, cache) = self.forward_train(tokens, None)?;
        Ok(cache.blocks.into_iter().map(|c| [c.h1, c.att]).collect())
    }

    /// Replaces every mergeable adapter by its folded weight.
    pub fn merged(&self) -> Result<TinyTransformer> {
        let mut out = self.clone();
        for b in &mut out.blocks {
            for i in 0..4 {
                if let Some(a) = b.adapters[i].take() {
                    b.proj[i].value = a.merge(&b.proj[i].value)?;
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn adapter_prefix(layer: usize, kind: ProjKind) -> String {
    format!("adapter.{layer}.{}", kind.as_str())
}
