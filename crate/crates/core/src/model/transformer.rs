use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Depth, ModelConfig, ModelError, ModuleKind, ParameterAddress, Tokenizer};
use crate::autodiff::{Tape, Var, LN_EPS};
use crate::locator::GranularityMask;
use crate::metrics::GenderProbe;
use crate::tensor::{dot, softmax_vec, Tensor};

/// Tensors per block: ln gain, ln bias, then weight and bias for each of the
/// six modules in [`ModuleKind::ALL`] order.
pub const PARAMS_PER_LAYER: usize = 14;

const INIT_STD: f64 = 0.02;

/// Which positions get logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogitsMode {
    #[default]
    All,
    /// Only the final position; the unembedding is skipped elsewhere.
    Last,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub trace: bool,
    /// A module-depth address whose weight and bias are zeroed for the pass.
    pub ablate: Option<ParameterAddress>,
    /// Record each block's input, attention and MLP contributions, and output.
    pub capture: bool,
    pub logits: LogitsMode,
}

/// Final-position residual states and their logit-lens distributions.
/// Entry 0 is the embedding output, entry `i` the output of block `i - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub hidden: Vec<Vec<f64>>,
    pub dists: Vec<Vec<f64>>,
}

impl LayerTrace {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    pub input: Tensor,
    pub attn: Tensor,
    pub mlp: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[positions, vocab]`, or `[1, vocab]` in [`LogitsMode::Last`].
    pub logits: Tensor,
    pub trace: Option<LayerTrace>,
    pub captures: Option<Vec<LayerCapture>>,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }
}

/// Handles into a forward pass recorded on a tape.
pub struct TapeForward {
    pub logits: Var,
    /// Residual stream after the embedding and after every block, `[n, d]`.
    pub residual: Vec<Var>,
    /// Per block `(attn contribution, mlp contribution)`.
    pub contributions: Vec<(Var, Var)>,
    /// One leaf per parameter tensor, in [`MiniTransformer::params`] order.
    pub params: Vec<Var>,
}

/// Which elements of one parameter tensor a mask covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Coverage {
    None,
    All,
    /// Sorted flat indices.
    Indices(Vec<usize>),
}

impl Coverage {
    pub fn count(&self, len: usize) -> usize {
        match self {
            Coverage::None => 0,
            Coverage::All => len,
            Coverage::Indices(ix) => ix.len(),
        }
    }

    pub fn contains(&self, i: usize) -> bool {
        match self {
            Coverage::None => false,
            Coverage::All => true,
            Coverage::Indices(ix) => ix.binary_search(&i).is_ok(),
        }
    }
}

/// A read-only view of the parameters behind one address.
#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    /// `None` for embeddings, the final norm, and the unembedding.
    pub address: Option<ParameterAddress>,
    /// `(parameter index, elements)` pairs; element slices are contiguous.
    pub slices: Vec<(usize, &'a [f64])>,
}

impl ParamView<'_> {
    pub fn len(&self) -> usize {
        self.slices.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder-only transformer with a parallel attention/MLP block:
/// `x + attn(ln(x)) + mlp(ln(x))`, learned positions, and an untied
/// unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniTransformer {
    config: ModelConfig,
    tokenizer: Tokenizer,
    params: Vec<Tensor>,
}

impl MiniTransformer {
    /// Randomly initialized from `config.seed`.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer) -> Result<Self, ModelError> {
        Self::check_pair(&config, &tokenizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt())
            .expect("valid std");
        let shapes = Self::shapes(&config);
        let mut params = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match Self::role(&config, i) {
                Role::Gain => vec![1.0; n],
                Role::Bias => vec![0.0; n],
                Role::Weight(ModuleKind::OProj | ModuleKind::FcOut) => {
                    (0..n).map(|_| resid.sample(&mut rng)).collect()
                }
                Role::Weight(_) | Role::Embedding => {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            params.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(MiniTransformer {
            config,
            tokenizer,
            params,
        })
    }

    /// Every parameter zero, so every next-token distribution is uniform.
    pub fn zeroed(config: ModelConfig, tokenizer: Tokenizer) -> Result<Self, ModelError> {
        Self::check_pair(&config, &tokenizer)?;
        let params = Self::shapes(&config).iter().map(|s| Tensor::zeros(s)).collect();
        Ok(MiniTransformer {
            config,
            tokenizer,
            params,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        tokenizer: Tokenizer,
        params: Vec<Tensor>,
    ) -> Result<Self, ModelError> {
        Self::check_pair(&config, &tokenizer)?;
        let shapes = Self::shapes(&config);
        if params.len() != shapes.len() {
            return Err(ModelError::Format(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(ModelError::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    Self::param_name(&config, i),
                    p.shape(),
                    s
                )));
            }
        }
        Ok(MiniTransformer {
            config,
            tokenizer,
            params,
        })
    }

    fn check_pair(config: &ModelConfig, tokenizer: &Tokenizer) -> Result<(), ModelError> {
        config.validate()?;
        if config.vocab_size != tokenizer.len() {
            return Err(ModelError::Config(format!(
                "vocab_size {} does not match the tokenizer's {} entries",
                config.vocab_size,
                tokenizer.len()
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    // -- layout --------------------------------------------------------------

    pub fn shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
        let d = c.d_model;
        let mut shapes = vec![vec![c.vocab_size, d], vec![c.context_len, d]];
        for _ in 0..c.n_layers {
            shapes.push(vec![d]);
            shapes.push(vec![d]);
            for m in ModuleKind::ALL {
                let (r, k) = c.module_shape(m);
                shapes.push(vec![r, k]);
                shapes.push(vec![r]);
            }
        }
        shapes.push(vec![d]);
        shapes.push(vec![d]);
        shapes.push(vec![c.vocab_size, d]);
        shapes
    }

    fn role(c: &ModelConfig, i: usize) -> Role {
        let tail = 2 + PARAMS_PER_LAYER * c.n_layers;
        if i < 2 || i == tail + 2 {
            Role::Embedding
        } else if i == tail {
            Role::Gain
        } else if i == tail + 1 {
            Role::Bias
        } else {
            match (i - 2) % PARAMS_PER_LAYER {
                0 => Role::Gain,
                1 => Role::Bias,
                k if k % 2 == 0 => Role::Weight(ModuleKind::ALL[(k - 2) / 2]),
                _ => Role::Bias,
            }
        }
    }

    pub fn param_name(c: &ModelConfig, i: usize) -> String {
        let tail = 2 + PARAMS_PER_LAYER * c.n_layers;
        match i {
            0 => "embed.tokens".into(),
            1 => "embed.positions".into(),
            _ if i == tail => "ln_f.gain".into(),
            _ if i == tail + 1 => "ln_f.bias".into(),
            _ if i == tail + 2 => "unembed".into(),
            _ => {
                let l = (i - 2) / PARAMS_PER_LAYER;
                match (i - 2) % PARAMS_PER_LAYER {
                    0 => format!("{l}.ln_1.gain"),
                    1 => format!("{l}.ln_1.bias"),
                    k => {
                        let m = ModuleKind::ALL[(k - 2) / 2];
                        let part = if k % 2 == 0 { "weight" } else { "bias" };
                        format!("{l}.{m}.{part}")
                    }
                }
            }
        }
    }

    fn layer_base(&self, layer: usize) -> usize {
        2 + PARAMS_PER_LAYER * layer
    }

    pub fn ln1_index(&self, layer: usize) -> usize {
        self.layer_base(layer)
    }

    pub fn weight_index(&self, layer: usize, m: ModuleKind) -> usize {
        self.layer_base(layer) + 2 + 2 * m.index()
    }

    pub fn bias_index(&self, layer: usize, m: ModuleKind) -> usize {
        self.weight_index(layer, m) + 1
    }

    pub fn ln_f_index(&self) -> usize {
        2 + PARAMS_PER_LAYER * self.config.n_layers
    }

    pub fn unembed_index(&self) -> usize {
        self.ln_f_index() + 2
    }

    /// Checks that `a` is well nested and within this model's bounds.
    pub fn check_address(&self, a: &ParameterAddress) -> Result<Depth, ModelError> {
        let depth = a.depth()?;
        if a.layer >= self.config.n_layers {
            return Err(ModelError::Address(format!(
                "{a}: layer {} out of range (model has {})",
                a.layer, self.config.n_layers
            )));
        }
        if let Some(m) = a.module {
            let (rows, cols) = self.config.module_shape(m);
            if let Some(r) = a.row {
                if r >= rows {
                    return Err(ModelError::Address(format!("{a}: row {r} out of range ({rows})")));
                }
            }
            if let Some(c) = a.column {
                if c >= cols {
                    return Err(ModelError::Address(format!(
                        "{a}: column {c} out of range ({cols})"
                    )));
                }
            }
        }
        Ok(depth)
    }

    // -- forward -------------------------------------------------------------

    pub fn encode(&self, text: &str) -> Result<Vec<u32>, ModelError> {
        self.tokenizer.encode(text)
    }

    /// Records a forward pass on `tape`. Parameters for which `trainable`
    /// returns true become differentiable leaves; the rest are constants.
    pub fn forward_on_tape<'p>(
        &'p self,
        tape: &Tape<'p>,
        ids: &[u32],
        opts: &ForwardOptions,
        trainable: &dyn Fn(usize) -> bool,
    ) -> Result<TapeForward, ModelError> {
        let c = &self.config;
        let n = ids.len();
        if n == 0 || n > c.context_len {
            return Err(ModelError::Contract(format!(
                "sequence length {n} outside 1..={}",
                c.context_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(ModelError::Contract(format!("token id {bad} outside the vocabulary")));
        }
        let ablated = match &opts.ablate {
            Some(a) => {
                if self.check_address(a)? != Depth::Module {
                    return Err(ModelError::Address(format!(
                        "ablation needs a module address, got {a}"
                    )));
                }
                let m = a.module.expect("module depth");
                Some((self.weight_index(a.layer, m), self.bias_index(a.layer, m)))
            }
            None => None,
        };

        let params: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| match ablated {
                Some((w, b)) if i == w || i == b => tape.constant(Tensor::zeros(t.shape())),
                _ if trainable(i) => tape.param(t),
                _ => tape.constant_ref(t),
            })
            .collect();

        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = tape.embedding(params[0], &idx)?;
        let pos = tape.rows(params[1], 0, n)?;
        let mut x = tape.add(tok, pos)?;
        let mut residual = vec![x];
        let mut contributions = Vec::with_capacity(c.n_layers);
        let p = |l: usize, m: ModuleKind| {
            (
                params[self.weight_index(l, m)],
                Some(params[self.bias_index(l, m)]),
            )
        };
        for l in 0..c.n_layers {
            let g = self.ln1_index(l);
            let h = tape.layer_norm(x, params[g], params[g + 1])?;

            let (wq, bq) = p(l, ModuleKind::QProj);
            let (wk, bk) = p(l, ModuleKind::KProj);
            let (wv, bv) = p(l, ModuleKind::VProj);
            let (wo, bo) = p(l, ModuleKind::OProj);
            let q = tape.linear(h, wq, bq)?;
            let k = tape.linear(h, wk, bk)?;
            let v = tape.linear(h, wv, bv)?;
            let att = tape.causal_attention(q, k, v, c.n_heads)?;
            let a = tape.linear(att, wo, bo)?;

            let (wi, bi) = p(l, ModuleKind::FcIn);
            let (wf, bf) = p(l, ModuleKind::FcOut);
            let inner = tape.linear(h, wi, bi)?;
            let inner = tape.gelu(inner);
            let m = tape.linear(inner, wf, bf)?;

            let xa = tape.add(x, a)?;
            x = tape.add(xa, m)?;
            residual.push(x);
            contributions.push((a, m));
        }
        let f = self.ln_f_index();
        let mut xf = tape.layer_norm(x, params[f], params[f + 1])?;
        if opts.logits == LogitsMode::Last {
            xf = tape.rows(xf, n - 1, 1)?;
        }
        let logits = tape.linear(xf, params[self.unembed_index()], None)?;
        Ok(TapeForward {
            logits,
            residual,
            contributions,
            params,
        })
    }

    pub fn forward(&self, ids: &[u32], opts: &ForwardOptions) -> Result<ForwardOutput, ModelError> {
        let tape = Tape::new();
        let out = self.forward_on_tape(&tape, ids, opts, &|_| false)?;
        let last = ids.len() - 1;
        let trace = if opts.trace {
            let mut hidden = Vec::with_capacity(out.residual.len());
            let mut dists = Vec::with_capacity(out.residual.len());
            for &r in &out.residual {
                let h = tape.value(r).row(last).to_vec();
                dists.push(self.logit_lens(&h)?);
                hidden.push(h);
            }
            Some(LayerTrace { hidden, dists })
        } else {
            None
        };
        let captures = opts.capture.then(|| {
            out.contributions
                .iter()
                .enumerate()
                .map(|(l, &(a, m))| LayerCapture {
                    input: tape.to_tensor(out.residual[l]),
                    attn: tape.to_tensor(a),
                    mlp: tape.to_tensor(m),
                    output: tape.to_tensor(out.residual[l + 1]),
                })
                .collect()
        });
        Ok(ForwardOutput {
            logits: tape.to_tensor(out.logits),
            trace,
            captures,
        })
    }

    /// Final norm, unembedding, softmax.
    pub fn logit_lens(&self, hidden: &[f64]) -> Result<Vec<f64>, ModelError> {
        let d = self.config.d_model;
        if hidden.len() != d {
            return Err(crate::tensor::TensorError::shape(
                "logit_lens",
                format!("hidden of {} entries, d_model {d}", hidden.len()),
            )
            .into());
        }
        let f = self.ln_f_index();
        let (gain, bias) = (self.params[f].data(), self.params[f + 1].data());
        let mean = hidden.iter().sum::<f64>() / d as f64;
        let var = hidden.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        let normed: Vec<f64> = (0..d)
            .map(|j| (hidden[j] - mean) * rs * gain[j] + bias[j])
            .collect();
        let u = &self.params[self.unembed_index()];
        let logits: Vec<f64> = (0..u.rows()).map(|v| dot(u.row(v), &normed)).collect();
        Ok(softmax_vec(&logits))
    }

    /// Next-token distribution after `ids`.
    pub fn next_token_dist(
        &self,
        ids: &[u32],
        ablate: Option<ParameterAddress>,
    ) -> Result<Vec<f64>, ModelError> {
        let out = self.forward(
            ids,
            &ForwardOptions {
                ablate,
                logits: LogitsMode::Last,
                ..Default::default()
            },
        )?;
        Ok(softmax_vec(out.last_logits()))
    }

    /// Raw next-token probabilities of "he" and "she" after `prompt`.
    pub fn gender_probe(&self, prompt: &str) -> Result<GenderProbe, ModelError> {
        let ids = self.encode(prompt)?;
        let p = self.next_token_dist(&ids, None)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(format!("next-token distribution after {prompt:?}")));
        }
        Ok(self.probe_from_dist(&p))
    }

    pub fn probe_from_dist(&self, dist: &[f64]) -> GenderProbe {
        GenderProbe::from_model(
            dist[self.tokenizer.he() as usize],
            dist[self.tokenizer.she() as usize],
        )
    }

    // -- masks ---------------------------------------------------------------

    /// Per parameter tensor, the elements a mask covers.
    pub fn coverage(&self, mask: &GranularityMask) -> Result<Vec<Coverage>, ModelError> {
        if mask.is_full() {
            return Ok(vec![Coverage::All; self.params.len()]);
        }
        let mut sets: Vec<Option<BTreeSet<usize>>> = vec![None; self.params.len()];
        let mut all = vec![false; self.params.len()];
        for a in mask.addresses() {
            let depth = self.check_address(a)?;
            match depth {
                Depth::Layer => {
                    let base = self.layer_base(a.layer);
                    for i in base..base + PARAMS_PER_LAYER {
                        all[i] = true;
                    }
                }
                Depth::Module => {
                    let m = a.module.expect("module depth");
                    all[self.weight_index(a.layer, m)] = true;
                    all[self.bias_index(a.layer, m)] = true;
                }
                Depth::Row | Depth::Neuron => {
                    let m = a.module.expect("row depth");
                    let w = self.weight_index(a.layer, m);
                    let cols = self.params[w].cols();
                    let r = a.row.expect("row depth");
                    let set = sets[w].get_or_insert_with(BTreeSet::new);
                    match a.column {
                        Some(c) => {
                            set.insert(r * cols + c);
                        }
                        None => set.extend(r * cols..(r + 1) * cols),
                    }
                }
            }
        }
        Ok(sets
            .into_iter()
            .zip(all)
            .zip(&self.params)
            .map(|((set, all), t)| match (all, set) {
                (true, _) => Coverage::All,
                (false, Some(s)) if s.len() == t.len() => Coverage::All,
                (false, Some(s)) => Coverage::Indices(s.into_iter().collect()),
                (false, None) => Coverage::None,
            })
            .collect())
    }

    /// Number of scalar parameters a mask covers.
    pub fn masked_count(&self, mask: &GranularityMask) -> Result<usize, ModelError> {
        Ok(self
            .coverage(mask)?
            .iter()
            .zip(&self.params)
            .map(|(c, t)| c.count(t.len()))
            .sum())
    }

    /// Views of the parameters behind each address of `mask`; every
    /// parameter when `mask` is `None` or full.
    pub fn parameters(&self, mask: Option<&GranularityMask>) -> Result<Vec<ParamView<'_>>, ModelError> {
        let whole = |i: usize| (i, self.params[i].data());
        let module_view = |l: usize, m: ModuleKind| ParamView {
            name: format!("{l}.{m}"),
            address: Some(ParameterAddress::module(l, m)),
            slices: vec![whole(self.weight_index(l, m)), whole(self.bias_index(l, m))],
        };
        let layer_views = |l: usize| {
            let g = self.ln1_index(l);
            let mut v = vec![ParamView {
                name: format!("{l}.ln_1"),
                address: Some(ParameterAddress::layer(l)),
                slices: vec![whole(g), whole(g + 1)],
            }];
            v.extend(ModuleKind::ALL.into_iter().map(|m| module_view(l, m)));
            v
        };
        let mask = match mask {
            Some(m) if !m.is_full() => m,
            _ => {
                let mut views = vec![
                    ParamView {
                        name: "embed.tokens".into(),
                        address: None,
                        slices: vec![whole(0)],
                    },
                    ParamView {
                        name: "embed.positions".into(),
                        address: None,
                        slices: vec![whole(1)],
                    },
                ];
                for l in 0..self.config.n_layers {
                    views.extend(layer_views(l));
                }
                let f = self.ln_f_index();
                views.push(ParamView {
                    name: "ln_f".into(),
                    address: None,
                    slices: vec![whole(f), whole(f + 1)],
                });
                views.push(ParamView {
                    name: "unembed".into(),
                    address: None,
                    slices: vec![whole(self.unembed_index())],
                });
                return Ok(views);
            }
        };
        let mut views = Vec::new();
        for a in mask.addresses() {
            match self.check_address(a)? {
                Depth::Layer => views.extend(layer_views(a.layer)),
                Depth::Module => views.push(module_view(a.layer, a.module.expect("module"))),
                Depth::Row | Depth::Neuron => {
                    let m = a.module.expect("module");
                    let w = self.weight_index(a.layer, m);
                    let t = &self.params[w];
                    let r = a.row.expect("row");
                    let row = t.row(r);
                    let slice = match a.column {
                        Some(c) => &row[c..c + 1],
                        None => row,
                    };
                    views.push(ParamView {
                        name: a.to_string(),
                        address: Some(*a),
                        slices: vec![(w, slice)],
                    });
                }
            }
        }
        Ok(views)
    }
}

#[derive(Debug, Clone, Copy)]
enum Role {
    Embedding,
    Gain,
    Bias,
    Weight(ModuleKind),
}
