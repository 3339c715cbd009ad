//! Decoder-only language model around any mixer variant.
//!
//! Blocks are pre-norm: `h + W_O·Mixer(LN(h))` followed by `h + FFN(LN(h))`
//! with a GELU feed-forward of width `ffn_mult · D`. Positions enter only
//! through the rotary encoding inside the mixers.

pub mod adam;
pub mod checkpoint;
pub mod rope;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{GradMap, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::mixers::{mixer_tape, MixerConfig, MixerParams, MixerVars, MixerWeights, Variant};
use crate::tensor::{Real, Tensor};

pub use adam::{adam_step, AdamConfig, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub init_std: f64,
    pub seed: u64,
    /// Reuse the token embedding as the output projection.
    pub tied_head: bool,
    /// Mixer settings; `hidden` and `heads` here are overridden by the model's.
    pub mixer: MixerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            layers: 4,
            hidden: 128,
            heads: 4,
            ffn_mult: 4,
            max_seq_len: 256,
            init_std: 0.02,
            seed: 0,
            tied_head: false,
            mixer: MixerConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The mixer configuration with the model's width and head count.
    pub fn mixer_config(&self) -> MixerConfig {
        MixerConfig {
            hidden: self.hidden,
            heads: self.heads,
            ..self.mixer.clone()
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut cfg = self.clone();
        cfg.mixer.variant = variant;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return bad("vocab, layers and ffn_mult must be positive".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        let m = self.mixer_config();
        m.validate()?;
        if !m.head_dim().is_multiple_of(2) {
            return Err(Error::OddHeadDim(m.head_dim()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialized configuration.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("model config serializes");
        let hash = Sha256::digest(text.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Every parameter name and shape, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (cfg.vocab, cfg.hidden, cfg.hidden * cfg.ffn_mult);
    let mut out = vec![("embed".to_string(), vec![v, d])];
    let mixer = MixerParams::shapes(&cfg.mixer_config());
    for l in 0..cfg.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.push((p("ln1.gamma"), vec![d]));
        out.push((p("ln1.beta"), vec![d]));
        for (name, shape) in mixer.entries() {
            out.push((p(&format!("mixer.{name}")), shape.clone()));
        }
        out.push((p("w_o"), vec![d, d]));
        out.push((p("ln2.gamma"), vec![d]));
        out.push((p("ln2.beta"), vec![d]));
        out.push((p("ffn.w1"), vec![d, f]));
        out.push((p("ffn.b1"), vec![f]));
        out.push((p("ffn.w2"), vec![f, d]));
        out.push((p("ffn.b2"), vec![d]));
    }
    out.push(("ln_f.gamma".into(), vec![d]));
    out.push(("ln_f.beta".into(), vec![d]));
    if !cfg.tied_head {
        out.push(("head".into(), vec![d, v]));
    }
    out
}

pub fn param_count(cfg: &ModelConfig) -> usize {
    param_shapes(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Deterministic RNG for one named parameter, independent of every other
/// parameter, so layouts that share a name initialize it identically.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// One tokenized batch: `inputs` and `targets` are `batch × seq`, row major.
/// Positions with `None` targets do not contribute to loss or accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(batch: usize, seq: usize, inputs: Vec<usize>, targets: Vec<Option<usize>>) -> Result<Self> {
        if inputs.len() != batch * seq || targets.len() != batch * seq {
            return Err(shape_err(
                "batch",
                format!("{} inputs and {} targets for {batch} × {seq}", inputs.len(), targets.len()),
            ));
        }
        Ok(Self {
            batch,
            seq,
            inputs,
            targets,
        })
    }

    /// SHA-256 over inputs and targets; equal digests mean equal data.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.batch as u64).to_le_bytes());
        h.update((self.seq as u64).to_le_bytes());
        for &t in &self.inputs {
            h.update((t as u64).to_le_bytes());
        }
        for t in &self.targets {
            h.update(t.map_or(u64::MAX, |t| t as u64).to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Loss and accuracy of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub correct: usize,
    pub counted: usize,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    names: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mixer_cfg = cfg.mixer_config();
        let params = param_shapes(cfg)
            .iter()
            .map(|(name, shape)| {
                let mut rng = param_rng(cfg.seed, name);
                let leaf = name.rsplit('.').next().unwrap_or(name);
                if name.contains(".mixer.") {
                    return MixerWeights::<T>::init_param(&mixer_cfg, leaf, shape, cfg.init_std, &mut rng);
                }
                match leaf {
                    "gamma" => Tensor::ones(shape),
                    "beta" | "b1" | "b2" => Tensor::zeros(shape),
                    _ => crate::verify::random::normal(shape, cfg.init_std, &mut rng),
                }
            })
            .collect();
        Self::from_params(cfg, params)
    }

    pub fn from_params(cfg: &ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        cfg.validate()?;
        let shapes = param_shapes(cfg);
        if shapes.len() != params.len() {
            return Err(shape_err("model", format!("{} tensors for {} parameters", params.len(), shapes.len())));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(shape_err("model", format!("{name}: have {:?}, need {shape:?}", p.shape())));
            }
        }
        let names: Vec<String> = shapes.into_iter().map(|(n, _)| n).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            names,
            index,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Mixer weights of block `layer`, copied out.
    pub fn mixer_weights(&self, layer: usize) -> Result<MixerWeights<T>> {
        let shapes = MixerParams::shapes(&self.cfg.mixer_config());
        shapes.try_map(|name, _| {
            self.param(&format!("blocks.{layer}.mixer.{name}"))
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("no parameter blocks.{layer}.mixer.{name}")))
        })
    }

    /// Logits `[B·N, vocab]` for `batch` recorded on `tape`, with `vars` the
    /// parameter leaves in storage order.
    pub fn logits_tape(&self, tape: &Tape<T>, vars: &[Var], batch: &Batch) -> Result<Var> {
        if batch.seq > self.cfg.max_seq_len {
            return Err(Error::InvalidConfig(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq, self.cfg.max_seq_len
            )));
        }
        let get = |name: &str| vars[self.index[name]];
        let (b, n, d) = (batch.batch, batch.seq, self.cfg.hidden);
        let x = tape.gather_rows(get("embed"), &batch.inputs)?;
        let mut x = tape.reshape(x, &[b, n, d])?;
        for l in 0..self.cfg.layers {
            x = self.block_tape(tape, &get, l, x)?;
        }
        let x = tape.layer_norm(x, get("ln_f.gamma"), get("ln_f.beta"))?;
        let x = tape.reshape(x, &[b * n, d])?;
        let head = if self.cfg.tied_head {
            tape.transpose(get("embed"))?
        } else {
            get("head")
        };
        tape.matmul(x, head)
    }

    fn block_tape(&self, tape: &Tape<T>, get: &impl Fn(&str) -> Var, l: usize, x: Var) -> Result<Var> {
        let p = |s: &str| get(&format!("blocks.{l}.{s}"));
        let mixer_cfg = self.cfg.mixer_config();
        let mixer: MixerVars = MixerParams::shapes(&mixer_cfg)
            .try_map::<_, std::convert::Infallible>(|name, _| Ok(p(&format!("mixer.{name}"))))
            .unwrap_or_else(|e| match e {});

        let h = tape.layer_norm(x, p("ln1.gamma"), p("ln1.beta"))?;
        let m = mixer_tape(tape, h, &mixer, &mixer_cfg)?;
        let m = tape.matmul(m, p("w_o"))?;
        let x = tape.add(x, m)?;

        let h = tape.layer_norm(x, p("ln2.gamma"), p("ln2.beta"))?;
        let f = tape.matmul(h, p("ffn.w1"))?;
        let f = tape.add(f, p("ffn.b1"))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, p("ffn.w2"))?;
        let f = tape.add(f, p("ffn.b2"))?;
        tape.add(x, f)
    }

    /// One block applied to `h` (`[N, D]` or `[B, N, D]`).
    pub fn block_forward(&self, layer: usize, h: &Tensor<T>) -> Result<Tensor<T>> {
        if layer >= self.cfg.layers {
            return Err(Error::InvalidConfig(format!("block {layer} of {}", self.cfg.layers)));
        }
        let tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let get = |name: &str| vars[self.index[name]];
        let x = tape.constant(crate::mixers::as_batched(h)?);
        let out = self.block_tape(&tape, &get, layer, x)?;
        tape.value(out).reshape(h.shape())
    }

    /// Logits `[B·N, vocab]` without recording gradients.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let z = self.logits_tape(&tape, &vars, batch)?;
        Ok((*tape.value(z)).clone())
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<Evaluation> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let z = self.logits_tape(&tape, &vars, batch)?;
        let loss = tape.cross_entropy(z, &batch.targets)?;
        Ok(evaluation(&tape.value(z), &batch.targets, tape.value(loss).data()[0]))
    }

    /// Forward and backward pass; gradients come back in storage order.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(Evaluation, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone())).collect();
        let z = self.logits_tape(&tape, &vars, batch)?;
        let loss = tape.cross_entropy(z, &batch.targets)?;
        let eval = evaluation(&tape.value(z), &batch.targets, tape.value(loss).data()[0]);
        let grads: GradMap<T> = tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect();
        Ok((eval, grads))
    }
}

fn evaluation<T: Real>(logits: &Tensor<T>, targets: &[Option<usize>], loss: T) -> Evaluation {
    let vocab = logits.cols();
    let mut correct = 0;
    let mut counted = 0;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &logits.data()[i * vocab..(i + 1) * vocab];
        let best = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
        counted += 1;
        correct += usize::from(best == t);
    }
    Evaluation {
        loss: loss.to_f64().unwrap_or(f64::NAN),
        correct,
        counted,
    }
}

/// Mean next-token cross-entropy of `logits [N, vocab]` against `targets`.
pub fn lm_loss<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let tape = Tape::new();
    let z = tape.constant(logits.clone());
    let targets: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
    let loss = tape.cross_entropy(z, &targets)?;
    let v = tape.value(loss).data()[0];
    Ok(v)
}

#[cfg(test)]
mod tests;
