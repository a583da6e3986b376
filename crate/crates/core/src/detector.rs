//! Per-component anti-spoofing classifiers: a shared convolutional
//! embedding over the log-magnitude STFT, binary heads for the mixture,
//! speech and environment decisions, and a five-class baseline head.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::separation::magnitude_graph;
use crate::stft::StftConfig;

/// Embedding dimension.
pub const EMBED_DIM: usize = 64;
/// Probabilities are clamped here before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
const LOG_OFFSET: f64 = 1e-6;

const EC1: usize = 8;
const EC2: usize = 16;
const EC3: usize = 32;

/// Convolutional frontend: log-magnitude STFT -> pooled D-vector.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub conv3_w: ParamId,
    pub conv3_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl EmbeddingParams {
    pub fn init(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = |s: &str| format!("{prefix}embed.{s}");
        Ok(EmbeddingParams {
            conv1_w: store.add_uniform(&n("conv1.weight"), &[EC1, 1, 3, 3], 9, rng)?,
            conv1_b: store.add_zeros(&n("conv1.bias"), &[EC1])?,
            conv2_w: store.add_uniform(&n("conv2.weight"), &[EC2, EC1, 3, 3], EC1 * 9, rng)?,
            conv2_b: store.add_zeros(&n("conv2.bias"), &[EC2])?,
            conv3_w: store.add_uniform(&n("conv3.weight"), &[EC3, EC2, 3, 3], EC2 * 9, rng)?,
            conv3_b: store.add_zeros(&n("conv3.bias"), &[EC3])?,
            proj_w: store.add_uniform(&n("proj.weight"), &[EMBED_DIM, EC3], EC3, rng)?,
            proj_b: store.add_zeros(&n("proj.bias"), &[EMBED_DIM])?,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{prefix}embed.{s}");
            store
                .id(&name)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing parameter `{name}`")))
        };
        Ok(EmbeddingParams {
            conv1_w: get("conv1.weight")?,
            conv1_b: get("conv1.bias")?,
            conv2_w: get("conv2.weight")?,
            conv2_b: get("conv2.bias")?,
            conv3_w: get("conv3.weight")?,
            conv3_b: get("conv3.bias")?,
            proj_w: get("proj.weight")?,
            proj_b: get("proj.bias")?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b, self.conv3_w, self.conv3_b,
            self.proj_w, self.proj_b,
        ]
    }
}

/// Which binary decision a head is responsible for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    /// original (index 0) vs artificially mixed (index 1)
    Mixture,
    /// bona fide (index 0) vs spoofed (index 1) speech
    Speech,
    /// bona fide (index 0) vs spoofed (index 1) environment
    Environment,
}

impl HeadRole {
    pub fn name(self) -> &'static str {
        match self {
            HeadRole::Mixture => "mixture",
            HeadRole::Speech => "speech",
            HeadRole::Environment => "env",
        }
    }
}

/// Affine map from the embedding to class logits.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl HeadParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(HeadParams {
            weight: store.add_uniform(&format!("{name}.weight"), &[classes, EMBED_DIM], EMBED_DIM, rng)?,
            bias: store.add_zeros(&format!("{name}.bias"), &[classes])?,
            classes,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str, classes: usize) -> Result<Self> {
        let get = |s: &str| {
            let full = format!("{name}.{s}");
            store
                .id(&full)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing parameter `{full}`")))
        };
        let p = HeadParams {
            weight: get("weight")?,
            bias: get("bias")?,
            classes,
        };
        if store.value(p.weight).shape() != [classes, EMBED_DIM] {
            return Err(Error::BadCheckpoint(format!(
                "`{name}.weight` has shape {:?}, want [{classes}, {EMBED_DIM}]",
                store.value(p.weight).shape()
            )));
        }
        Ok(p)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Shared embedding plus the three binary heads.
#[derive(Clone, Debug)]
pub struct DetectorParams {
    pub embed: EmbeddingParams,
    pub mixture: HeadParams,
    pub speech: HeadParams,
    pub env: HeadParams,
}

impl DetectorParams {
    pub fn init(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DetectorParams {
            embed: EmbeddingParams::init(store, prefix, rng)?,
            mixture: HeadParams::init(store, &format!("{prefix}mixture"), 2, rng)?,
            speech: HeadParams::init(store, &format!("{prefix}speech"), 2, rng)?,
            env: HeadParams::init(store, &format!("{prefix}env"), 2, rng)?,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(DetectorParams {
            embed: EmbeddingParams::from_store(store, prefix)?,
            mixture: HeadParams::from_store(store, &format!("{prefix}mixture"), 2)?,
            speech: HeadParams::from_store(store, &format!("{prefix}speech"), 2)?,
            env: HeadParams::from_store(store, &format!("{prefix}env"), 2)?,
        })
    }

    pub fn head(&self, role: HeadRole) -> &HeadParams {
        match role {
            HeadRole::Mixture => &self.mixture,
            HeadRole::Speech => &self.speech,
            HeadRole::Environment => &self.env,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.embed.ids();
        ids.extend(self.mixture.ids());
        ids.extend(self.speech.ids());
        ids.extend(self.env.ids());
        ids
    }
}

/// The five-class baseline: its own embedding and a 5-logit head.
#[derive(Clone, Debug)]
pub struct BaselineParams {
    pub embed: EmbeddingParams,
    pub head: HeadParams,
}

impl BaselineParams {
    pub fn init(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(BaselineParams {
            embed: EmbeddingParams::init(store, prefix, rng)?,
            head: HeadParams::init(store, &format!("{prefix}head"), 5, rng)?,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(BaselineParams {
            embed: EmbeddingParams::from_store(store, prefix)?,
            head: HeadParams::from_store(store, &format!("{prefix}head"), 5)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.embed.ids();
        ids.extend(self.head.ids());
        ids
    }
}

/// A point on the 2-simplex.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbabilityPair {
    pub p: [f64; 2],
}

impl ProbabilityPair {
    pub fn new(p0: f64, p1: f64) -> Result<Self> {
        if !(p0.is_finite() && p1.is_finite()) || p0 <= 0.0 || p1 <= 0.0 || (p0 + p1 - 1.0).abs() > 1e-9 {
            return Err(Error::DomainError(format!(
                "[{p0}, {p1}] is not a probability pair"
            )));
        }
        Ok(ProbabilityPair { p: [p0, p1] })
    }

    pub fn argmax(&self) -> usize {
        usize::from(self.p[1] > self.p[0])
    }
}

/// Embedding forward pass in `g` from a waveform tensor.
pub fn embed_graph(
    g: &mut Graph,
    store: &ParamStore,
    e: &EmbeddingParams,
    wave: Tensor,
    cfg: &StftConfig,
) -> Result<Tensor> {
    let spec = g.stft(wave, cfg)?;
    let mag = magnitude_graph(g, spec)?;
    let shifted = g.add_scalar(mag, LOG_OFFSET)?;
    let logmag = g.log(shifted)?;

    let c1w = g.param(store, e.conv1_w)?;
    let c1b = g.param(store, e.conv1_b)?;
    let c2w = g.param(store, e.conv2_w)?;
    let c2b = g.param(store, e.conv2_b)?;
    let c3w = g.param(store, e.conv3_w)?;
    let c3b = g.param(store, e.conv3_b)?;
    let pw = g.param(store, e.proj_w)?;
    let pb = g.param(store, e.proj_b)?;

    let h1 = g.conv2d(logmag, c1w, Some(c1b), 2, 1)?;
    let h1 = g.relu(h1)?;
    let h2 = g.conv2d(h1, c2w, Some(c2b), 2, 1)?;
    let h2 = g.relu(h2)?;
    let h3 = g.conv2d(h2, c3w, Some(c3b), 2, 1)?;
    let h3 = g.relu(h3)?;
    let pooled = g.mean_pool_hw(h3)?;
    let proj = g.matmul(pw, pooled)?;
    let proj = g.add(proj, pb)?;
    g.tanh(proj)
}

/// Deterministic embedding of a waveform.
pub fn embed(
    store: &ParamStore,
    e: &EmbeddingParams,
    w: &Waveform,
    cfg: &StftConfig,
) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let wave = g.constant_vec(&[w.len()], w.samples.clone())?;
    let emb = embed_graph(&mut g, store, e, wave, cfg)?;
    Ok(g.value(emb).data().to_vec())
}

/// Head forward pass: softmax(W . features + b).
pub fn classify_graph(
    g: &mut Graph,
    store: &ParamStore,
    head: &HeadParams,
    features: Tensor,
) -> Result<Tensor> {
    let w = g.param(store, head.weight)?;
    let b = g.param(store, head.bias)?;
    let logits = g.matmul(w, features)?;
    let logits = g.add(logits, b)?;
    g.softmax(logits)
}

/// Classify an embedding with a binary head.
pub fn classify(store: &ParamStore, head: &HeadParams, features: &[f64]) -> Result<ProbabilityPair> {
    if head.classes != 2 {
        return Err(Error::ShapeError(format!(
            "binary classify on a {}-class head",
            head.classes
        )));
    }
    let mut g = Graph::inference();
    let f = g.constant_vec(&[features.len()], features.to_vec())?;
    let p = classify_graph(&mut g, store, head, f)?;
    let v = g.value(p).data();
    ProbabilityPair::new(v[0].max(PROB_FLOOR), v[1].max(PROB_FLOOR))
}

/// -log p[label] with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy_graph(g: &mut Graph, probs: Tensor, label: usize) -> Result<Tensor> {
    let k = g.value(probs).len();
    if label >= k {
        return Err(Error::ShapeError(format!("label {label} for {k} classes")));
    }
    let p = g.slice_axis0(probs, label, 1)?;
    let p = g.clamp_min(p, PROB_FLOOR)?;
    let lp = g.log(p)?;
    g.mul_scalar(lp, -1.0)
}

/// Plain-value cross-entropy of a probability pair.
pub fn cross_entropy(p: &ProbabilityPair, label: usize) -> f64 {
    -p.p[label].max(PROB_FLOOR).ln()
}

/// KL(p_ref || p_sepa) in nats over two probability tensors of equal
/// length. Gradients reach whichever inputs are tracked; pass the reference
/// as a constant for the usual fixed-teacher direction.
pub fn kl_divergence_graph(g: &mut Graph, p_ref: Tensor, p_sepa: Tensor) -> Result<Tensor> {
    if g.shape(p_ref) != g.shape(p_sepa) {
        return Err(Error::ShapeError(format!(
            "KL over {:?} vs {:?}",
            g.shape(p_ref),
            g.shape(p_sepa)
        )));
    }
    let ref_c = g.clamp_min(p_ref, PROB_FLOOR)?;
    let sepa_c = g.clamp_min(p_sepa, PROB_FLOOR)?;
    let log_ref = g.log(ref_c)?;
    let log_sepa = g.log(sepa_c)?;
    let diff = g.sub(log_ref, log_sepa)?;
    let terms = g.mul(p_ref, diff)?;
    g.sum(terms)
}

/// Plain-value KL(p_ref || p_sepa).
pub fn kl_divergence(p_ref: &ProbabilityPair, p_sepa: &ProbabilityPair) -> f64 {
    p_ref
        .p
        .iter()
        .zip(&p_sepa.p)
        .map(|(&r, &s)| r * (r.max(PROB_FLOOR).ln() - s.max(PROB_FLOOR).ln()))
        .sum()
}

/// Five-class probabilities from the baseline model.
pub fn five_class_baseline(
    store: &ParamStore,
    params: &BaselineParams,
    w: &Waveform,
    cfg: &StftConfig,
) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let wave = g.constant_vec(&[w.len()], w.samples.clone())?;
    let emb = embed_graph(&mut g, store, &params.embed, wave, cfg)?;
    let p = classify_graph(&mut g, store, &params.head, emb)?;
    Ok(g.value(p).data().to_vec())
}
