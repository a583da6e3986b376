//! Complex-mask speech separation in the STFT domain, plus the closed-form
//! adaptive soft-mask that extracts environmental sound from the residual.
//!
//! The mask network is a small encoder-decoder over (F, T): two stride-2
//! levels down (channels 16 then 32), two levels back up with skip
//! connections, and a final 1x1 convolution to the two mask channels. The
//! final layer starts at zero on top of an additive identity bypass, so an
//! untrained network passes the mixture straight through.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, Graph, ParamId, ParamStore, Tensor};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::stft::{stft, ComplexSpectrogram, StftConfig};

/// Epsilon in the scaling-factor and soft-mask formulas.
pub const MASK_EPS: f64 = 1e-8;
/// Epsilon under the square root when taking spectrogram magnitudes. Kept
/// far below MASK_EPS so the magnitude floor (1e-15) cannot masquerade as
/// real speech energy in the soft-mask ratio; the S=0 limit then still
/// yields a mask of 1 to within round-trip tolerance.
pub const MAG_EPS: f64 = 1e-30;

const C1: usize = 16;
const C2: usize = 32;

/// Parameter handles for the mask estimator.
#[derive(Clone, Debug)]
pub struct MaskNetParams {
    pub enc1_w: ParamId,
    pub enc1_b: ParamId,
    pub enc2_w: ParamId,
    pub enc2_b: ParamId,
    pub bott_w: ParamId,
    pub bott_b: ParamId,
    pub dec1_w: ParamId,
    pub dec1_b: ParamId,
    pub mask_w: ParamId,
    pub mask_b: ParamId,
}

impl MaskNetParams {
    /// Create freshly initialized parameters under `prefix` (e.g. "sep.").
    pub fn init(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = |s: &str| format!("{prefix}{s}");
        Ok(MaskNetParams {
            enc1_w: store.add_uniform(&n("enc1.weight"), &[C1, 2, 3, 3], 2 * 9, rng)?,
            enc1_b: store.add_zeros(&n("enc1.bias"), &[C1])?,
            enc2_w: store.add_uniform(&n("enc2.weight"), &[C2, C1, 3, 3], C1 * 9, rng)?,
            enc2_b: store.add_zeros(&n("enc2.bias"), &[C2])?,
            bott_w: store.add_uniform(&n("bottleneck.weight"), &[C2, C2, 3, 3], C2 * 9, rng)?,
            bott_b: store.add_zeros(&n("bottleneck.bias"), &[C2])?,
            dec1_w: store.add_uniform(&n("dec1.weight"), &[C1, C2 + C1, 3, 3], (C2 + C1) * 9, rng)?,
            dec1_b: store.add_zeros(&n("dec1.bias"), &[C1])?,
            // Zero start: the identity bypass carries the signal until the
            // network has learned something.
            mask_w: store.add_zeros(&n("mask.weight"), &[2, C1 + 2, 1, 1])?,
            mask_b: store.add_zeros(&n("mask.bias"), &[2])?,
        })
    }

    /// Bind to parameters already present in `store` (checkpoint load).
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{prefix}{s}");
            store
                .id(&name)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing parameter `{name}`")))
        };
        let p = MaskNetParams {
            enc1_w: get("enc1.weight")?,
            enc1_b: get("enc1.bias")?,
            enc2_w: get("enc2.weight")?,
            enc2_b: get("enc2.bias")?,
            bott_w: get("bottleneck.weight")?,
            bott_b: get("bottleneck.bias")?,
            dec1_w: get("dec1.weight")?,
            dec1_b: get("dec1.bias")?,
            mask_w: get("mask.weight")?,
            mask_b: get("mask.bias")?,
        };
        if store.value(p.enc1_w).shape() != [C1, 2, 3, 3] {
            return Err(Error::BadCheckpoint(format!(
                "`{prefix}enc1.weight` has shape {:?}",
                store.value(p.enc1_w).shape()
            )));
        }
        Ok(p)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.enc1_w, self.enc1_b, self.enc2_w, self.enc2_b, self.bott_w, self.bott_b,
            self.dec1_w, self.dec1_b, self.mask_w, self.mask_b,
        ]
    }
}

/// Everything the separator produces for one mixture.
#[derive(Clone, Debug)]
pub struct SeparationOutput {
    pub speech: Waveform,
    pub environment: Waveform,
    /// Complex speech mask, two real channels [2, F, T].
    pub speech_mask: Array,
    /// Environment soft-mask values in (0, 1], flat F*T.
    pub env_mask: Vec<f64>,
    pub alpha: f64,
}

/// Predict the complex speech mask for a mixture spectrogram in `g`.
pub fn predict_speech_mask_graph(
    g: &mut Graph,
    store: &ParamStore,
    p: &MaskNetParams,
    mix_spec: Tensor,
) -> Result<Tensor> {
    let sh = g.shape(mix_spec).to_vec();
    let (f, t) = match sh.as_slice() {
        [2, f, t] => (*f, *t),
        _ => {
            return Err(Error::GeometryMismatch(format!(
                "mask net wants [2,F,T], got {sh:?}"
            )))
        }
    };
    let enc1_w = g.param(store, p.enc1_w)?;
    let enc1_b = g.param(store, p.enc1_b)?;
    let enc2_w = g.param(store, p.enc2_w)?;
    let enc2_b = g.param(store, p.enc2_b)?;
    let bott_w = g.param(store, p.bott_w)?;
    let bott_b = g.param(store, p.bott_b)?;
    let dec1_w = g.param(store, p.dec1_w)?;
    let dec1_b = g.param(store, p.dec1_b)?;
    let mask_w = g.param(store, p.mask_w)?;
    let mask_b = g.param(store, p.mask_b)?;

    let e1 = g.conv2d(mix_spec, enc1_w, Some(enc1_b), 2, 1)?;
    let e1 = g.relu(e1)?;
    let (f2, t2) = (g.shape(e1)[1], g.shape(e1)[2]);
    let e2 = g.conv2d(e1, enc2_w, Some(enc2_b), 2, 1)?;
    let e2 = g.relu(e2)?;
    let b = g.conv2d(e2, bott_w, Some(bott_b), 1, 1)?;
    let b = g.relu(b)?;
    let u1 = g.upsample2(b)?;
    let u1 = g.crop_hw(u1, 0, f2, 0, t2)?;
    let c1 = g.concat0(&[u1, e1])?;
    let d1 = g.conv2d(c1, dec1_w, Some(dec1_b), 1, 1)?;
    let d1 = g.relu(d1)?;
    let u2 = g.upsample2(d1)?;
    let u2 = g.crop_hw(u2, 0, f, 0, t)?;
    let c2 = g.concat0(&[u2, mix_spec])?;
    let delta = g.conv2d(c2, mask_w, Some(mask_b), 1, 0)?;

    // Identity bypass: real channel 1, imaginary channel 0.
    let mut id_data = vec![1.0; f * t];
    id_data.extend(std::iter::repeat_n(0.0, f * t));
    let id_bias = g.constant_vec(&[2, f, t], id_data)?;
    g.add(delta, id_bias)
}

/// [`predict_speech_mask_graph`] from a plain spectrogram, returning the
/// mask values. Inference convenience and the spec-facing entry point.
pub fn predict_speech_mask(
    store: &ParamStore,
    p: &MaskNetParams,
    mix_spec: &ComplexSpectrogram,
) -> Result<Array> {
    if mix_spec.f != mix_spec.cfg.bins() {
        return Err(Error::GeometryMismatch(format!(
            "{} bins vs config {}",
            mix_spec.f,
            mix_spec.cfg.bins()
        )));
    }
    let mut g = Graph::inference();
    let spec_t = spec_to_tensor(&mut g, mix_spec)?;
    let mask = predict_speech_mask_graph(&mut g, store, p, spec_t)?;
    Ok(g.value(mask).clone())
}

/// Pack a spectrogram into a [2, F, T] constant.
pub fn spec_to_tensor(g: &mut Graph, s: &ComplexSpectrogram) -> Result<Tensor> {
    let mut data = s.re.clone();
    data.extend_from_slice(&s.im);
    g.constant_vec(&[2, s.f, s.t], data)
}

/// Complex multiply of two [2, F, T] tensors (mask times spectrogram).
pub fn complex_mul_graph(g: &mut Graph, mask: Tensor, spec: Tensor) -> Result<Tensor> {
    let m_re = g.slice_axis0(mask, 0, 1)?;
    let m_im = g.slice_axis0(mask, 1, 1)?;
    let s_re = g.slice_axis0(spec, 0, 1)?;
    let s_im = g.slice_axis0(spec, 1, 1)?;
    let rr = g.mul(m_re, s_re)?;
    let ii = g.mul(m_im, s_im)?;
    let ri = g.mul(m_re, s_im)?;
    let ir = g.mul(m_im, s_re)?;
    let out_re = g.sub(rr, ii)?;
    let out_im = g.add(ri, ir)?;
    g.concat0(&[out_re, out_im])
}

/// |spec| as a [1, F, T] tensor: sqrt(re^2 + im^2 + MAG_EPS).
pub fn magnitude_graph(g: &mut Graph, spec: Tensor) -> Result<Tensor> {
    let re = g.slice_axis0(spec, 0, 1)?;
    let im = g.slice_axis0(spec, 1, 1)?;
    let rr = g.mul(re, re)?;
    let ii = g.mul(im, im)?;
    let sum = g.add(rr, ii)?;
    let shifted = g.add_scalar(sum, MAG_EPS)?;
    g.sqrt(shifted)
}

/// In-graph separation: mask the mixture spectrogram and reconstruct.
/// Returns (speech waveform tensor, mask tensor, mixture spec tensor).
pub fn separate_speech_graph(
    g: &mut Graph,
    store: &ParamStore,
    p: &MaskNetParams,
    mix: &Waveform,
    cfg: &StftConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let spec = stft(mix, cfg)?;
    let spec_t = spec_to_tensor(g, &spec)?;
    let mask = predict_speech_mask_graph(g, store, p, spec_t)?;
    let masked = complex_mul_graph(g, mask, spec_t)?;
    let speech = g.istft(masked, cfg, mix.len())?;
    Ok((speech, mask, spec_t))
}

/// Apply a given [2, F, T] mask to a mixture and reconstruct (no network).
pub fn separate_with_mask(mix: &Waveform, mask: &Array, cfg: &StftConfig) -> Result<Waveform> {
    let spec = stft(mix, cfg)?;
    let mut g = Graph::inference();
    let spec_t = spec_to_tensor(&mut g, &spec)?;
    let mask_t = g.constant(mask.clone())?;
    let masked = complex_mul_graph(&mut g, mask_t, spec_t)?;
    let speech = g.istft(masked, cfg, mix.len())?;
    Ok(Waveform::new(g.value(speech).data().to_vec(), mix.sample_rate))
}

/// Separate speech from a mixture with the mask network.
pub fn separate_speech(
    store: &ParamStore,
    p: &MaskNetParams,
    mix: &Waveform,
    cfg: &StftConfig,
) -> Result<(Waveform, Array)> {
    let mut g = Graph::inference();
    let (speech, mask, _) = separate_speech_graph(&mut g, store, p, mix, cfg)?;
    Ok((
        Waveform::new(g.value(speech).data().to_vec(), mix.sample_rate),
        g.value(mask).clone(),
    ))
}

/// Sample-wise residual: mixture minus separated speech.
pub fn compute_residual(mix: &Waveform, speech: &Waveform) -> Result<Waveform> {
    if mix.sample_rate != speech.sample_rate {
        return Err(Error::RateMismatch(mix.sample_rate, speech.sample_rate));
    }
    if mix.len() != speech.len() {
        return Err(Error::LengthMismatch(mix.len(), speech.len()));
    }
    Ok(Waveform::new(
        mix.samples
            .iter()
            .zip(&speech.samples)
            .map(|(m, s)| m - s)
            .collect(),
        mix.sample_rate,
    ))
}

/// Dynamic scaling factor and environment soft-mask from speech/residual
/// magnitude grids:
///
/// alpha = mean(R) / (mean(S) + eps)
/// mask(f,t) = 1 - tanh(S(f,t) / (R(f,t) + eps) * alpha)
pub fn env_soft_mask(s_mag: &[f64], r_mag: &[f64], eps: f64) -> Result<(Vec<f64>, f64)> {
    if s_mag.len() != r_mag.len() {
        return Err(Error::LengthMismatch(s_mag.len(), r_mag.len()));
    }
    if eps <= 0.0 {
        return Err(Error::DomainError("eps must be positive".into()));
    }
    if s_mag.iter().chain(r_mag).any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::DomainError("magnitudes must be finite and non-negative".into()));
    }
    let n = s_mag.len() as f64;
    let mean_s: f64 = s_mag.iter().sum::<f64>() / n;
    let mean_r: f64 = r_mag.iter().sum::<f64>() / n;
    let alpha = mean_r / (mean_s + eps);
    let mask: Vec<f64> = s_mag
        .iter()
        .zip(r_mag)
        .map(|(&s, &r)| crate::autodiff::one_minus_tanh_stable(s / (r + eps) * alpha))
        .collect();
    Ok((mask, alpha))
}

/// Graph form of [`env_soft_mask`] over [1, F, T] magnitude tensors.
pub fn env_soft_mask_graph(g: &mut Graph, s_mag: Tensor, r_mag: Tensor) -> Result<(Tensor, Tensor)> {
    let mean_s = g.mean(s_mag)?;
    let mean_r = g.mean(r_mag)?;
    let denom = g.add_scalar(mean_s, MASK_EPS)?;
    let inv = g.recip(denom)?;
    let alpha = g.mul(mean_r, inv)?;
    let r_shift = g.add_scalar(r_mag, MASK_EPS)?;
    let r_inv = g.recip(r_shift)?;
    let ratio = g.mul(s_mag, r_inv)?;
    let scaled = g.mul_scalar_t(ratio, alpha)?;
    let mask = g.one_minus_tanh(scaled)?;
    Ok((mask, alpha))
}

/// In-graph environment extraction from mixture and separated speech
/// tensors. Returns (environment waveform, env mask [1,F,T], alpha).
pub fn separate_environment_graph(
    g: &mut Graph,
    mix_t: Tensor,
    speech_t: Tensor,
    cfg: &StftConfig,
    out_len: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let residual = g.sub(mix_t, speech_t)?;
    let r_spec = g.stft(residual, cfg)?;
    let s_spec = g.stft(speech_t, cfg)?;
    let s_mag = magnitude_graph(g, s_spec)?;
    let r_mag = magnitude_graph(g, r_spec)?;
    let (mask, alpha) = env_soft_mask_graph(g, s_mag, r_mag)?;
    // Real mask applied to both planes of the residual spectrogram.
    let r_re = g.slice_axis0(r_spec, 0, 1)?;
    let r_im = g.slice_axis0(r_spec, 1, 1)?;
    let e_re = g.mul(mask, r_re)?;
    let e_im = g.mul(mask, r_im)?;
    let env_spec = g.concat0(&[e_re, e_im])?;
    let env = g.istft(env_spec, cfg, out_len)?;
    Ok((env, mask, alpha))
}

/// Extract environmental sound given the mixture and separated speech.
pub fn separate_environment(
    mix: &Waveform,
    speech: &Waveform,
    cfg: &StftConfig,
) -> Result<(Waveform, Vec<f64>, f64)> {
    if mix.sample_rate != speech.sample_rate {
        return Err(Error::RateMismatch(mix.sample_rate, speech.sample_rate));
    }
    if mix.len() != speech.len() {
        return Err(Error::LengthMismatch(mix.len(), speech.len()));
    }
    let mut g = Graph::inference();
    let mix_t = g.constant_vec(&[mix.len()], mix.samples.clone())?;
    let speech_t = g.constant_vec(&[speech.len()], speech.samples.clone())?;
    let (env, mask, alpha) = separate_environment_graph(&mut g, mix_t, speech_t, cfg, mix.len())?;
    Ok((
        Waveform::new(g.value(env).data().to_vec(), mix.sample_rate),
        g.value(mask).data().to_vec(),
        g.scalar_value(alpha),
    ))
}

/// Full separation: speech via the mask network, environment via the
/// adaptive soft-mask on the residual.
pub fn separate(
    store: &ParamStore,
    p: &MaskNetParams,
    mix: &Waveform,
    cfg: &StftConfig,
) -> Result<SeparationOutput> {
    let mut g = Graph::inference();
    let (speech_t, mask_t, _) = separate_speech_graph(&mut g, store, p, mix, cfg)?;
    let mix_t = g.constant_vec(&[mix.len()], mix.samples.clone())?;
    let (env_t, env_mask_t, alpha_t) = separate_environment_graph(&mut g, mix_t, speech_t, cfg, mix.len())?;
    Ok(SeparationOutput {
        speech: Waveform::new(g.value(speech_t).data().to_vec(), mix.sample_rate),
        environment: Waveform::new(g.value(env_t).data().to_vec(), mix.sample_rate),
        speech_mask: g.value(mask_t).clone(),
        env_mask: g.value(env_mask_t).data().to_vec(),
        alpha: g.scalar_value(alpha_t),
    })
}

/// L_sepa: MSE(separated speech, reference) + MSE(separated env, reference).
pub fn separation_loss_graph(
    g: &mut Graph,
    sep_speech: Tensor,
    ref_speech: Tensor,
    sep_env: Tensor,
    ref_env: Tensor,
) -> Result<Tensor> {
    if g.shape(sep_speech) != g.shape(ref_speech) {
        return Err(Error::LengthMismatch(
            g.value(sep_speech).len(),
            g.value(ref_speech).len(),
        ));
    }
    if g.shape(sep_env) != g.shape(ref_env) {
        return Err(Error::LengthMismatch(g.value(sep_env).len(), g.value(ref_env).len()));
    }
    let ls = g.mse(sep_speech, ref_speech)?;
    let le = g.mse(sep_env, ref_env)?;
    g.add(ls, le)
}

/// Plain-value separation loss for reporting.
pub fn separation_loss(
    sep_speech: &Waveform,
    ref_speech: &Waveform,
    sep_env: &Waveform,
    ref_env: &Waveform,
) -> Result<f64> {
    let mut g = Graph::inference();
    let a = g.constant_vec(&[sep_speech.len()], sep_speech.samples.clone())?;
    let b = g.constant_vec(&[ref_speech.len()], ref_speech.samples.clone())?;
    let c = g.constant_vec(&[sep_env.len()], sep_env.samples.clone())?;
    let d = g.constant_vec(&[ref_env.len()], ref_env.samples.clone())?;
    let l = separation_loss_graph(&mut g, a, b, c, d)?;
    Ok(g.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{fd_check, AdamState};
    use crate::dsp::rms;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn toy_cfg() -> StftConfig {
        StftConfig::new(64, 32, 64).unwrap()
    }

    fn sinusoid(freq: f64, n: usize, amp: f64) -> Waveform {
        let w = 2.0 * std::f64::consts::PI * freq / 16_000.0;
        Waveform::new((0..n).map(|i| amp * (w * i as f64).sin()).collect(), 16_000)
    }

    fn noise(n: usize, amp: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-amp..amp)).collect(), 16_000)
    }

    #[test]
    fn untrained_net_is_identity_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = MaskNetParams::init(&mut store, "sep.", &mut rng).unwrap();
        let mix = noise(1000, 0.5, 2);
        let (speech, mask) = separate_speech(&store, &p, &mix, &toy_cfg()).unwrap();
        // Mask is exactly the identity (real 1, imag 0).
        let ft = mask.len() / 2;
        assert!(mask.data()[..ft].iter().all(|&x| x == 1.0));
        assert!(mask.data()[ft..].iter().all(|&x| x == 0.0));
        let err = mix
            .samples
            .iter()
            .zip(&speech.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-9, "passthrough error {err}");
    }

    #[test]
    fn mask_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = MaskNetParams::init(&mut store, "sep.", &mut rng).unwrap();
        for n in [700, 1000, 1500] {
            let mix = noise(n, 0.5, n as u64);
            let spec = stft(&mix, &toy_cfg()).unwrap();
            let mask = predict_speech_mask(&store, &p, &spec).unwrap();
            assert_eq!(mask.shape(), &[2, spec.f, spec.t]);
        }
    }

    #[test]
    fn given_masks_behave() {
        let cfg = toy_cfg();
        let mix = noise(900, 0.5, 7);
        let spec = stft(&mix, &cfg).unwrap();
        let ft = spec.f * spec.t;

        let mut all_pass = vec![1.0; ft];
        all_pass.extend(std::iter::repeat_n(0.0, ft));
        let speech = separate_with_mask(&mix, &Array::from_vec(&[2, spec.f, spec.t], all_pass).unwrap(), &cfg).unwrap();
        let err = mix
            .samples
            .iter()
            .zip(&speech.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-10);

        let zero = Array::zeros(&[2, spec.f, spec.t]);
        let silent = separate_with_mask(&mix, &zero, &cfg).unwrap();
        assert!(silent.samples.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn oracle_ratio_mask_improves_snr() {
        // Enough frequency resolution that the tone concentrates in a bin.
        let cfg = StftConfig::new(256, 128, 256).unwrap();
        let n = 4000;
        let speech_ref = sinusoid(440.0, n, 0.6);
        let env_ref = noise(n, 0.3, 11);
        let mix = Waveform::new(
            speech_ref
                .samples
                .iter()
                .zip(&env_ref.samples)
                .map(|(a, b)| a + b)
                .collect(),
            16_000,
        );
        let s_spec = stft(&speech_ref, &cfg).unwrap();
        let e_spec = stft(&env_ref, &cfg).unwrap();
        let s_mag = s_spec.magnitudes();
        let e_mag = e_spec.magnitudes();
        let ft = s_spec.f * s_spec.t;
        let mut mask = vec![0.0; 2 * ft];
        for i in 0..ft {
            mask[i] = s_mag[i] / (s_mag[i] + e_mag[i] + 1e-12);
        }
        let sep = separate_with_mask(&mix, &Array::from_vec(&[2, s_spec.f, s_spec.t], mask).unwrap(), &cfg).unwrap();

        let snr = |est: &Waveform| {
            let num: f64 = speech_ref.samples.iter().map(|x| x * x).sum();
            let den: f64 = est
                .samples
                .iter()
                .zip(&speech_ref.samples)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            10.0 * (num / den).log10()
        };
        let gain = snr(&sep) - snr(&mix);
        assert!(gain >= 10.0, "oracle mask SNR gain only {gain:.2} dB");
    }

    #[test]
    fn residual_arithmetic() {
        let mix = Waveform::new(vec![1.0, 0.5], 16_000);
        let speech = Waveform::new(vec![0.4, 0.5], 16_000);
        let r = compute_residual(&mix, &speech).unwrap();
        assert_eq!(r.samples, vec![0.6, 0.0]);
        let zero = compute_residual(&mix, &mix).unwrap();
        assert!(zero.samples.iter().all(|&x| x == 0.0));
        let full = compute_residual(&mix, &Waveform::new(vec![0.0, 0.0], 16_000)).unwrap();
        assert_eq!(full.samples, mix.samples);
    }

    #[test]
    fn soft_mask_analytic_cases() {
        let n = 12;
        // S == 0: ratio is zero everywhere, mask is exactly 1.
        let (mask, _) = env_soft_mask(&vec![0.0; n], &vec![0.5; n], MASK_EPS).unwrap();
        assert!(mask.iter().all(|&m| (m - 1.0).abs() < 1e-12));

        // R == 0, S > 0: alpha = 0, mask is 1.
        let (mask, alpha) = env_soft_mask(&vec![0.7; n], &vec![0.0; n], MASK_EPS).unwrap();
        assert_abs_diff_eq!(alpha, 0.0, epsilon = 1e-12);
        assert!(mask.iter().all(|&m| (m - 1.0).abs() < 1e-9));

        // S == R == 1: alpha ~ 1, mask ~ 1 - tanh(1).
        let (mask, alpha) = env_soft_mask(&vec![1.0; n], &vec![1.0; n], 1e-8).unwrap();
        assert_abs_diff_eq!(alpha, 1.0, epsilon = 1e-7);
        for &m in &mask {
            assert_abs_diff_eq!(m, 0.23841, epsilon = 1e-5);
            assert_abs_diff_eq!(m, 1.0 - 1f64.tanh(), epsilon = 1e-7);
        }
    }

    #[test]
    fn soft_mask_range_and_scale_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let n = rng.random_range(4..40);
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let (mask, alpha) = env_soft_mask(&s, &r, MASK_EPS).unwrap();
            assert!(alpha >= 0.0);
            assert!(mask.iter().all(|&m| m > 0.0 && m <= 1.0));

            // Common scaling of S and R cancels between ratio and alpha.
            let c = rng.random_range(0.5..4.0);
            let sc: Vec<f64> = s.iter().map(|x| x * c).collect();
            let rc: Vec<f64> = r.iter().map(|x| x * c).collect();
            let (mask_c, _) = env_soft_mask(&sc, &rc, MASK_EPS).unwrap();
            for (a, b) in mask.iter().zip(&mask_c) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn soft_mask_rejects_negative_magnitudes() {
        assert!(matches!(
            env_soft_mask(&[0.1, -0.2], &[0.1, 0.1], MASK_EPS),
            Err(Error::DomainError(_))
        ));
    }

    #[test]
    fn environment_extraction_limits() {
        let cfg = toy_cfg();
        let mix = noise(900, 0.4, 17);

        // speech == mix: residual is zero, environment is near-silent.
        let (env, _, _) = separate_environment(&mix, &mix, &cfg).unwrap();
        assert!(rms(&env).unwrap() < 1e-12);

        // speech == 0: mask is 1 up to the tiny magnitude floor, and the
        // environment equals the mixture within round-trip tolerance.
        let silent = Waveform::new(vec![0.0; mix.len()], 16_000);
        let (env, mask, _) = separate_environment(&mix, &silent, &cfg).unwrap();
        assert!(mask.iter().all(|&m| (m - 1.0).abs() < 1e-3));
        let err = mix
            .samples
            .iter()
            .zip(&env.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-6, "env != mix, err {err}");
    }

    #[test]
    fn environment_rms_tracks_reference() {
        let cfg = toy_cfg();
        let n = 4000;
        let speech_ref = sinusoid(500.0, n, 0.6);
        let env_ref = noise(n, 0.25, 23);
        let mix = Waveform::new(
            speech_ref
                .samples
                .iter()
                .zip(&env_ref.samples)
                .map(|(a, b)| a + b)
                .collect(),
            16_000,
        );
        let (env, _, _) = separate_environment(&mix, &speech_ref, &cfg).unwrap();
        let r_ref = rms(&env_ref).unwrap();
        let r_est = rms(&env).unwrap();
        assert!(
            (r_est - r_ref).abs() / r_ref < 0.2,
            "env rms {r_est:.4} vs ref {r_ref:.4}"
        );
    }

    #[test]
    fn separation_loss_values() {
        let z2 = Waveform::new(vec![0.0, 0.0], 16_000);
        let ones = Waveform::new(vec![1.0, 1.0], 16_000);
        assert_abs_diff_eq!(
            separation_loss(&ones, &ones, &z2, &z2).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            separation_loss(&ones, &z2, &z2, &z2).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        // Doubling every residual quadruples the loss.
        let half = Waveform::new(vec![0.5, 0.5], 16_000);
        let l1 = separation_loss(&half, &z2, &half, &z2).unwrap();
        let l2 = separation_loss(&ones, &z2, &ones, &z2).unwrap();
        assert_abs_diff_eq!(l2, 4.0 * l1, epsilon = 1e-12);
    }

    /// Gradient of the separation loss w.r.t. every mask-net parameter on a
    /// tiny F=5, T=4 instance.
    #[test]
    fn separation_loss_gradients_pass_fd() {
        let cfg = StftConfig::new(4, 2, 8).unwrap();
        let n = 6; // frames(6) = 4, bins = 5
        assert_eq!(cfg.bins(), 5);
        assert_eq!(cfg.frames(n), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let p = MaskNetParams::init(&mut store, "sep.", &mut rng).unwrap();
        // Give the zero-init mask layer some nonzero values so its gradient
        // paths are generic.
        for id in [p.mask_w, p.mask_b] {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let mix = noise(n, 0.8, 41);
        let ref_speech = noise(n, 0.5, 42);
        let ref_env = noise(n, 0.4, 43);

        let build = |g: &mut Graph, s: &ParamStore| -> Tensor {
            let (speech, _, _) = separate_speech_graph(g, s, &p, &mix, &cfg).unwrap();
            let mix_t = g.constant_vec(&[n], mix.samples.clone()).unwrap();
            let (env, _, _) = separate_environment_graph(g, mix_t, speech, &cfg, n).unwrap();
            let rs = g.constant_vec(&[n], ref_speech.samples.clone()).unwrap();
            let re = g.constant_vec(&[n], ref_env.samples.clone()).unwrap();
            separation_loss_graph(g, speech, rs, env, re).unwrap()
        };

        store.zero_all_grads();
        let mut g = Graph::new();
        let loss = build(&mut g, &store);
        g.backward(loss, 1.0, &mut store).unwrap();
        for id in p.ids() {
            let analytic = store.grad(id).unwrap().data().to_vec();
            let report = fd_check(&mut store, id, 1e-5, 1e-4, &analytic, Some(12), |s| {
                let mut g = Graph::new();
                let loss = build(&mut g, s);
                g.scalar_value(loss)
            });
            assert!(report.pass, "param {}: {report}", store.name(id));
        }
    }

    #[test]
    fn mse_training_separates_tone_from_noise() {
        // A few dozen optimizer steps on one mixture should give strong
        // correlation between separated and reference speech.
        let cfg = StftConfig::new(64, 32, 64).unwrap();
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut store = ParamStore::new();
        let p = MaskNetParams::init(&mut store, "sep.", &mut rng).unwrap();
        let mut adam = AdamState::new(&store, &p.ids(), 1e-3);

        let mixtures: Vec<(Waveform, Waveform, Waveform)> = (0..4)
            .map(|i| {
                let speech = sinusoid(300.0 + 150.0 * i as f64, n, 0.5);
                let env = noise(n, 0.25, 60 + i as u64);
                let mix = Waveform::new(
                    speech
                        .samples
                        .iter()
                        .zip(&env.samples)
                        .map(|(a, b)| a + b)
                        .collect(),
                    16_000,
                );
                (mix, speech, env)
            })
            .collect();

        let ids = p.ids();
        for step in 0..60 {
            let (mix, ref_s, ref_e) = &mixtures[step % mixtures.len()];
            store.zero_grads(&ids);
            let mut g = Graph::new();
            let (speech, _, _) = separate_speech_graph(&mut g, &store, &p, mix, &cfg).unwrap();
            let mix_t = g.constant_vec(&[n], mix.samples.clone()).unwrap();
            let (env, _, _) = separate_environment_graph(&mut g, mix_t, speech, &cfg, n).unwrap();
            let rs = g.constant_vec(&[n], ref_s.samples.clone()).unwrap();
            let re = g.constant_vec(&[n], ref_e.samples.clone()).unwrap();
            let loss = separation_loss_graph(&mut g, speech, rs, env, re).unwrap();
            g.backward(loss, 1.0, &mut store).unwrap();
            adam.step(&mut store).unwrap();
        }

        // Correlation on a fresh mixture drawn from the same recipe.
        let speech = sinusoid(420.0, n, 0.5);
        let env = noise(n, 0.25, 99);
        let mix = Waveform::new(
            speech
                .samples
                .iter()
                .zip(&env.samples)
                .map(|(a, b)| a + b)
                .collect(),
            16_000,
        );
        let (sep, _) = separate_speech(&store, &p, &mix, &cfg).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ms, me) = (mean(&sep.samples), mean(&speech.samples));
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (a, b) in sep.samples.iter().zip(&speech.samples) {
            num += (a - ms) * (b - me);
            da += (a - ms) * (a - ms);
            db += (b - me) * (b - me);
        }
        let r = num / (da * db).sqrt();
        assert!(r > 0.9, "correlation {r:.3}");
    }
}
