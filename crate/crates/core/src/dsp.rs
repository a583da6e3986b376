//! Time-domain signal primitives: resampling, normalization, RMS/SNR
//! arithmetic and fixed-window chunking.
//!
//! Everything here is a pure function of its inputs; all arithmetic is f64.

use crate::error::{Error, Result};

/// Mono sample buffer plus its rate. The universal signal currency.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    /// All samples finite.
    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|x| x.is_finite())
    }
}

/// Root mean square of the signal.
pub fn rms(w: &Waveform) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::EmptySignal);
    }
    let sum_sq: f64 = w.samples.iter().map(|x| x * x).sum();
    Ok((sum_sq / w.len() as f64).sqrt())
}

/// Scale so that max |sample| equals `peak`. Shape is preserved up to the
/// positive factor; a signal already at `peak` is returned unchanged, which
/// makes the operation exactly idempotent.
pub fn peak_normalize(w: &Waveform, peak: f64) -> Result<Waveform> {
    assert!(peak > 0.0 && peak.is_finite(), "peak must be positive");
    let max = w.peak();
    if max == 0.0 {
        return Err(Error::SilentSignal("peak_normalize on all-zero signal".into()));
    }
    if (max - peak).abs() <= 1e-12 * peak {
        return Ok(w.clone());
    }
    let gain = peak / max;
    Ok(Waveform::new(
        w.samples.iter().map(|x| x * gain).collect(),
        w.sample_rate,
    ))
}

/// Scale `env` so the speech-to-environment power ratio hits `snr_db`, then
/// sum. Returns (mixture, scaled env, gain applied to env).
pub fn mix_at_snr(speech: &Waveform, env: &Waveform, snr_db: f64) -> Result<(Waveform, Waveform, f64)> {
    if speech.sample_rate != env.sample_rate {
        return Err(Error::RateMismatch(speech.sample_rate, env.sample_rate));
    }
    if speech.len() != env.len() {
        return Err(Error::LengthMismatch(speech.len(), env.len()));
    }
    let rms_s = rms(speech)?;
    let rms_e = rms(env)?;
    if rms_s == 0.0 {
        return Err(Error::SilentSignal("speech is silent".into()));
    }
    if rms_e == 0.0 {
        return Err(Error::SilentSignal("environment is silent".into()));
    }
    let gain = rms_s / rms_e * 10f64.powf(-snr_db / 20.0);
    let scaled: Vec<f64> = env.samples.iter().map(|x| x * gain).collect();
    let mixture: Vec<f64> = speech
        .samples
        .iter()
        .zip(&scaled)
        .map(|(s, e)| s + e)
        .collect();
    Ok((
        Waveform::new(mixture, speech.sample_rate),
        Waveform::new(scaled, env.sample_rate),
        gain,
    ))
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// Identity when the rates already match (bit-exact pass-through). Output
/// length is ceil(len * target / source), so duration is preserved within
/// one output sample.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    assert!(target_rate > 0, "target rate must be positive");
    if w.is_empty() {
        return Err(Error::EmptySignal);
    }
    if w.sample_rate == target_rate {
        return Ok(w.clone());
    }
    let src = f64::from(w.sample_rate);
    let dst = f64::from(target_rate);
    let out_len = ((w.len() as u64 * u64::from(target_rate)).div_ceil(u64::from(w.sample_rate))) as usize;

    // Cutoff relative to the source Nyquist, with a little anti-alias margin.
    let cutoff = (dst / src).min(1.0) * 0.97;
    const ZERO_CROSSINGS: f64 = 24.0;
    let half_width = ZERO_CROSSINGS / cutoff; // in source samples

    let x = &w.samples;
    let n = x.len() as isize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let center = m as f64 * src / dst;
        let lo = (center - half_width).ceil() as isize;
        let hi = (center + half_width).floor() as isize;
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for k in lo..=hi {
            let t = k as f64 - center;
            let sinc_arg = std::f64::consts::PI * cutoff * t;
            let sinc = if sinc_arg.abs() < 1e-12 {
                1.0
            } else {
                sinc_arg.sin() / sinc_arg
            };
            let win = 0.5 * (1.0 + (std::f64::consts::PI * t / half_width).cos());
            let h = cutoff * sinc * win;
            wsum += h;
            if k >= 0 && k < n {
                acc += h * x[k as usize];
            }
        }
        // Normalize to unit DC gain on the sampled kernel grid.
        out.push(if wsum.abs() > 1e-12 { acc / wsum } else { acc });
    }
    Ok(Waveform::new(out, target_rate))
}

/// Cut into fixed windows of `win_s` seconds every `hop_s` seconds. The
/// final short remainder is zero-padded to a full window so every sample is
/// covered; inputs shorter than one window produce a single padded chunk.
pub fn chunk(w: &Waveform, win_s: f64, hop_s: f64) -> Vec<Waveform> {
    assert!(win_s > 0.0, "window must be positive");
    assert!(hop_s > 0.0 && hop_s <= win_s, "hop must be in (0, win]");
    let win = (win_s * f64::from(w.sample_rate)).round() as usize;
    let hop = (hop_s * f64::from(w.sample_rate)).round() as usize;
    chunk_samples(w, win.max(1), hop.max(1))
}

/// Sample-count variant of [`chunk`]; also used to slice reference stems at
/// exactly the same offsets as their mixture.
pub fn chunk_samples(w: &Waveform, win: usize, hop: usize) -> Vec<Waveform> {
    let n = w.len();
    let count = if n <= win {
        1
    } else {
        (n - win).div_ceil(hop) + 1
    };
    let mut chunks = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * hop;
        let mut buf = vec![0.0; win];
        let end = (start + win).min(n);
        if start < n {
            buf[..end - start].copy_from_slice(&w.samples[start..end]);
        }
        chunks.push(Waveform::new(buf, w.sample_rate));
    }
    chunks
}

/// Offsets (in samples) that [`chunk_samples`] uses for a given length.
pub fn chunk_offsets(n: usize, win: usize, hop: usize) -> Vec<usize> {
    let count = if n <= win { 1 } else { (n - win).div_ceil(hop) + 1 };
    (0..count).map(|i| i * hop).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tone(freq: f64, rate: u32, secs: f64, amp: f64) -> Waveform {
        let n = (secs * f64::from(rate)).round() as usize;
        let w = 2.0 * std::f64::consts::PI * freq / f64::from(rate);
        Waveform::new((0..n).map(|i| amp * (w * i as f64).sin()).collect(), rate)
    }

    #[test]
    fn rms_constant_and_zero() {
        let c = Waveform::new(vec![0.5; 100], 16_000);
        assert_abs_diff_eq!(rms(&c).unwrap(), 0.5, epsilon = 1e-15);
        let z = Waveform::new(vec![0.0; 10], 16_000);
        assert_abs_diff_eq!(rms(&z).unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(
            rms(&Waveform::new(vec![], 16_000)),
            Err(Error::EmptySignal)
        ));
    }

    #[test]
    fn rms_three_four() {
        let w = Waveform::new(vec![3.0, 4.0], 8_000);
        assert_abs_diff_eq!(rms(&w).unwrap(), 12.5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn peak_normalize_scales_linearly() {
        let w = Waveform::new(vec![0.5, -0.25], 16_000);
        let n = peak_normalize(&w, 0.95).unwrap();
        assert_abs_diff_eq!(n.samples[0], 0.95, epsilon = 1e-15);
        assert_abs_diff_eq!(n.samples[1], -0.475, epsilon = 1e-15);
    }

    #[test]
    fn peak_normalize_identity_and_idempotent() {
        let w = Waveform::new(vec![0.95, -0.3], 16_000);
        let n = peak_normalize(&w, 0.95).unwrap();
        assert_eq!(n.samples, w.samples);
        let v = Waveform::new(vec![0.1, 0.2, -0.4], 16_000);
        let a = peak_normalize(&v, 0.95).unwrap();
        let b = peak_normalize(&a, 0.95).unwrap();
        assert_eq!(a.samples, b.samples);
        // scale factor 0.95 / 0.4 = 2.375
        assert_abs_diff_eq!(a.samples[0], 0.1 * 2.375, epsilon = 1e-15);
    }

    #[test]
    fn peak_normalize_rejects_silence() {
        let z = Waveform::new(vec![0.0; 8], 16_000);
        assert!(matches!(peak_normalize(&z, 0.95), Err(Error::SilentSignal(_))));
    }

    #[test]
    fn mix_at_snr_gains() {
        // Equal RMS at 0 dB -> unit gain.
        let s = tone(440.0, 16_000, 0.5, 0.5);
        let e = tone(440.0, 16_000, 0.5, 0.5);
        let (_, _, gain) = mix_at_snr(&s, &e, 0.0).unwrap();
        assert_abs_diff_eq!(gain, 1.0, epsilon = 1e-12);

        // rms 0.1 vs 0.2 at 10 dB -> 0.5 * 10^-0.5.
        let s = Waveform::new(vec![0.1; 64], 16_000);
        let e = Waveform::new(vec![0.2; 64], 16_000);
        let (_, _, gain) = mix_at_snr(&s, &e, 10.0).unwrap();
        assert_abs_diff_eq!(gain, 0.5 * 10f64.powf(-0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(gain, 0.15811, epsilon = 1e-5);
    }

    #[test]
    fn mix_at_snr_achieves_requested_ratio() {
        let s = tone(300.0, 16_000, 0.3, 0.7);
        let mut e = tone(1234.0, 16_000, 0.3, 0.2);
        for (i, x) in e.samples.iter_mut().enumerate() {
            *x += 0.05 * ((i % 17) as f64 / 17.0 - 0.5);
        }
        for snr in [-5.0, 0.0, 3.5, 10.0] {
            let (_, scaled, _) = mix_at_snr(&s, &e, snr).unwrap();
            let achieved = 20.0 * (rms(&s).unwrap() / rms(&scaled).unwrap()).log10();
            assert_abs_diff_eq!(achieved, snr, epsilon = 1e-9);
        }
    }

    #[test]
    fn mix_at_snr_high_snr_limit() {
        let s = tone(500.0, 16_000, 0.25, 0.5);
        let e = tone(900.0, 16_000, 0.25, 0.5);
        let (mix, _, _) = mix_at_snr(&s, &e, 100.0).unwrap();
        let num: f64 = mix
            .samples
            .iter()
            .zip(&s.samples)
            .map(|(m, x)| (m - x) * (m - x))
            .sum();
        let den: f64 = s.samples.iter().map(|x| x * x).sum();
        assert!((num / den).sqrt() < 1e-4);
    }

    #[test]
    fn mix_at_snr_rejects_mismatch_and_silence() {
        let a = Waveform::new(vec![0.1; 10], 16_000);
        let b = Waveform::new(vec![0.1; 10], 8_000);
        assert!(matches!(mix_at_snr(&a, &b, 0.0), Err(Error::RateMismatch(..))));
        let c = Waveform::new(vec![0.1; 9], 16_000);
        assert!(matches!(mix_at_snr(&a, &c, 0.0), Err(Error::LengthMismatch(..))));
        let z = Waveform::new(vec![0.0; 10], 16_000);
        assert!(matches!(mix_at_snr(&a, &z, 0.0), Err(Error::SilentSignal(_))));
        assert!(matches!(mix_at_snr(&z, &a, 0.0), Err(Error::SilentSignal(_))));
    }

    #[test]
    fn resample_identity_same_rate() {
        let w = tone(440.0, 16_000, 0.1, 0.5);
        let r = resample(&w, 16_000).unwrap();
        assert_eq!(r, w);
    }

    #[test]
    fn resample_length_arithmetic() {
        let w = tone(440.0, 48_000, 1.0, 0.5);
        let r = resample(&w, 16_000).unwrap();
        assert!((r.len() as i64 - 16_000).abs() <= 1);
        assert_eq!(r.sample_rate, 16_000);
    }

    #[test]
    fn resample_tone_spectrum_clean() {
        // 1 kHz sinusoid at 48 kHz, downsampled to 16 kHz. Analyze a middle
        // slice that holds an integer number of cycles so DFT bins line up.
        let w = tone(1000.0, 48_000, 1.0, 0.7);
        let r = resample(&w, 16_000).unwrap();
        let slice = &r.samples[1000..15_000]; // 14 000 samples = 875 cycles
        let n = slice.len();
        let mut power = vec![0.0f64; n / 2 + 1];
        for (k, p) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            let wk = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            for (i, &x) in slice.iter().enumerate() {
                let ph = wk * i as f64;
                re += x * ph.cos();
                im += x * ph.sin();
            }
            *p = re * re + im * im;
        }
        let bin_1khz = 1000 * n / 16_000;
        let peak = power[bin_1khz];
        let best = power
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(best, bin_1khz);
        let rest: f64 = power
            .iter()
            .enumerate()
            .filter(|(k, _)| (*k as i64 - bin_1khz as i64).abs() > 2)
            .map(|(_, p)| p)
            .sum();
        assert!(
            rest / peak < 1e-4,
            "sidelobe power {} dB",
            10.0 * (rest / peak).log10()
        );
    }

    #[test]
    fn chunk_counts_and_padding() {
        let rate = 16_000;
        let w = Waveform::new(vec![1.0; 4 * rate], rate as u32);
        assert_eq!(chunk(&w, 4.0, 2.0).len(), 1);

        let w = Waveform::new(vec![1.0; 8 * rate], rate as u32);
        let ch = chunk(&w, 4.0, 2.0);
        assert_eq!(ch.len(), 3);
        assert_eq!(chunk_offsets(8 * rate, 4 * rate, 2 * rate), vec![0, 2 * rate, 4 * rate]);

        let w = Waveform::new(vec![1.0; 5 * rate], rate as u32);
        let ch = chunk(&w, 4.0, 2.0);
        assert_eq!(ch.len(), 2);
        // Second chunk covers 2..6 s: one second of real signal is left, so
        // one second of zero padding closes it out.
        let tail = &ch[1].samples;
        assert!(tail[..3 * rate].iter().all(|&x| x == 1.0));
        assert!(tail[3 * rate..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn chunk_short_input_pads_single() {
        let w = Waveform::new(vec![0.5; 100], 16_000);
        let ch = chunk_samples(&w, 400, 200);
        assert_eq!(ch.len(), 1);
        assert_eq!(ch[0].len(), 400);
        assert!(ch[0].samples[100..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn chunk_covers_every_sample() {
        for n in [100usize, 399, 400, 401, 999, 1000, 1601] {
            let w = Waveform::new((0..n).map(|i| i as f64).collect(), 16_000);
            let win = 400;
            let hop = 150;
            let ch = chunk_samples(&w, win, hop);
            let expect = if n <= win { 1 } else { (n - win).div_ceil(hop) + 1 };
            assert_eq!(ch.len(), expect);
            let mut covered = vec![false; n];
            for (i, c) in ch.iter().enumerate() {
                for j in 0..win {
                    let idx = i * hop + j;
                    if idx < n {
                        assert_eq!(c.samples[j], idx as f64);
                        covered[idx] = true;
                    }
                }
            }
            assert!(covered.iter().all(|&c| c));
        }
    }
}
