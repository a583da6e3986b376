//! Deterministic synthetic audio: harmonic "speech", filtered-noise
//! "environment", and spoofed variants with fixed spectral signatures.
//!
//! These generators back the toy corpora used in tests and give `forge` a
//! ready-made set of source pools for end-to-end runs without external
//! data. Spoof cues are deliberate and detectable: spoofed speech carries
//! an added high tone, spoofed environments concentrate their noise energy
//! in a mid-high band, and authentic scene recordings carry mains-style hum
//! that artificial mixtures lack.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::forge::TARGET_RATE;
use crate::wav::write_wav;

pub fn tone(freq: f64, rate: u32, n: usize, amp: f64) -> Vec<f64> {
    let w = 2.0 * PI * freq / f64::from(rate);
    (0..n).map(|i| amp * (w * i as f64).sin()).collect()
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

fn peak_scale(samples: &mut [f64], peak: f64) {
    let max = samples.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if max > 0.0 {
        let c = peak / max;
        for s in samples.iter_mut() {
            *s *= c;
        }
    }
}

/// Cascaded one-pole lowpass at `cutoff_hz` (`order` stages).
fn lowpass(x: &[f64], cutoff_hz: f64, rate: u32, order: usize) -> Vec<f64> {
    let a = (-2.0 * PI * cutoff_hz / f64::from(rate)).exp();
    let mut y = x.to_vec();
    for _ in 0..order.max(1) {
        let mut state = 0.0;
        for v in y.iter_mut() {
            state = a * state + (1.0 - a) * *v;
            *v = state;
        }
    }
    y
}

/// Harmonic stack with a slow amplitude envelope; the tonal "speech" stand-in.
pub fn harmonic_speech(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let f0: f64 = rng.random_range(140.0..280.0);
    let rate = f64::from(TARGET_RATE);
    let mut out = vec![0.0; n];
    let harmonics = ((3_200.0 / f0).floor() as usize).max(2);
    for h in 1..=harmonics {
        let f = f0 * h as f64;
        if f >= 3_200.0 {
            break;
        }
        let amp = 1.0 / h as f64;
        let phase = rng.random_range(0.0..2.0 * PI);
        let w = 2.0 * PI * f / rate;
        for (i, o) in out.iter_mut().enumerate() {
            *o += amp * (w * i as f64 + phase).sin();
        }
    }
    // Slow raised-cosine amplitude modulation.
    let am_rate = rng.random_range(0.8..2.2);
    let wm = 2.0 * PI * am_rate / rate;
    for (i, o) in out.iter_mut().enumerate() {
        *o *= 0.65 + 0.35 * (wm * i as f64).cos();
    }
    peak_scale(&mut out, 0.6);
    out
}

/// Spoofed speech: the harmonic stack plus a constant synthesis-artifact
/// tone near 6 kHz.
pub fn spoof_speech(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut out = harmonic_speech(rng, n);
    let f = rng.random_range(5_800.0..6_200.0);
    let artifact = tone(f, TARGET_RATE, n, 0.22);
    add_into(&mut out, &artifact);
    peak_scale(&mut out, 0.6);
    out
}

/// Bona fide environment: broadband noise shaped to the low band.
pub fn bonafide_env(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = lowpass(&white, 1_200.0, TARGET_RATE, 2);
    peak_scale(&mut out, 0.5);
    out
}

/// Spoofed environment: a generated-sounding texture with its noise energy
/// concentrated around 4 kHz (lowpassed noise shifted up by a carrier).
pub fn spoof_env(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = lowpass(&white, 800.0, TARGET_RATE, 2);
    let carrier = rng.random_range(3_800.0..4_200.0);
    let w = 2.0 * PI * carrier / f64::from(TARGET_RATE);
    let mut out: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, &v)| v * (w * i as f64).cos())
        .collect();
    peak_scale(&mut out, 0.5);
    out
}

/// Authentic scene: speech and ambience captured together, with mains hum.
pub fn original_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut out = harmonic_speech(rng, n);
    let env = bonafide_env(rng, n);
    let snr_db: f64 = rng.random_range(0.0..10.0);
    let g = 10f64.powf(-snr_db / 20.0);
    for (o, &e) in out.iter_mut().zip(&env) {
        *o += g * e;
    }
    let hum_f = rng.random_range(49.0..61.0);
    let hum = tone(hum_f, TARGET_RATE, n, 0.18);
    let hum2 = tone(2.0 * hum_f, TARGET_RATE, n, 0.09);
    add_into(&mut out, &hum);
    add_into(&mut out, &hum2);
    peak_scale(&mut out, 0.6);
    out
}

/// Populate the five conventional pool directories under `root` with
/// `per_pool` files each, around `dur_s` seconds long. Deterministic in
/// (seed, per_pool, dur_s).
pub fn make_toy_pools(root: &Path, per_pool: usize, dur_s: f64, seed: u64) -> Result<()> {
    let rate = f64::from(TARGET_RATE);
    let gens: [(&str, fn(&mut ChaCha8Rng, usize) -> Vec<f64>); 5] = [
        ("bonafide_speech", harmonic_speech),
        ("spoof_speech", spoof_speech),
        ("bonafide_env", bonafide_env),
        ("spoof_env", spoof_env),
        ("original_full", original_scene),
    ];
    for (pool_idx, (name, gen)) in gens.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        for i in 0..per_pool {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (0x9e37_79b9_7f4a_7c15u64
                    .wrapping_mul(1 + pool_idx as u64)
                    .wrapping_add(i as u64)),
            );
            let jitter: f64 = rng.random_range(0.0..0.2);
            let n = ((dur_s + jitter) * rate).round() as usize;
            let samples = gen(&mut rng, n);
            let w = Waveform::new(samples, TARGET_RATE);
            write_wav(&dir.join(format!("{name}_{i:05}.wav")), &w)?;
        }
    }
    Ok(())
}
