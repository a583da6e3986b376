//! Centered STFT / inverse STFT with periodic Hann analysis+synthesis
//! windows and per-sample overlap-add normalization.
//!
//! Both transforms are linear in their inputs, and this module also exposes
//! their exact adjoint maps. The autodiff layer wires forward/adjoint pairs
//! together so gradients can flow through masking in the spectral domain.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Analysis geometry. `win_len` samples per frame every `hop_len` samples,
/// zero-padded to `fft_size` before the transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
}

impl StftConfig {
    /// 64 ms window, 16 ms hop at 16 kHz.
    pub fn default_16k() -> Self {
        StftConfig {
            win_len: 1024,
            hop_len: 256,
            fft_size: 1024,
        }
    }

    pub fn new(win_len: usize, hop_len: usize, fft_size: usize) -> Result<Self> {
        let cfg = StftConfig {
            win_len,
            hop_len,
            fft_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_len == 0 || self.hop_len > self.win_len || self.win_len > self.fft_size {
            return Err(Error::BadConfig(format!(
                "need 0 < hop ({}) <= win ({}) <= fft ({})",
                self.hop_len, self.win_len, self.fft_size
            )));
        }
        // Periodic Hann satisfies constant overlap-add when the hop divides
        // the window into at least two segments.
        if self.win_len % self.hop_len != 0 || self.win_len / self.hop_len < 2 {
            return Err(Error::BadConfig(format!(
                "hop {} breaks the overlap-add property for win {}",
                self.hop_len, self.win_len
            )));
        }
        Ok(())
    }

    /// Number of frequency bins.
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Reflect padding applied at each end before framing.
    pub fn pad(&self) -> usize {
        self.win_len / 2
    }

    /// Number of frames for an input of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.win_len) / self.hop_len + 1
    }
}

/// F x T grid of complex values, stored as separate real/imaginary planes
/// in (bin, frame) row-major order.
#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub f: usize,
    pub t: usize,
    pub cfg: StftConfig,
    pub source_len: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| (r * r + i * i).sqrt())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|x| x.is_finite())
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                planner.plan_fft(
                    n,
                    if inverse {
                        FftDirection::Inverse
                    } else {
                        FftDirection::Forward
                    },
                )
            })
            .clone()
    })
}

/// Reflect-pad (no edge duplication) by `pad` samples on both sides.
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    debug_assert!(n > pad, "reflect padding needs len > pad");
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(x[i]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[n - 2 - i]);
    }
    out
}

/// Scatter-add the adjoint of reflect padding back onto the source extent.
fn reflect_fold(gpadded: &[f64], pad: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n];
    for i in 0..pad {
        g[pad - i] += gpadded[i];
    }
    for i in 0..n {
        g[i] += gpadded[pad + i];
    }
    for i in 0..pad {
        g[n - 2 - i] += gpadded[pad + n + i];
    }
    g
}

/// Forward STFT of `w` under `cfg`. Frames are centered: reflect padding of
/// win/2 aligns the center of frame `t` with input sample `t * hop`.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    if w.len() < cfg.win_len {
        return Err(Error::SignalTooShort {
            len: w.len(),
            min: cfg.win_len,
        });
    }
    let (re, im, f, t) = stft_raw(&w.samples, cfg);
    Ok(ComplexSpectrogram {
        re,
        im,
        f,
        t,
        cfg: *cfg,
        source_len: w.len(),
        sample_rate: w.sample_rate,
    })
}

/// Waveform samples -> (re, im, F, T). Panics on config misuse; callers go
/// through [`stft`] for validation.
pub fn stft_raw(x: &[f64], cfg: &StftConfig) -> (Vec<f64>, Vec<f64>, usize, usize) {
    let win = hann_periodic(cfg.win_len);
    let padded = reflect_pad(x, cfg.pad());
    let f_bins = cfg.bins();
    let t_frames = cfg.frames(x.len());
    let fft = plan(cfg.fft_size, false);
    let mut re = vec![0.0; f_bins * t_frames];
    let mut im = vec![0.0; f_bins * t_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..t_frames {
        let off = t * cfg.hop_len;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.win_len {
                Complex::new(padded[off + i] * win[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..f_bins {
            re[k * t_frames + t] = buf[k].re;
            im[k * t_frames + t] = buf[k].im;
        }
    }
    (re, im, f_bins, t_frames)
}

/// Adjoint of [`stft_raw`] as a linear map: spectral gradients back to a
/// gradient over the `n` input samples.
pub fn stft_adjoint_raw(gre: &[f64], gim: &[f64], cfg: &StftConfig, n: usize) -> Vec<f64> {
    let win = hann_periodic(cfg.win_len);
    let f_bins = cfg.bins();
    let t_frames = cfg.frames(n);
    debug_assert_eq!(gre.len(), f_bins * t_frames);
    let pad = cfg.pad();
    let padded_len = n + 2 * pad;
    let ifft = plan(cfg.fft_size, true);
    let mut gpadded = vec![0.0; padded_len];
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    for t in 0..t_frames {
        for b in buf.iter_mut() {
            *b = Complex::new(0.0, 0.0);
        }
        for k in 0..f_bins {
            buf[k] = Complex::new(gre[k * t_frames + t], gim[k * t_frames + t]);
        }
        ifft.process(&mut buf);
        let off = t * cfg.hop_len;
        for i in 0..cfg.win_len {
            gpadded[off + i] += win[i] * buf[i].re;
        }
    }
    reflect_fold(&gpadded, pad, n)
}

/// Per-sample sum of squared synthesis windows over the covered extent.
fn window_square_sum(cfg: &StftConfig, t_frames: usize) -> Vec<f64> {
    let win = hann_periodic(cfg.win_len);
    let extent = (t_frames - 1) * cfg.hop_len + cfg.win_len;
    let mut wsum = vec![0.0; extent];
    for t in 0..t_frames {
        let off = t * cfg.hop_len;
        for (i, &w) in win.iter().enumerate() {
            wsum[off + i] += w * w;
        }
    }
    for v in wsum.iter_mut() {
        *v = v.max(1e-12);
    }
    wsum
}

/// Inverse STFT by windowed overlap-add with exact per-sample normalization.
pub fn istft(s: &ComplexSpectrogram, out_len: usize) -> Result<Waveform> {
    s.cfg.validate()?;
    if s.f != s.cfg.bins() || s.t != s.cfg.frames(s.source_len) || s.re.len() != s.f * s.t || s.im.len() != s.f * s.t {
        return Err(Error::GeometryMismatch(format!(
            "{}x{} grid does not match config/source_len {}",
            s.f, s.t, s.source_len
        )));
    }
    if out_len > s.source_len {
        return Err(Error::GeometryMismatch(format!(
            "requested {} samples, analysis recorded {}",
            out_len, s.source_len
        )));
    }
    let samples = istft_raw(&s.re, &s.im, &s.cfg, s.t, out_len);
    Ok(Waveform::new(samples, s.sample_rate))
}

/// (re, im) planes -> time samples. `t_frames` must match the planes.
pub fn istft_raw(re: &[f64], im: &[f64], cfg: &StftConfig, t_frames: usize, out_len: usize) -> Vec<f64> {
    let win = hann_periodic(cfg.win_len);
    let f_bins = cfg.bins();
    let n = cfg.fft_size;
    let ifft = plan(n, true);
    let wsum = window_square_sum(cfg, t_frames);
    let mut acc = vec![0.0; wsum.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..t_frames {
        buf[0] = Complex::new(re[t], 0.0);
        for k in 1..f_bins - 1 {
            let c = Complex::new(re[k * t_frames + t], im[k * t_frames + t]);
            buf[k] = c;
            buf[n - k] = c.conj();
        }
        buf[n / 2] = Complex::new(re[(f_bins - 1) * t_frames + t], 0.0);
        ifft.process(&mut buf);
        let off = t * cfg.hop_len;
        let scale = 1.0 / n as f64;
        for i in 0..cfg.win_len {
            acc[off + i] += buf[i].re * scale * win[i];
        }
    }
    let pad = cfg.pad();
    (0..out_len).map(|i| acc[pad + i] / wsum[pad + i]).collect()
}

/// Adjoint of [`istft_raw`]: time-domain gradient back to (re, im) planes.
pub fn istft_adjoint_raw(
    gy: &[f64],
    cfg: &StftConfig,
    t_frames: usize,
    source_len: usize,
) -> (Vec<f64>, Vec<f64>) {
    let win = hann_periodic(cfg.win_len);
    let f_bins = cfg.bins();
    let n = cfg.fft_size;
    let fft = plan(n, false);
    let wsum = window_square_sum(cfg, t_frames);
    let pad = cfg.pad();
    let mut spread = vec![0.0; wsum.len()];
    for (i, &g) in gy.iter().enumerate() {
        debug_assert!(i < source_len);
        spread[pad + i] = g / wsum[pad + i];
    }
    let mut gre = vec![0.0; f_bins * t_frames];
    let mut gim = vec![0.0; f_bins * t_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..t_frames {
        let off = t * cfg.hop_len;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.win_len {
                Complex::new(spread[off + i] * win[i] * scale, 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        gre[t] += buf[0].re;
        for k in 1..f_bins - 1 {
            gre[k * t_frames + t] += 2.0 * buf[k].re;
            gim[k * t_frames + t] += 2.0 * buf[k].im;
        }
        gre[(f_bins - 1) * t_frames + t] += buf[n / 2].re;
    }
    (gre, gim)
}
