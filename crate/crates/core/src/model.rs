//! Model bundles: parameters plus the preprocessing geometry they were
//! trained with, saved together in one checkpoint.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{load_store, save_store, Array, ParamStore};
use crate::detector::{BaselineParams, DetectorParams};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::separation::MaskNetParams;
use crate::stft::StftConfig;

/// Preprocessing geometry shared by training and inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub chunk_win_s: f64,
    pub chunk_hop_s: f64,
}

impl PipelineConfig {
    /// 16 kHz, 64 ms / 16 ms STFT, 4 s windows with a 2 s hop.
    pub fn default_16k() -> Self {
        PipelineConfig {
            sample_rate: 16_000,
            stft: StftConfig::default_16k(),
            chunk_win_s: 4.0,
            chunk_hop_s: 2.0,
        }
    }

    /// Scaled-down geometry for fast experiments: 16 ms / 8 ms STFT and
    /// 0.75 s non-overlapping chunks.
    pub fn toy() -> Self {
        PipelineConfig {
            sample_rate: 16_000,
            stft: StftConfig::new(256, 128, 256).unwrap(),
            chunk_win_s: 0.75,
            chunk_hop_s: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.sample_rate == 0 {
            return Err(Error::BadConfig("sample rate must be positive".into()));
        }
        if self.chunk_win_s <= 0.0 || self.chunk_hop_s <= 0.0 || self.chunk_hop_s > self.chunk_win_s {
            return Err(Error::BadConfig(format!(
                "need 0 < chunk hop ({}) <= chunk win ({})",
                self.chunk_hop_s, self.chunk_win_s
            )));
        }
        Ok(())
    }

    pub fn chunk_win_samples(&self) -> usize {
        (self.chunk_win_s * f64::from(self.sample_rate)).round() as usize
    }

    pub fn chunk_hop_samples(&self) -> usize {
        (self.chunk_hop_s * f64::from(self.sample_rate)).round() as usize
    }

    fn to_meta(self) -> Array {
        Array::from_vec(
            &[6],
            vec![
                f64::from(self.sample_rate),
                self.stft.win_len as f64,
                self.stft.hop_len as f64,
                self.stft.fft_size as f64,
                self.chunk_win_s,
                self.chunk_hop_s,
            ],
        )
        .expect("meta shape")
    }

    fn from_meta(a: &Array) -> Result<Self> {
        let d = a.data();
        if d.len() != 6 {
            return Err(Error::BadCheckpoint(format!(
                "meta.pipeline has {} values, want 6",
                d.len()
            )));
        }
        let cfg = PipelineConfig {
            sample_rate: d[0] as u32,
            stft: StftConfig {
                win_len: d[1] as usize,
                hop_len: d[2] as usize,
                fft_size: d[3] as usize,
            },
            chunk_win_s: d[4],
            chunk_hop_s: d[5],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn attach_meta(store: &mut ParamStore, pipe: &PipelineConfig) -> Result<()> {
    store.add("meta.pipeline", pipe.to_meta())?;
    Ok(())
}

fn read_meta(store: &ParamStore) -> Result<PipelineConfig> {
    let id = store
        .id("meta.pipeline")
        .ok_or_else(|| Error::BadCheckpoint("checkpoint carries no meta.pipeline".into()))?;
    PipelineConfig::from_meta(store.value(id))
}

/// Separator plus detectors: the separation-enhanced system.
pub struct SepJointModel {
    pub store: ParamStore,
    pub sep: MaskNetParams,
    pub det: DetectorParams,
    pub pipe: PipelineConfig,
}

impl SepJointModel {
    pub fn init(pipe: PipelineConfig, seed: u64) -> Result<Self> {
        pipe.validate()?;
        let mut store = ParamStore::new();
        attach_meta(&mut store, &pipe)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sep = MaskNetParams::init(&mut store, "sep.", &mut rng)?;
        let det = DetectorParams::init(&mut store, "det.", &mut rng)?;
        Ok(SepJointModel {
            store,
            sep,
            det,
            pipe,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_store(&self.store, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = load_store(path)?;
        let pipe = read_meta(&store)?;
        let sep = MaskNetParams::from_store(&store, "sep.")?;
        let det = DetectorParams::from_store(&store, "det.")?;
        Ok(SepJointModel {
            store,
            sep,
            det,
            pipe,
        })
    }
}

/// The five-class baseline classifier.
pub struct BaselineModel {
    pub store: ParamStore,
    pub params: BaselineParams,
    pub pipe: PipelineConfig,
}

impl BaselineModel {
    pub fn init(pipe: PipelineConfig, seed: u64) -> Result<Self> {
        pipe.validate()?;
        let mut store = ParamStore::new();
        attach_meta(&mut store, &pipe)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = BaselineParams::init(&mut store, "baseline.", &mut rng)?;
        Ok(BaselineModel {
            store,
            params,
            pipe,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_store(&self.store, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = load_store(path)?;
        let pipe = read_meta(&store)?;
        let params = BaselineParams::from_store(&store, "baseline.")?;
        Ok(BaselineModel {
            store,
            params,
            pipe,
        })
    }
}

/// Scale factor that brings a chunk to peak 0.95 before it reaches any
/// model. Near-silent buffers (zero-padded tails of quiet files) pass
/// through unscaled.
pub fn ingest_gain(w: &Waveform) -> f64 {
    let peak = w.peak();
    if peak > 1e-9 {
        0.95 / peak
    } else {
        1.0
    }
}

pub fn scaled(w: &Waveform, gain: f64) -> Waveform {
    Waveform::new(w.samples.iter().map(|x| x * gain).collect(), w.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_keeps_pipe_and_params() {
        let pipe = PipelineConfig::toy();
        let m = SepJointModel::init(pipe, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let l = SepJointModel::load(&p).unwrap();
        assert_eq!(l.pipe, pipe);
        assert_eq!(l.store.len(), m.store.len());
        for (name, v) in m.store.iter() {
            let id = l.store.id(name).unwrap();
            assert_eq!(l.store.value(id).data(), v.data(), "param {name}");
        }
    }

    #[test]
    fn baseline_checkpoint_is_not_a_joint_model() {
        let pipe = PipelineConfig::toy();
        let m = BaselineModel::init(pipe, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.ckpt");
        m.save(&p).unwrap();
        assert!(BaselineModel::load(&p).is_ok());
        assert!(matches!(SepJointModel::load(&p), Err(Error::BadCheckpoint(_))));
    }

    #[test]
    fn ingest_gain_guards_silence() {
        let loud = Waveform::new(vec![0.5, -0.2], 16_000);
        assert!((ingest_gain(&loud) - 1.9).abs() < 1e-12);
        let silent = Waveform::new(vec![0.0; 4], 16_000);
        assert_eq!(ingest_gain(&silent), 1.0);
    }
}
