//! Corpus forging: SNR-controlled mixing of speech and environment pools
//! into the five-class taxonomy, stratified splits, and manifest handling.
//!
//! Stems are stored at 16-bit PCM, and the recorded SNR is measured from
//! the quantized stems, so validation can recompute it exactly. Mixtures
//! are the sample-wise sum of the stored stems (a shared headroom factor
//! keeps that sum on the PCM grid without clipping).

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{mix_at_snr, resample, rms, Waveform};
use crate::error::{Error, Result};
use crate::wav::{quantize_roundtrip, read_wav, write_wav};

pub const TARGET_RATE: u32 = 16_000;

/// The five-class taxonomy. Classes 1-4 are artificial mixtures; class 0 is
/// an authentic recording kept whole.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ClassLabel {
    Original = 0,
    BonafideBonafide = 1,
    SpoofBonafide = 2,
    BonafideSpoof = 3,
    SpoofSpoof = 4,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::Original,
        ClassLabel::BonafideBonafide,
        ClassLabel::SpoofBonafide,
        ClassLabel::BonafideSpoof,
        ClassLabel::SpoofSpoof,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        ClassLabel::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::BadManifest(format!("class id {id} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Original => "original",
            ClassLabel::BonafideBonafide => "bonafide_bonafide",
            ClassLabel::SpoofBonafide => "spoof_bonafide",
            ClassLabel::BonafideSpoof => "bonafide_spoof",
            ClassLabel::SpoofSpoof => "spoof_spoof",
        }
    }

    /// True for classes built by mixing two sources.
    pub fn is_mixed(self) -> bool {
        self != ClassLabel::Original
    }

    /// Speech component carries a spoof (classes 2 and 4).
    pub fn speech_spoofed(self) -> bool {
        matches!(self, ClassLabel::SpoofBonafide | ClassLabel::SpoofSpoof)
    }

    /// Environment component carries a spoof (classes 3 and 4).
    pub fn env_spoofed(self) -> bool {
        matches!(self, ClassLabel::BonafideSpoof | ClassLabel::SpoofSpoof)
    }
}

impl TryFrom<u8> for ClassLabel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        ClassLabel::from_id(v)
    }
}

impl From<ClassLabel> for u8 {
    fn from(c: ClassLabel) -> u8 {
        c.id()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::BadConfig(format!("unknown split `{s}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Source roles a pool file can play.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolRole {
    BonafideSpeech,
    SpoofSpeech,
    BonafideEnv,
    SpoofEnv,
    OriginalFull,
}

impl PoolRole {
    pub fn name(self) -> &'static str {
        match self {
            PoolRole::BonafideSpeech => "bonafide_speech",
            PoolRole::SpoofSpeech => "spoof_speech",
            PoolRole::BonafideEnv => "bonafide_env",
            PoolRole::SpoofEnv => "spoof_env",
            PoolRole::OriginalFull => "original_full",
        }
    }
}

/// Directories holding the five source pools.
#[derive(Clone, Debug)]
pub struct PoolSpec {
    pub bonafide_speech: PathBuf,
    pub spoof_speech: PathBuf,
    pub bonafide_env: PathBuf,
    pub spoof_env: PathBuf,
    pub original_full: PathBuf,
}

impl PoolSpec {
    /// All pools rooted under one directory with the conventional names.
    pub fn under(root: &Path) -> Self {
        PoolSpec {
            bonafide_speech: root.join("bonafide_speech"),
            spoof_speech: root.join("spoof_speech"),
            bonafide_env: root.join("bonafide_env"),
            spoof_env: root.join("spoof_env"),
            original_full: root.join("original_full"),
        }
    }

    /// Parse a key=value pools file naming the five directories.
    pub fn from_config(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut dirs: [Option<PathBuf>; 5] = Default::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::BadConfig(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            let slot = match key.trim() {
                "bonafide_speech" => 0,
                "spoof_speech" => 1,
                "bonafide_env" => 2,
                "spoof_env" => 3,
                "original_full" => 4,
                other => {
                    return Err(Error::BadConfig(format!(
                        "{}:{}: unknown pool `{other}`",
                        path.display(),
                        lineno + 1
                    )))
                }
            };
            let p = PathBuf::from(value.trim());
            dirs[slot] = Some(if p.is_absolute() { p } else { base.join(p) });
        }
        let need = ["bonafide_speech", "spoof_speech", "bonafide_env", "spoof_env", "original_full"];
        for (i, name) in need.iter().enumerate() {
            if dirs[i].is_none() {
                return Err(Error::BadConfig(format!("pools file missing `{name}`")));
            }
        }
        let mut it = dirs.into_iter().map(Option::unwrap);
        Ok(PoolSpec {
            bonafide_speech: it.next().unwrap(),
            spoof_speech: it.next().unwrap(),
            bonafide_env: it.next().unwrap(),
            spoof_env: it.next().unwrap(),
            original_full: it.next().unwrap(),
        })
    }

    pub fn dir(&self, role: PoolRole) -> &Path {
        match role {
            PoolRole::BonafideSpeech => &self.bonafide_speech,
            PoolRole::SpoofSpeech => &self.spoof_speech,
            PoolRole::BonafideEnv => &self.bonafide_env,
            PoolRole::SpoofEnv => &self.spoof_env,
            PoolRole::OriginalFull => &self.original_full,
        }
    }
}

/// One dataset record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub utt_id: String,
    /// Mixture path relative to the corpus root.
    pub path: String,
    pub class: ClassLabel,
    pub split: Option<Split>,
    pub snr_db: Option<f64>,
    /// "role:filename" provenance, e.g. "spoof_speech:tone_003.wav".
    pub speech_src: Option<String>,
    pub env_src: Option<String>,
    pub duration_s: f64,
}

impl ManifestEntry {
    pub fn stem_paths(&self, root: &Path) -> (PathBuf, PathBuf) {
        (
            root.join("stems").join(format!("{}.speech.wav", self.utt_id)),
            root.join("stems").join(format!("{}.env.wav", self.utt_id)),
        )
    }
}

/// SNR draw policy for mixed classes: uniform in [min_db, max_db].
#[derive(Clone, Copy, Debug)]
pub struct SnrPolicy {
    pub min_db: f64,
    pub max_db: f64,
}

impl Default for SnrPolicy {
    fn default() -> Self {
        SnrPolicy {
            min_db: 0.0,
            max_db: 10.0,
        }
    }
}

/// Forge-wide knobs.
#[derive(Clone, Debug)]
pub struct ForgeConfig {
    pub snr: SnrPolicy,
    pub min_dur_s: f64,
    pub max_dur_s: f64,
    /// Keep quantized component stems next to the mixtures (training needs
    /// them as references).
    pub keep_stems: bool,
    pub jobs: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            snr: SnrPolicy::default(),
            min_dur_s: 5.0,
            max_dur_s: 21.0,
            keep_stems: true,
            jobs: 1,
        }
    }
}

fn provenance(role: PoolRole, file: &Path) -> String {
    format!(
        "{}:{}",
        role.name(),
        file.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
    )
}

/// Role encoded in a provenance string.
pub fn provenance_role(src: &str) -> Option<&str> {
    src.split_once(':').map(|(role, _)| role)
}

fn load_resampled(path: &Path) -> Result<Waveform> {
    let w = read_wav(path)?;
    resample(&w, TARGET_RATE)
}

fn truncate_to(w: &Waveform, n: usize) -> Waveform {
    Waveform::new(w.samples[..n.min(w.len())].to_vec(), w.sample_rate)
}

/// Mix one (speech, env) pair into a labeled sample and write it out.
///
/// Both inputs are resampled to 16 kHz, the longer one is truncated from
/// the end to the shorter one's length, and the environment is scaled to
/// hit `snr_db`. The recorded SNR is re-measured from the 16-bit stems.
pub fn synthesize_sample(
    cfg: &ForgeConfig,
    utt_id: &str,
    speech_file: &Path,
    speech_role: PoolRole,
    env_file: &Path,
    env_role: PoolRole,
    class: ClassLabel,
    snr_db: f64,
    root: &Path,
) -> Result<ManifestEntry> {
    if !class.is_mixed() {
        return Err(Error::DomainError("class 0 goes through ingest_original".into()));
    }
    let speech = load_resampled(speech_file)?;
    let env = load_resampled(env_file)?;
    let n = speech.len().min(env.len());
    let max_n = (cfg.max_dur_s * f64::from(TARGET_RATE)).round() as usize;
    let n = n.min(max_n);
    let dur = n as f64 / f64::from(TARGET_RATE);
    if dur < cfg.min_dur_s {
        return Err(Error::TooShort {
            got_s: dur,
            min_s: cfg.min_dur_s,
        });
    }
    let speech = truncate_to(&speech, n);
    let env = truncate_to(&env, n);
    let (mix, scaled_env, _gain) = mix_at_snr(&speech, &env, snr_db)?;

    // Shared headroom so stems and their sum stay on the 16-bit grid.
    let peak = speech.peak().max(scaled_env.peak()).max(mix.peak());
    let c = if peak > 0.99 { 0.99 / peak } else { 1.0 };
    let scale = |w: &Waveform| -> Vec<f64> { w.samples.iter().map(|x| x * c).collect() };
    let speech_q = quantize_roundtrip(&scale(&speech));
    let env_q = quantize_roundtrip(&scale(&scaled_env));
    let mix_q: Vec<f64> = speech_q.iter().zip(&env_q).map(|(a, b)| a + b).collect();

    let speech_q = Waveform::new(speech_q, TARGET_RATE);
    let env_q = Waveform::new(env_q, TARGET_RATE);
    let mix_q = Waveform::new(mix_q, TARGET_RATE);
    let achieved = 20.0 * (rms(&speech_q)? / rms(&env_q)?).log10();

    let rel_path = format!("{}/{}.wav", class.name(), utt_id);
    let out = root.join(&rel_path);
    fs::create_dir_all(out.parent().unwrap()).map_err(|e| Error::io("create class dir", e))?;
    write_wav(&out, &mix_q)?;
    if cfg.keep_stems {
        let stems = root.join("stems");
        fs::create_dir_all(&stems).map_err(|e| Error::io("create stems dir", e))?;
        write_wav(&stems.join(format!("{utt_id}.speech.wav")), &speech_q)?;
        write_wav(&stems.join(format!("{utt_id}.env.wav")), &env_q)?;
    }
    Ok(ManifestEntry {
        utt_id: utt_id.to_string(),
        path: rel_path,
        class,
        split: None,
        snr_db: Some(achieved),
        speech_src: Some(provenance(speech_role, speech_file)),
        env_src: Some(provenance(env_role, env_file)),
        duration_s: dur,
    })
}

/// Copy an authentic recording into the corpus as a class-0 entry.
pub fn ingest_original(cfg: &ForgeConfig, utt_id: &str, file: &Path, root: &Path) -> Result<ManifestEntry> {
    let w = load_resampled(file)?;
    let max_n = (cfg.max_dur_s * f64::from(TARGET_RATE)).round() as usize;
    let w = truncate_to(&w, max_n);
    let dur = w.len() as f64 / f64::from(TARGET_RATE);
    if dur < cfg.min_dur_s {
        return Err(Error::TooShort {
            got_s: dur,
            min_s: cfg.min_dur_s,
        });
    }
    let q = Waveform::new(quantize_roundtrip(&w.samples), TARGET_RATE);
    let class = ClassLabel::Original;
    let rel_path = format!("{}/{}.wav", class.name(), utt_id);
    let out = root.join(&rel_path);
    fs::create_dir_all(out.parent().unwrap()).map_err(|e| Error::io("create class dir", e))?;
    write_wav(&out, &q)?;
    Ok(ManifestEntry {
        utt_id: utt_id.to_string(),
        path: rel_path,
        class,
        split: None,
        snr_db: None,
        speech_src: None,
        env_src: None,
        duration_s: dur,
    })
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(format!("read pool dir {}", dir.display()), e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "wav").unwrap_or(false))
        .collect();
    files.sort();
    Ok(files)
}

struct PlanItem {
    utt_id: String,
    class: ClassLabel,
    speech: Option<(PathBuf, PoolRole)>,
    env: Option<(PathBuf, PoolRole)>,
    original: Option<PathBuf>,
    snr_db: Option<f64>,
}

/// Build a class-balanced corpus: `n_per_class` samples for each of the
/// five classes, sources drawn without replacement, SNR per `cfg.snr`.
/// Deterministic in (pools, n_per_class, cfg, seed).
pub fn build_corpus(
    pools: &PoolSpec,
    n_per_class: usize,
    cfg: &ForgeConfig,
    seed: u64,
    root: &Path,
) -> Result<Vec<ManifestEntry>> {
    if n_per_class == 0 {
        return Err(Error::BadConfig("n_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut draw_pools: Vec<(PoolRole, Vec<PathBuf>, usize)> = [
        (PoolRole::BonafideSpeech, 2 * n_per_class),
        (PoolRole::SpoofSpeech, 2 * n_per_class),
        (PoolRole::BonafideEnv, 2 * n_per_class),
        (PoolRole::SpoofEnv, 2 * n_per_class),
        (PoolRole::OriginalFull, n_per_class),
    ]
    .into_iter()
    .map(|(role, need)| -> Result<_> {
        let mut files = list_wavs(pools.dir(role))?;
        if files.len() < need {
            return Err(Error::InsufficientPool {
                pool: role.name().into(),
                need,
                have: files.len(),
            });
        }
        files.shuffle(&mut rng);
        Ok((role, files, 0))
    })
    .collect::<Result<_>>()?;

    let take = |role: PoolRole, pools: &mut Vec<(PoolRole, Vec<PathBuf>, usize)>| -> PathBuf {
        let slot = pools.iter_mut().find(|(r, _, _)| *r == role).unwrap();
        let f = slot.1[slot.2].clone();
        slot.2 += 1;
        f
    };

    let mut plan: Vec<PlanItem> = Vec::with_capacity(5 * n_per_class);
    for class in ClassLabel::ALL {
        for i in 0..n_per_class {
            let utt_id = format!("c{}_{:05}", class.id(), i);
            if class == ClassLabel::Original {
                plan.push(PlanItem {
                    utt_id,
                    class,
                    speech: None,
                    env: None,
                    original: Some(take(PoolRole::OriginalFull, &mut draw_pools)),
                    snr_db: None,
                });
                continue;
            }
            let s_role = if class.speech_spoofed() {
                PoolRole::SpoofSpeech
            } else {
                PoolRole::BonafideSpeech
            };
            let e_role = if class.env_spoofed() {
                PoolRole::SpoofEnv
            } else {
                PoolRole::BonafideEnv
            };
            let s_file = take(s_role, &mut draw_pools);
            let e_file = take(e_role, &mut draw_pools);
            if s_file == e_file {
                return Err(Error::DomainError(format!(
                    "speech and environment sources must be distinct files, both were {}",
                    s_file.display()
                )));
            }
            plan.push(PlanItem {
                utt_id,
                class,
                speech: Some((s_file, s_role)),
                env: Some((e_file, e_role)),
                original: None,
                snr_db: Some(rng.random_range(cfg.snr.min_db..=cfg.snr.max_db)),
            });
        }
    }

    let mut entries = run_parallel(plan, cfg.jobs.max(1), |item| -> Result<ManifestEntry> {
        match item.class {
            ClassLabel::Original => ingest_original(cfg, &item.utt_id, item.original.as_ref().unwrap(), root),
            _ => {
                let (s, s_role) = item.speech.as_ref().unwrap();
                let (e, e_role) = item.env.as_ref().unwrap();
                synthesize_sample(
                    cfg,
                    &item.utt_id,
                    s,
                    *s_role,
                    e,
                    *e_role,
                    item.class,
                    item.snr_db.unwrap(),
                    root,
                )
            }
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok(entries)
}

/// Run `f` across `items` on up to `jobs` threads, preserving item order.
fn run_parallel<T: Send + Sync, R: Send>(items: Vec<T>, jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let n = items.len();
    let chunk = n.div_ceil(jobs);
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let slots: Vec<(usize, &[T])> = items
        .chunks(chunk)
        .enumerate()
        .map(|(i, c)| (i * chunk, c))
        .collect();
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = slots
            .into_iter()
            .map(|(base, part)| scope.spawn(move || (base, part.iter().map(f).collect::<Vec<R>>())))
            .collect();
        for h in handles {
            let (base, rs) = h.join().expect("forge worker panicked");
            for (i, r) in rs.into_iter().enumerate() {
                out[base + i] = Some(r);
            }
        }
    });
    out.into_iter().map(Option::unwrap).collect()
}

/// Largest-remainder stratified split. Ratios must be positive (unless
/// `allow_empty`) and sum to 1; every class needs at least 3 members.
pub fn stratified_split(
    entries: &mut [ManifestEntry],
    ratios: (f64, f64, f64),
    seed: u64,
    allow_empty: bool,
) -> Result<()> {
    let r = [ratios.0, ratios.1, ratios.2];
    if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadConfig(format!("split ratios {r:?} do not sum to 1")));
    }
    if r.iter().any(|&x| x < 0.0) || (!allow_empty && r.iter().any(|&x| x == 0.0)) {
        return Err(Error::BadConfig(format!(
            "split ratios {r:?} must all be positive (pass allow_empty to permit zero)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in ClassLabel::ALL {
        let mut idx: Vec<usize> = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class == class)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 3 {
            return Err(Error::TooFewForSplit {
                class: class.id(),
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let quotas: Vec<f64> = r.iter().map(|&x| x * n as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|&q| q.floor() as usize).collect();
        let mut leftover = n - counts.iter().sum::<usize>();
        // Seats go to the largest fractional remainders; ties favor the
        // earlier split (train, dev, eval).
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &s in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            counts[s] += 1;
            leftover -= 1;
        }
        let mut at = 0;
        for (s, &count) in counts.iter().enumerate() {
            for &i in &idx[at..at + count] {
                entries[i].split = Some(Split::ALL[s]);
            }
            at += count;
        }
    }
    Ok(())
}

/// Write entries as UTF-8 JSONL ordered by utt_id.
pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut sorted: Vec<&ManifestEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    let mut out = String::new();
    for e in sorted {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::BadManifest(e.to_string()))?);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::BadManifest(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// One validation finding.
#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub utt_id: String,
    pub what: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ValidationReport {
    pub n_entries: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, utt: &str, what: impl Into<String>) {
        self.violations.push(Violation {
            utt_id: utt.to_string(),
            what: what.into(),
        });
    }
}

/// Check corpus integrity: files exist and parse, rates and durations hold,
/// classes are balanced, splits match the expected ratios, provenance is
/// consistent with the class, and recorded SNR matches a re-measurement
/// from the stored stems within `snr_tol_db`.
pub fn validate_corpus(
    entries: &[ManifestEntry],
    root: &Path,
    expected_ratios: (f64, f64, f64),
    snr_tol_db: f64,
    cfg: &ForgeConfig,
) -> ValidationReport {
    let mut report = ValidationReport {
        n_entries: entries.len(),
        ..Default::default()
    };

    let mut class_counts = [0usize; 5];
    let mut split_counts = std::collections::HashMap::<(ClassLabel, Split), usize>::new();
    for e in entries {
        class_counts[e.class.id() as usize] += 1;
        if let Some(s) = e.split {
            *split_counts.entry((e.class, s)).or_insert(0) += 1;
        } else {
            report.flag(&e.utt_id, "split not assigned");
        }

        // Provenance consistent with the class row.
        match e.class {
            ClassLabel::Original => {
                if e.snr_db.is_some() || e.speech_src.is_some() || e.env_src.is_some() {
                    report.flag(&e.utt_id, "class 0 must have null snr and sources");
                }
            }
            c => {
                let want_speech = if c.speech_spoofed() { "spoof_speech" } else { "bonafide_speech" };
                let want_env = if c.env_spoofed() { "spoof_env" } else { "bonafide_env" };
                match (&e.speech_src, &e.env_src) {
                    (Some(s), Some(v)) => {
                        if provenance_role(s) != Some(want_speech) {
                            report.flag(&e.utt_id, format!("speech source `{s}` inconsistent with class {c}"));
                        }
                        if provenance_role(v) != Some(want_env) {
                            report.flag(&e.utt_id, format!("env source `{v}` inconsistent with class {c}"));
                        }
                    }
                    _ => report.flag(&e.utt_id, "mixed class missing source provenance"),
                }
                if e.snr_db.is_none() {
                    report.flag(&e.utt_id, "mixed class missing snr_db");
                }
            }
        }

        // Audio on disk.
        let mix = match read_wav(&root.join(&e.path)) {
            Ok(w) => w,
            Err(err) => {
                report.flag(&e.utt_id, format!("mixture unreadable: {err}"));
                continue;
            }
        };
        if mix.sample_rate != TARGET_RATE {
            report.flag(&e.utt_id, format!("sample rate {} != {TARGET_RATE}", mix.sample_rate));
        }
        let dur = mix.duration_s();
        if (dur - e.duration_s).abs() > 1.0 / f64::from(TARGET_RATE) {
            report.flag(&e.utt_id, format!("duration {dur:.4}s != recorded {:.4}s", e.duration_s));
        }
        if dur < cfg.min_dur_s - 1e-9 || dur > cfg.max_dur_s + 1e-9 {
            report.flag(&e.utt_id, format!("duration {dur:.2}s outside [{}, {}]", cfg.min_dur_s, cfg.max_dur_s));
        }

        // SNR re-measured from stems when they exist.
        if e.class.is_mixed() {
            let (sp, ep) = e.stem_paths(root);
            if sp.exists() && ep.exists() {
                match (read_wav(&sp), read_wav(&ep), e.snr_db) {
                    (Ok(s), Ok(v), Some(recorded)) => {
                        match (rms(&s), rms(&v)) {
                            (Ok(rs), Ok(re)) if re > 0.0 => {
                                let measured = 20.0 * (rs / re).log10();
                                if (measured - recorded).abs() > snr_tol_db {
                                    report.flag(
                                        &e.utt_id,
                                        format!("snr {measured:.6} dB != recorded {recorded:.6} dB"),
                                    );
                                }
                            }
                            _ => report.flag(&e.utt_id, "stems are empty or silent"),
                        }
                        // The mixture must be the sample-wise stem sum.
                        if s.len() != mix.len()
                            || s.samples
                                .iter()
                                .zip(&v.samples)
                                .zip(&mix.samples)
                                .any(|((a, b), m)| (a + b - m).abs() > 0.5 / 32768.0)
                        {
                            report.flag(&e.utt_id, "mixture != speech stem + env stem");
                        }
                    }
                    _ => report.flag(&e.utt_id, "stems unreadable"),
                }
            } else if cfg.keep_stems {
                report.flag(&e.utt_id, "stems missing");
            }
        }
    }

    // Class balance.
    let n0 = class_counts[0];
    if class_counts.iter().any(|&c| c != n0) {
        report.flag("-", format!("class imbalance: {class_counts:?}"));
    }

    // Split ratios per class, against largest-remainder expectations.
    let r = [expected_ratios.0, expected_ratios.1, expected_ratios.2];
    for class in ClassLabel::ALL {
        let n: usize = Split::ALL
            .iter()
            .map(|&s| split_counts.get(&(class, s)).copied().unwrap_or(0))
            .sum();
        if n == 0 {
            continue;
        }
        let expected = largest_remainder(n, &r);
        for (i, &s) in Split::ALL.iter().enumerate() {
            let got = split_counts.get(&(class, s)).copied().unwrap_or(0);
            if got != expected[i] {
                report.flag(
                    "-",
                    format!("class {class} split {s}: {got} entries, expected {}", expected[i]),
                );
            }
        }
    }
    report
}

/// Largest-remainder apportionment of `n` items over `ratios` (ties to the
/// earlier slot), mirroring [`stratified_split`].
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|&x| x * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|&q| q.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[s] += 1;
        leftover -= 1;
    }
    counts
}
