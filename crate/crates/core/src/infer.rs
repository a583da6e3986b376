//! Fused five-class inference and precision/recall/F1 evaluation.
//!
//! Three binary verdicts per chunk (mixture, speech, environment) map onto
//! the five-class taxonomy; chunk predictions aggregate to a file label by
//! majority vote with ties broken toward the lowest class id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detector::{classify, embed, ProbabilityPair};
use crate::dsp::{chunk, Waveform};
use crate::error::{Error, Result};
use crate::forge::{ClassLabel, ManifestEntry, Split};
use crate::model::{ingest_gain, scaled, BaselineModel, SepJointModel};
use crate::separation::separate;

/// The three binary verdicts for one chunk, with their probabilities.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ComponentDecision {
    /// P(original), P(mixed)
    pub mixture: [f64; 2],
    /// P(bona fide), P(spoofed) on the separated speech
    pub speech: [f64; 2],
    /// P(bona fide), P(spoofed) on the separated environment
    pub env: [f64; 2],
}

impl ComponentDecision {
    pub fn from_pairs(mixture: ProbabilityPair, speech: ProbabilityPair, env: ProbabilityPair) -> Self {
        ComponentDecision {
            mixture: mixture.p,
            speech: speech.p,
            env: env.p,
        }
    }

    pub fn mixture_says_mixed(&self) -> bool {
        self.mixture[1] > self.mixture[0]
    }

    pub fn speech_says_spoof(&self) -> bool {
        self.speech[1] > self.speech[0]
    }

    pub fn env_says_spoof(&self) -> bool {
        self.env[1] > self.env[0]
    }
}

/// Map the three verdicts to a class. The mixture decision takes
/// precedence: anything judged original is class 0 regardless of the
/// component verdicts, so all 8 combinations are covered.
pub fn fuse_decisions(d: &ComponentDecision) -> ClassLabel {
    if !d.mixture_says_mixed() {
        return ClassLabel::Original;
    }
    let id = 1 + u8::from(d.speech_says_spoof()) + 2 * u8::from(d.env_says_spoof());
    ClassLabel::from_id(id).expect("fused id is always 1..=4")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub utt_id: String,
    pub chunk_index: usize,
    pub decision: ComponentDecision,
    pub fused: ClassLabel,
}

/// Run the full decision pipeline on one already-cut chunk.
pub fn predict_segment(model: &SepJointModel, chunk: &Waveform, utt_id: &str, chunk_index: usize) -> Result<SegmentPrediction> {
    let gain = ingest_gain(chunk);
    let w = scaled(chunk, gain);
    let cfg = &model.pipe.stft;
    let emb_mix = embed(&model.store, &model.det.embed, &w, cfg)?;
    let p_mix = classify(&model.store, &model.det.mixture, &emb_mix)?;
    let out = separate(&model.store, &model.sep, &w, cfg)?;
    let emb_speech = embed(&model.store, &model.det.embed, &out.speech, cfg)?;
    let p_speech = classify(&model.store, &model.det.speech, &emb_speech)?;
    let emb_env = embed(&model.store, &model.det.embed, &out.environment, cfg)?;
    let p_env = classify(&model.store, &model.det.env, &emb_env)?;
    let decision = ComponentDecision::from_pairs(p_mix, p_speech, p_env);
    Ok(SegmentPrediction {
        utt_id: utt_id.to_string(),
        chunk_index,
        fused: fuse_decisions(&decision),
        decision,
    })
}

/// Most frequent label; ties go to the lowest class id.
pub fn majority_vote(labels: &[ClassLabel]) -> ClassLabel {
    let mut counts = [0usize; 5];
    for &l in labels {
        counts[l.id() as usize] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u8)
        .unwrap_or(0);
    ClassLabel::from_id(best).unwrap()
}

/// Chunk a file, predict each chunk, majority-vote the fused labels.
pub fn predict_file(model: &SepJointModel, w: &Waveform, utt_id: &str) -> Result<(ClassLabel, Vec<SegmentPrediction>)> {
    let chunks = chunk(w, model.pipe.chunk_win_s, model.pipe.chunk_hop_s);
    let mut segments = Vec::with_capacity(chunks.len());
    for (i, c) in chunks.iter().enumerate() {
        segments.push(predict_segment(model, c, utt_id, i)?);
    }
    let labels: Vec<ClassLabel> = segments.iter().map(|s| s.fused).collect();
    Ok((majority_vote(&labels), segments))
}

/// Baseline file prediction: per-chunk argmax of the five-class head, then
/// the same majority vote.
pub fn predict_file_baseline(model: &BaselineModel, w: &Waveform) -> Result<ClassLabel> {
    let chunks = chunk(w, model.pipe.chunk_win_s, model.pipe.chunk_hop_s);
    let mut labels = Vec::with_capacity(chunks.len());
    for c in &chunks {
        let gain = ingest_gain(c);
        let scaled_chunk = scaled(c, gain);
        let probs = crate::detector::five_class_baseline(&model.store, &model.params, &scaled_chunk, &model.pipe.stft)?;
        let arg = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i as u8)
            .unwrap_or(0);
        labels.push(ClassLabel::from_id(arg)?);
    }
    Ok(majority_vote(&labels))
}

/// Per-class precision/recall/F1 plus macro averages and the confusion
/// matrix (rows = truth, columns = prediction).
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub n_classes: usize,
    pub n_files: usize,
    pub confusion: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Metrics over (truth, prediction) index pairs. Zero denominators yield a
/// metric of 0.
pub fn compute_metrics(pairs: &[(usize, usize)], n_classes: usize) -> EvalReport {
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for &(t, p) in pairs {
        confusion[t][p] += 1;
    }
    let mut precision = vec![0.0; n_classes];
    let mut recall = vec![0.0; n_classes];
    let mut f1 = vec![0.0; n_classes];
    for k in 0..n_classes {
        let tp = confusion[k][k];
        let fp: usize = (0..n_classes).filter(|&r| r != k).map(|r| confusion[r][k]).sum();
        let fn_: usize = (0..n_classes).filter(|&c| c != k).map(|c| confusion[k][c]).sum();
        precision[k] = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        recall[k] = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        f1[k] = if precision[k] + recall[k] > 0.0 {
            2.0 * precision[k] * recall[k] / (precision[k] + recall[k])
        } else {
            0.0
        };
    }
    let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
    let n = pairs.len();
    EvalReport {
        n_classes,
        n_files: n,
        confusion,
        macro_precision: precision.iter().sum::<f64>() / n_classes as f64,
        macro_recall: recall.iter().sum::<f64>() / n_classes as f64,
        macro_f1: f1.iter().sum::<f64>() / n_classes as f64,
        precision,
        recall,
        f1,
        accuracy: if n > 0 { correct as f64 / n as f64 } else { 0.0 },
    }
}

/// Score predictions against the manifest's `split` entries. Predictions
/// must cover that split exactly: no missing and no extra utterances.
pub fn evaluate(
    predictions: &BTreeMap<String, ClassLabel>,
    manifest: &[ManifestEntry],
    split: Split,
) -> Result<EvalReport> {
    let expected: BTreeMap<&str, ClassLabel> = manifest
        .iter()
        .filter(|e| e.split == Some(split))
        .map(|e| (e.utt_id.as_str(), e.class))
        .collect();
    let missing: Vec<&&str> = expected
        .keys()
        .filter(|k| !predictions.contains_key(**k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::CoverageError(format!(
            "{} {split} utterances lack predictions (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    let extra: BTreeSet<&str> = predictions
        .keys()
        .map(String::as_str)
        .filter(|k| !expected.contains_key(*k))
        .collect();
    if !extra.is_empty() {
        return Err(Error::CoverageError(format!(
            "{} predictions are not in the {split} split (first: {})",
            extra.len(),
            extra.iter().next().unwrap()
        )));
    }
    let pairs: Vec<(usize, usize)> = expected
        .iter()
        .map(|(utt, truth)| (truth.id() as usize, predictions[*utt].id() as usize))
        .collect();
    Ok(compute_metrics(&pairs, 5))
}

/// Binary segment-level reports for the three heads, in the order
/// (mixture, speech, environment). The mixture head is scored on every
/// segment; component heads only where component ground truth exists
/// (mixed classes).
pub fn evaluate_segment_heads(
    segments: &[SegmentPrediction],
    manifest: &[ManifestEntry],
) -> Result<[EvalReport; 3]> {
    let classes: BTreeMap<&str, ClassLabel> =
        manifest.iter().map(|e| (e.utt_id.as_str(), e.class)).collect();
    let mut mix_pairs = Vec::new();
    let mut speech_pairs = Vec::new();
    let mut env_pairs = Vec::new();
    for s in segments {
        let class = *classes
            .get(s.utt_id.as_str())
            .ok_or_else(|| Error::CoverageError(format!("segment for unknown utt `{}`", s.utt_id)))?;
        mix_pairs.push((
            usize::from(class.is_mixed()),
            usize::from(s.decision.mixture_says_mixed()),
        ));
        if class.is_mixed() {
            speech_pairs.push((
                usize::from(class.speech_spoofed()),
                usize::from(s.decision.speech_says_spoof()),
            ));
            env_pairs.push((
                usize::from(class.env_spoofed()),
                usize::from(s.decision.env_says_spoof()),
            ));
        }
    }
    Ok([
        compute_metrics(&mix_pairs, 2),
        compute_metrics(&speech_pairs, 2),
        compute_metrics(&env_pairs, 2),
    ])
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class  precision  recall     f1")?;
        for k in 0..self.n_classes {
            writeln!(
                f,
                "{:<6} {:<10.3} {:<10.3} {:<10.3}",
                k, self.precision[k], self.recall[k], self.f1[k]
            )?;
        }
        writeln!(
            f,
            "macro  {:<10.3} {:<10.3} {:<10.3}",
            self.macro_precision, self.macro_recall, self.macro_f1
        )?;
        write!(f, "{} files, accuracy {:.3}", self.n_files, self.accuracy)
    }
}

/// One line of the predictions JSONL file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub utt_id: String,
    pub class: ClassLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentPrediction>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(mixed: bool, speech_spoof: bool, env_spoof: bool) -> ComponentDecision {
        let pair = |hot: bool| if hot { [0.2, 0.8] } else { [0.8, 0.2] };
        ComponentDecision {
            mixture: pair(mixed),
            speech: pair(speech_spoof),
            env: pair(env_spoof),
        }
    }

    #[test]
    fn fusion_covers_all_eight_combinations() {
        let mut reached = std::collections::BTreeSet::new();
        for mixed in [false, true] {
            for sp in [false, true] {
                for en in [false, true] {
                    let fused = fuse_decisions(&decision(mixed, sp, en));
                    let expect = if !mixed {
                        ClassLabel::Original
                    } else {
                        ClassLabel::from_id(1 + u8::from(sp) + 2 * u8::from(en)).unwrap()
                    };
                    assert_eq!(fused, expect);
                    reached.insert(fused.id());
                }
            }
        }
        assert_eq!(reached.len(), 5);
    }

    #[test]
    fn fusion_examples() {
        assert_eq!(fuse_decisions(&decision(false, false, false)), ClassLabel::Original);
        assert_eq!(fuse_decisions(&decision(true, true, false)), ClassLabel::SpoofBonafide);
        // Precedence: original verdict wins over component verdicts.
        assert_eq!(fuse_decisions(&decision(false, true, true)), ClassLabel::Original);
    }

    #[test]
    fn fusion_depends_only_on_argmax() {
        let a = ComponentDecision {
            mixture: [0.49, 0.51],
            speech: [0.999, 0.001],
            env: [0.1, 0.9],
        };
        let b = ComponentDecision {
            mixture: [0.01, 0.99],
            speech: [0.51, 0.49],
            env: [0.45, 0.55],
        };
        assert_eq!(fuse_decisions(&a), fuse_decisions(&b));
    }

    #[test]
    fn vote_counts_and_ties() {
        use ClassLabel::*;
        assert_eq!(majority_vote(&[BonafideSpoof; 3]), BonafideSpoof);
        assert_eq!(majority_vote(&[SpoofBonafide, SpoofBonafide, SpoofSpoof]), SpoofBonafide);
        assert_eq!(majority_vote(&[BonafideBonafide, SpoofSpoof]), BonafideBonafide);
    }

    #[test]
    fn vote_is_permutation_invariant() {
        use ClassLabel::*;
        let mut labels = vec![Original, SpoofSpoof, SpoofSpoof, BonafideSpoof, SpoofSpoof];
        let expect = majority_vote(&labels);
        for _ in 0..labels.len() {
            labels.rotate_left(1);
            assert_eq!(majority_vote(&labels), expect);
        }
        labels.reverse();
        assert_eq!(majority_vote(&labels), expect);
    }

    fn entry(utt: &str, class: ClassLabel, split: Split) -> ManifestEntry {
        ManifestEntry {
            utt_id: utt.into(),
            path: String::new(),
            class,
            split: Some(split),
            snr_db: None,
            speech_src: None,
            env_src: None,
            duration_s: 5.0,
        }
    }

    #[test]
    fn evaluate_perfect_and_degenerate() {
        let mut manifest = Vec::new();
        let mut preds = BTreeMap::new();
        for class in ClassLabel::ALL {
            for i in 0..4 {
                let utt = format!("c{}_{i}", class.id());
                manifest.push(entry(&utt, class, Split::Eval));
                preds.insert(utt, class);
            }
        }
        let r = evaluate(&preds, &manifest, Split::Eval).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.accuracy, 1.0);

        // All predictions class 0 on a balanced eval set.
        let all_zero: BTreeMap<String, ClassLabel> = preds
            .keys()
            .map(|k| (k.clone(), ClassLabel::Original))
            .collect();
        let r = evaluate(&all_zero, &manifest, Split::Eval).unwrap();
        assert_eq!(r.recall[0], 1.0);
        assert!((r.precision[0] - 0.2).abs() < 1e-12);
        let f1_0 = 2.0 * 0.2 / 1.2;
        assert!((r.macro_f1 - f1_0 / 5.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.0667).abs() < 1e-3);
    }

    #[test]
    fn evaluate_enforces_coverage() {
        let manifest = vec![
            entry("a", ClassLabel::Original, Split::Eval),
            entry("b", ClassLabel::SpoofSpoof, Split::Eval),
            entry("c", ClassLabel::SpoofSpoof, Split::Train),
        ];
        let mut preds = BTreeMap::new();
        preds.insert("a".to_string(), ClassLabel::Original);
        assert!(matches!(
            evaluate(&preds, &manifest, Split::Eval),
            Err(Error::CoverageError(_))
        ));
        preds.insert("b".to_string(), ClassLabel::SpoofSpoof);
        preds.insert("c".to_string(), ClassLabel::SpoofSpoof);
        assert!(matches!(
            evaluate(&preds, &manifest, Split::Eval),
            Err(Error::CoverageError(_))
        ));
        preds.remove("c");
        assert!(evaluate(&preds, &manifest, Split::Eval).is_ok());
    }

    /// Deliberately simple counting implementation used as the metrics
    /// oracle.
    pub(super) fn brute_force_metrics(pairs: &[(usize, usize)], k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
        let mut precision = vec![0.0; k];
        let mut recall = vec![0.0; k];
        let mut f1 = vec![0.0; k];
        for c in 0..k {
            let tp = pairs.iter().filter(|(t, p)| *t == c && *p == c).count() as f64;
            let pred_c = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
            let true_c = pairs.iter().filter(|(t, _)| *t == c).count() as f64;
            precision[c] = if pred_c > 0.0 { tp / pred_c } else { 0.0 };
            recall[c] = if true_c > 0.0 { tp / true_c } else { 0.0 };
            f1[c] = if precision[c] + recall[c] > 0.0 {
                2.0 * precision[c] * recall[c] / (precision[c] + recall[c])
            } else {
                0.0
            };
        }
        let macro_f1 = f1.iter().sum::<f64>() / k as f64;
        (precision, recall, f1, macro_f1)
    }

    #[test]
    fn metrics_match_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let n = rng.random_range(1..120);
            let pairs: Vec<(usize, usize)> = (0..n)
                .map(|_| (rng.random_range(0..5), rng.random_range(0..5)))
                .collect();
            let r = compute_metrics(&pairs, 5);
            let (p, rc, f1, mf1) = brute_force_metrics(&pairs, 5);
            for k in 0..5 {
                assert!((r.precision[k] - p[k]).abs() < 1e-12);
                assert!((r.recall[k] - rc[k]).abs() < 1e-12);
                assert!((r.f1[k] - f1[k]).abs() < 1e-12);
            }
            assert!((r.macro_f1 - mf1).abs() < 1e-12);
            // Micro consistency: diagonal mass over n equals accuracy.
            let diag: usize = (0..5).map(|c| r.confusion[c][c]).sum();
            assert!((r.accuracy - diag as f64 / n as f64).abs() < 1e-15);
            // Row sums are per-class support.
            for c in 0..5 {
                let support = pairs.iter().filter(|(t, _)| *t == c).count();
                assert_eq!(r.confusion[c].iter().sum::<usize>(), support);
            }
        }
    }

    #[test]
    fn oracle_heads_fuse_to_ground_truth() {
        // With decision probabilities taken straight from ground truth, the
        // fused class always reproduces the label for mixed samples.
        for class in ClassLabel::ALL {
            let d = decision(class.is_mixed(), class.speech_spoofed(), class.env_spoofed());
            assert_eq!(fuse_decisions(&d), class);
        }
    }
}
