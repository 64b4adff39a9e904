//! Scoring by stochastic re-initialization.
//!
//! Each unit is scored by rebuilding the model with that unit's parameters
//! re-sampled from the Kaiming distribution and measuring the top-1 accuracy
//! drop against the unmodified model. Draws come from a stream keyed by
//! `(seed, unit_id)`, so per-unit evaluations are independent and may run in
//! any order or in parallel without changing a single bit of the result.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{
    enumerate_prunable_units, Block, ModelState, PrunableUnit, Unit, UnitId,
};
use crate::nn::TensorKind;
use crate::rng::{stream_rng, Stream};
use crate::trainer::LabeledDataset;

/// Evaluation batch size for accuracy sweeps.
const EVAL_BATCH: usize = 256;

/// Score record for one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropEntry {
    pub unit_id: UnitId,
    pub stage_id: usize,
    pub eligible: bool,
    pub est_accuracy: f64,
    pub drop: f64,
}

/// The per-unit accuracy-drop profile of a model on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropProfile {
    /// Content fingerprint, referenced by [`PruneDecision::profile_ref`].
    pub id: String,
    pub base_accuracy: f64,
    pub dataset_id: String,
    /// Number of evaluation samples.
    pub sample_count: usize,
    pub seeds: Vec<u64>,
    pub trials_per_unit: usize,
    /// One entry per unit, in forward order. Ineligible units are scored
    /// too, but flagged.
    pub entries: Vec<DropEntry>,
}

/// Outcome of threshold selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    /// The acceptance threshold on accuracy drop.
    pub threshold: f64,
    /// Units to remove: eligible and `drop < threshold` (strict).
    pub selected: BTreeSet<UnitId>,
    /// Units excluded by the dimension-compatibility stop rule.
    pub skipped_incompatible: BTreeSet<UnitId>,
    /// Id of the profile the decision was derived from.
    pub profile_ref: String,
}

impl PruneDecision {
    /// Eligible units that stayed in the model.
    pub fn retained_eligible(&self, profile: &DropProfile) -> BTreeSet<UnitId> {
        profile
            .entries
            .iter()
            .filter(|e| e.eligible && !self.selected.contains(&e.unit_id))
            .map(|e| e.unit_id)
            .collect()
    }
}

/// Re-samples one unit's parameter bundle; the original stays untouched.
///
/// Weight tensors are drawn i.i.d. from N(0, 2/fan_in) with fan_in the
/// tensor's receptive input size; norm scales reset to 1, shifts and biases
/// to 0, running statistics to mean 0 / variance 1. Tensors are visited in
/// forward order and elements filled in row-major order, which is the
/// contract any independent re-implementation must follow.
pub fn reinit_unit(unit: &Unit, seed: u64) -> Block {
    use rand_distr::{Distribution, Normal};
    let mut rng = stream_rng(seed, Stream::Reinit { unit_id: unit.id.0 });
    let mut block = unit.block.clone();
    block.visit_mut("", &mut |_, kind, mut view| match kind {
        TensorKind::ConvWeight | TensorKind::LinearWeight => {
            let fan_in = kind.fan_in(view.shape()).expect("weight kinds have fan-in");
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
            for v in view.iter_mut() {
                *v = normal.sample(&mut rng);
            }
        }
        TensorKind::NormScale | TensorKind::NormRunningVar => view.fill(1.0),
        TensorKind::NormShift | TensorKind::NormRunningMean | TensorKind::Bias => view.fill(0.0),
    });
    block
}

/// Builds the estimation model: the input model with `unit_id` carrying
/// `bundle`; everything else copied unchanged. The original is unmodified.
pub fn rebuild_with(model: &ModelState, unit_id: UnitId, bundle: Block) -> Result<ModelState> {
    let mut est = model.clone();
    match est.unit_mut(unit_id) {
        Some(unit) => {
            unit.block = bundle;
            Ok(est)
        }
        None => Err(Error::argument(format!("unknown unit id {unit_id}"))),
    }
}

/// Top-1 accuracy and per-sample predictions, evaluated in inference mode.
/// Argmax ties break toward the lowest class index.
pub fn predict_top1(model: &ModelState, dataset: &LabeledDataset) -> Result<(f64, Vec<u32>)> {
    if dataset.len() == 0 {
        return Err(Error::argument("dataset is empty"));
    }
    if dataset.input_shape() != model.spec().input_shape {
        return Err(Error::argument(format!(
            "dataset shape {:?} does not match model input {:?}",
            dataset.input_shape(),
            model.spec().input_shape
        )));
    }
    let m = dataset.len();
    let labels = dataset.labels();
    let mut preds = Vec::with_capacity(m);
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < m {
        let hi = (at + EVAL_BATCH).min(m);
        let indices: Vec<usize> = (at..hi).collect();
        let (x, _) = dataset.batch(&indices);
        let logits = model.logits_eval(&x);
        for (row, &i) in crate::netcore::predictions(&logits).iter().zip(indices.iter()) {
            if *row == labels[i] {
                correct += 1;
            }
            preds.push(*row);
        }
        at = hi;
    }
    Ok((correct as f64 / m as f64, preds))
}

/// Scores every unit with the standard Kaiming re-initialization.
pub fn drop_profile(
    model: &ModelState,
    dataset: &LabeledDataset,
    seeds: &[u64],
) -> Result<DropProfile> {
    drop_profile_with(model, dataset, seeds, &reinit_unit)
}

/// Scores every unit with a caller-supplied re-initialization function
/// (test hook; the identity function must produce an all-zero profile).
pub fn drop_profile_with(
    model: &ModelState,
    dataset: &LabeledDataset,
    seeds: &[u64],
    reinit: &(dyn Fn(&Unit, u64) -> Block + Sync),
) -> Result<DropProfile> {
    if seeds.is_empty() {
        return Err(Error::argument("at least one seed is required"));
    }
    let (base_accuracy, _) = predict_top1(model, dataset)?;
    let meta = enumerate_prunable_units(model);

    let entries: Vec<Result<DropEntry>> = model
        .units()
        .par_iter()
        .zip(meta.par_iter())
        .map(|(unit, info)| {
            let mut acc_sum = 0.0f64;
            for &seed in seeds {
                let est = rebuild_with(model, unit.id, reinit(unit, seed))?;
                let (acc, _) = predict_top1(&est, dataset)?;
                acc_sum += acc;
            }
            let est_accuracy = acc_sum / seeds.len() as f64;
            Ok(DropEntry {
                unit_id: unit.id,
                stage_id: unit.stage_id,
                eligible: info.identity_shortcut,
                est_accuracy,
                drop: base_accuracy - est_accuracy,
            })
        })
        .collect();
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;

    let mut profile = DropProfile {
        id: String::new(),
        base_accuracy,
        dataset_id: dataset.dataset_id(),
        sample_count: dataset.len(),
        seeds: seeds.to_vec(),
        trials_per_unit: seeds.len(),
        entries,
    };
    profile.id = profile.fingerprint();
    Ok(profile)
}

impl DropProfile {
    fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.dataset_id.as_bytes());
        h.update(self.base_accuracy.to_le_bytes());
        for s in &self.seeds {
            h.update(s.to_le_bytes());
        }
        for e in &self.entries {
            h.update(e.unit_id.0.to_le_bytes());
            h.update(e.drop.to_le_bytes());
        }
        let digest = h.finalize();
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Structured text report; parseable back with [`DropProfile::from_report_str`].
    ///
    /// When `num_classes` is known, the report flags a base accuracy near
    /// chance level (≤ 1.5× the uniform-guess rate).
    pub fn to_report_string(&self, num_classes: Option<usize>) -> String {
        let mut s = String::new();
        s.push_str("# drop profile v1\n");
        s.push_str(&format!("id: {}\n", self.id));
        s.push_str(&format!("base_accuracy: {}\n", self.base_accuracy));
        s.push_str(&format!("dataset_id: {}\n", self.dataset_id));
        s.push_str(&format!("sample_count: {}\n", self.sample_count));
        let seeds: Vec<String> = self.seeds.iter().map(|v| v.to_string()).collect();
        s.push_str(&format!("seeds: {}\n", seeds.join(",")));
        s.push_str(&format!("trials_per_unit: {}\n", self.trials_per_unit));
        if let Some(k) = num_classes {
            let near = self.base_accuracy <= 1.5 / k as f64;
            s.push_str(&format!("near_chance: {near}\n"));
        }
        s.push_str("unit_id stage eligible est_accuracy drop\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{} {} {} {} {}\n",
                e.unit_id, e.stage_id, e.eligible, e.est_accuracy, e.drop
            ));
        }
        s
    }

    pub fn from_report_str(text: &str) -> Result<DropProfile> {
        let mut profile = DropProfile {
            id: String::new(),
            base_accuracy: f64::NAN,
            dataset_id: String::new(),
            sample_count: 0,
            seeds: Vec::new(),
            trials_per_unit: 1,
            entries: Vec::new(),
        };
        let bad = |line: &str| Error::argument(format!("bad profile report line: {line}"));
        let mut in_table = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with("unit_id ") {
                in_table = true;
                continue;
            }
            if !in_table {
                let (key, value) = line.split_once(':').ok_or_else(|| bad(line))?;
                let value = value.trim();
                match key.trim() {
                    "id" => profile.id = value.to_string(),
                    "base_accuracy" => {
                        profile.base_accuracy = value.parse().map_err(|_| bad(line))?
                    }
                    "dataset_id" => profile.dataset_id = value.to_string(),
                    "sample_count" => {
                        profile.sample_count = value.parse().map_err(|_| bad(line))?
                    }
                    "seeds" => {
                        profile.seeds = value
                            .split(',')
                            .filter(|v| !v.is_empty())
                            .map(|v| v.trim().parse().map_err(|_| bad(line)))
                            .collect::<Result<Vec<u64>>>()?;
                    }
                    "trials_per_unit" => {
                        profile.trials_per_unit = value.parse().map_err(|_| bad(line))?
                    }
                    _ => {} // unknown keys tolerated
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(bad(line));
            }
            profile.entries.push(DropEntry {
                unit_id: UnitId(fields[0].parse().map_err(|_| bad(line))?),
                stage_id: fields[1].parse().map_err(|_| bad(line))?,
                eligible: fields[2].parse().map_err(|_| bad(line))?,
                est_accuracy: fields[3].parse().map_err(|_| bad(line))?,
                drop: fields[4].parse().map_err(|_| bad(line))?,
            });
        }
        if profile.base_accuracy.is_nan() || profile.entries.is_empty() {
            return Err(Error::argument("profile report is missing required fields"));
        }
        Ok(profile)
    }

    /// CSV companion: `unit_id,stage,eligible,est_accuracy,drop`, one row per
    /// unit in forward order.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("unit_id,stage,eligible,est_accuracy,drop\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.unit_id, e.stage_id, e.eligible, e.est_accuracy, e.drop
            ));
        }
        s
    }

    pub fn entry(&self, id: UnitId) -> Option<&DropEntry> {
        self.entries.iter().find(|e| e.unit_id == id)
    }
}

/// Applies the pruning rule: keep a unit for removal iff its drop is
/// strictly below `t_err` and it has an identity shortcut.
pub fn select_layers(
    profile: &DropProfile,
    t_err: f64,
    units: &[PrunableUnit],
) -> Result<PruneDecision> {
    if !t_err.is_finite() {
        return Err(Error::argument("t_err must be finite"));
    }
    if profile.entries.len() != units.len() {
        return Err(Error::argument(format!(
            "profile covers {} units but the model has {}",
            profile.entries.len(),
            units.len()
        )));
    }
    let mut selected = BTreeSet::new();
    let mut skipped = BTreeSet::new();
    for (entry, unit) in profile.entries.iter().zip(units.iter()) {
        if entry.unit_id != unit.id {
            return Err(Error::argument(format!(
                "profile entry {} does not match unit {}",
                entry.unit_id, unit.id
            )));
        }
        if entry.eligible != unit.identity_shortcut {
            return Err(Error::argument(format!(
                "profile eligibility for unit {} disagrees with the model",
                unit.id
            )));
        }
        if !unit.identity_shortcut {
            skipped.insert(unit.id);
        } else if entry.drop < t_err {
            selected.insert(unit.id);
        }
    }
    Ok(PruneDecision {
        threshold: t_err,
        selected,
        skipped_incompatible: skipped,
        profile_ref: profile.id.clone(),
    })
}

/// Advisory threshold: the midpoint of the largest gap between consecutive
/// sorted eligible drops. With all drops equal the gap is zero and the
/// common value itself is returned. Never applied automatically.
pub fn suggest_threshold(profile: &DropProfile) -> Result<f64> {
    let mut drops: Vec<f64> = profile
        .entries
        .iter()
        .filter(|e| e.eligible)
        .map(|e| e.drop)
        .collect();
    if drops.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "threshold suggestion needs at least 2 eligible units, found {}",
            drops.len()
        )));
    }
    drops.sort_by(|a, b| a.partial_cmp(b).expect("drops are finite"));
    let mut best_gap = f64::NEG_INFINITY;
    let mut best_mid = drops[0];
    for pair in drops.windows(2) {
        let gap = pair[1] - pair[0];
        if gap > best_gap {
            best_gap = gap;
            best_mid = 0.5 * (pair[0] + pair[1]);
        }
    }
    Ok(best_mid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile_from_drops(drops: &[(u32, bool, f64)]) -> DropProfile {
        DropProfile {
            id: "test".into(),
            base_accuracy: 0.9,
            dataset_id: "synthetic".into(),
            sample_count: 100,
            seeds: vec![1],
            trials_per_unit: 1,
            entries: drops
                .iter()
                .map(|&(id, eligible, drop)| DropEntry {
                    unit_id: UnitId(id),
                    stage_id: 1,
                    eligible,
                    est_accuracy: 0.9 - drop,
                    drop,
                })
                .collect(),
        }
    }

    #[test]
    fn suggestion_is_largest_gap_midpoint() {
        let p = profile_from_drops(&[
            (1, true, 0.01),
            (2, true, 0.02),
            (3, true, 0.40),
            (4, true, 0.50),
        ]);
        let t = suggest_threshold(&p).unwrap();
        assert!((t - 0.21).abs() < 1e-12, "got {t}");
    }

    #[test]
    fn suggestion_equal_drops_returns_value() {
        let p = profile_from_drops(&[(1, true, 0.3), (2, true, 0.3), (3, true, 0.3)]);
        assert_eq!(suggest_threshold(&p).unwrap(), 0.3);
    }

    #[test]
    fn suggestion_needs_two_eligible() {
        let p = profile_from_drops(&[(1, true, 0.3), (2, false, 0.1)]);
        assert!(matches!(suggest_threshold(&p), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn report_roundtrip() {
        let p = profile_from_drops(&[(1, true, 0.012345678901), (2, false, -0.25)]);
        let text = p.to_report_string(Some(10));
        let back = DropProfile::from_report_str(&text).unwrap();
        assert_eq!(p, back);
    }
}
