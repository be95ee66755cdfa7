//! Binary inhabited/uninhabited classifier and per-district tile pruning.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convnet::{self, ConvNetSpec, ParamSet};
use crate::error::{Error, Result};
use crate::geo_tiles::{TileId, TileSelection};
use crate::mean_teacher::{self, EvalExample, LabeledExample, MeanTeacherConfig, TrainReport};

/// Output index of the "inhabited" class in the two-class network.
pub const INHABITED: usize = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunerConfig {
    /// Optimisation settings; only the supervised fields are used.
    pub train: MeanTeacherConfig,
    pub train_fraction: f64,
    pub threshold: f64,
}

impl Default for PrunerConfig {
    fn default() -> Self {
        PrunerConfig {
            train: MeanTeacherConfig {
                epochs: 30,
                ..MeanTeacherConfig::default()
            },
            train_fraction: 0.8,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryExample {
    pub input: Array3<f64>,
    pub inhabited: bool,
}

#[derive(Debug, Clone)]
pub struct PrunerOutcome {
    pub params: ParamSet,
    pub report: TrainReport,
    pub heldout_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn one_hot(inhabited: bool) -> Vec<f64> {
    if inhabited {
        vec![0.0, 1.0]
    } else {
        vec![1.0, 0.0]
    }
}

/// Shuffles with `seed`, trains on the first `train_fraction` and reports
/// accuracy on the rest.
pub fn train_pruner(spec: &ConvNetSpec, examples: &[BinaryExample], cfg: &PrunerConfig) -> Result<PrunerOutcome> {
    if spec.classes != 2 {
        return Err(Error::Config(format!("pruner network needs 2 classes, spec has {}", spec.classes)));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
        return Err(Error::Config(format!("train_fraction {} outside (0, 1]", cfg.train_fraction)));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5052_554e));
    let n_train = ((examples.len() as f64 * cfg.train_fraction).round() as usize).clamp(1.min(examples.len()), examples.len());
    let (tr, te) = order.split_at(n_train);
    let pos = tr.iter().filter(|&&i| examples[i].inhabited).count();
    if pos == 0 || pos == tr.len() {
        return Err(Error::Config(format!(
            "pruner training split needs both classes ({pos} inhabited of {})",
            tr.len()
        )));
    }
    let labeled: Vec<LabeledExample> = tr
        .iter()
        .map(|&i| LabeledExample {
            input: examples[i].input.clone(),
            target: one_hot(examples[i].inhabited),
        })
        .collect();
    let test: Vec<EvalExample> = te
        .iter()
        .map(|&i| EvalExample {
            input: examples[i].input.clone(),
            class: examples[i].inhabited as usize,
        })
        .collect();
    let (params, report) = mean_teacher::train_supervised(spec, &labeled, &test, &cfg.train)?;
    let heldout_accuracy = mean_teacher::accuracy(&params, &test)?;
    log::info!("pruner held-out accuracy {heldout_accuracy:.4} on {} tiles", test.len());
    Ok(PrunerOutcome {
        params,
        report,
        heldout_accuracy,
        n_train: tr.len(),
        n_test: te.len(),
    })
}

/// P(inhabited) for each input.
pub fn inhabited_probability(params: &ParamSet, inputs: &[Array3<f64>]) -> Result<Vec<f64>> {
    if params.spec.classes != 2 {
        return Err(Error::Config("pruner network needs 2 classes".into()));
    }
    let (_, probs) = convnet::infer(params, inputs, 64)?;
    Ok(probs.column(INHABITED).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedSelection {
    pub district_id: String,
    pub kept: BTreeSet<TileId>,
    pub removed: BTreeSet<TileId>,
    pub removed_fraction: f64,
    /// Every tile fell below the threshold and the most likely inhabited one was kept.
    pub fallback: bool,
}

impl PrunedSelection {
    pub fn n_before(&self) -> usize {
        self.kept.len() + self.removed.len()
    }
}

/// Keeps tiles with `P(inhabited) ≥ threshold`. An all-removed district keeps
/// its highest-probability tile (first in tile order on ties) and is flagged.
pub fn prune(selection: &TileSelection, p_inhabited: &BTreeMap<TileId, f64>, threshold: f64) -> Result<PrunedSelection> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Range(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut kept = BTreeSet::new();
    let mut removed = BTreeSet::new();
    let mut best: Option<(TileId, f64)> = None;
    for &t in &selection.tiles {
        let p = *p_inhabited.get(&t).ok_or_else(|| {
            Error::Data(format!("no image or score for tile {t} of district {}", selection.district_id))
        })?;
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((t, p));
        }
        if p >= threshold {
            kept.insert(t);
        } else {
            removed.insert(t);
        }
    }
    let mut fallback = false;
    if kept.is_empty() {
        if let Some((t, _)) = best {
            removed.remove(&t);
            kept.insert(t);
            fallback = true;
            log::warn!("district {}: every tile pruned, keeping {t}", selection.district_id);
        }
    }
    let n = kept.len() + removed.len();
    let removed_fraction = if n == 0 { 0.0 } else { removed.len() as f64 / n as f64 };
    Ok(PrunedSelection {
        district_id: selection.district_id.clone(),
        kept,
        removed,
        removed_fraction,
        fallback,
    })
}

/// Share of all selected tiles that were removed.
pub fn overall_removed_fraction(pruned: &[PrunedSelection]) -> f64 {
    let before: usize = pruned.iter().map(PrunedSelection::n_before).sum();
    let removed: usize = pruned.iter().map(|p| p.removed.len()).sum();
    if before == 0 {
        0.0
    } else {
        removed as f64 / before as f64
    }
}

pub fn write_report_csv<W: Write>(mut out: W, pruned: &[PrunedSelection], lineage: Option<&str>) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    if let Some(l) = lineage {
        writeln!(out, "# lineage={l}").map_err(io)?;
    }
    writeln!(out, "district_id,n_before,n_after,removed_fraction,fallback_flag").map_err(io)?;
    for p in pruned {
        writeln!(
            out,
            "{},{},{},{:.6},{}",
            p.district_id,
            p.n_before(),
            p.kept.len(),
            p.removed_fraction,
            p.fallback as u8
        )
        .map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn selection(n: u32) -> TileSelection {
        TileSelection {
            district_id: "d".into(),
            zoom: 10,
            tiles: (0..n).map(|i| TileId::new(i, 0, 10).unwrap()).collect(),
            vertex_hits: BTreeMap::new(),
        }
    }

    fn scores(sel: &TileSelection, f: impl Fn(u32) -> f64) -> BTreeMap<TileId, f64> {
        sel.tiles.iter().map(|t| (*t, f(t.x))).collect()
    }

    #[test]
    fn all_inhabited_removes_nothing() {
        let sel = selection(10);
        let p = prune(&sel, &scores(&sel, |_| 1.0), 0.5).unwrap();
        assert_eq!(p.removed_fraction, 0.0);
        assert!(!p.fallback);
    }

    #[test]
    fn all_uninhabited_keeps_fallback_tile() {
        let sel = selection(10);
        let p = prune(&sel, &scores(&sel, |_| 0.0), 0.5).unwrap();
        assert_eq!(p.kept.len(), 1);
        assert!(p.fallback);
        assert_eq!(p.kept.iter().next().unwrap().x, 0);
        let p = prune(&sel, &scores(&sel, |x| if x == 7 { 0.3 } else { 0.1 }), 0.5).unwrap();
        assert_eq!(p.kept.iter().next().unwrap().x, 7);
    }

    #[test]
    fn partition_and_monotone_threshold() {
        let sel = selection(50);
        let sc = scores(&sel, |x| (x as f64 * 0.37).sin().abs());
        let mut prev = usize::MAX;
        for i in 0..=20 {
            let p = prune(&sel, &sc, i as f64 / 20.0).unwrap();
            assert!(p.kept.is_disjoint(&p.removed));
            let union: BTreeSet<TileId> = p.kept.union(&p.removed).copied().collect();
            assert_eq!(union, sel.tiles);
            if !p.fallback {
                assert!(p.kept.len() <= prev);
                prev = p.kept.len();
            }
        }
    }

    #[test]
    fn missing_score_names_tile() {
        let sel = selection(3);
        let mut sc = scores(&sel, |_| 1.0);
        sc.remove(&TileId::new(2, 0, 10).unwrap());
        let err = prune(&sel, &sc, 0.5).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("10/2/0"), "{err}");
    }

    #[test]
    fn single_class_training_is_config_error() {
        let spec = ConvNetSpec::new(4, vec![2], 2, 2);
        let ex: Vec<BinaryExample> = (0..10)
            .map(|_| BinaryExample {
                input: Array3::zeros((3, 4, 4)),
                inhabited: true,
            })
            .collect();
        assert!(matches!(train_pruner(&spec, &ex, &PrunerConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn report_format() {
        let sel = selection(4);
        let p = prune(&sel, &scores(&sel, |x| if x < 1 { 0.9 } else { 0.1 }), 0.5).unwrap();
        let mut out = Vec::new();
        write_report_csv(&mut out, &[p], None).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "district_id,n_before,n_after,removed_fraction,fallback_flag\nd,4,1,0.750000,0\n"
        );
    }
}
