//! Semi-supervised Mean Teacher training of the tile extractor.
//!
//! Each step draws a labeled and an unlabeled batch, feeds independently
//! augmented copies to the student and the teacher, minimises
//! `L_sup + w(epoch)·L_cons` for the student with SGD and moves the teacher
//! towards the student by an exponential moving average.

use std::io::Write;

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::convnet::{self, augment_chw, ema_update, ConvNetSpec, ParamSet, Sgd, TRANSFORMS};
use crate::error::{Error, Result};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampShape {
    /// `target · min(epoch / rampup_epochs, 1)`.
    Linear,
    /// `target · exp(−5 (1 − t)²)` with `t = min(epoch / rampup_epochs, 1)`.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanTeacherConfig {
    pub epochs: usize,
    pub rampup_epochs: usize,
    pub rampup_target: f64,
    pub ramp: RampShape,
    pub ema_alpha: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Labeled images also enter the consistency term.
    pub labeled_consistency: bool,
    /// Random dihedral transforms on training inputs.
    pub augment: bool,
    pub seed: u64,
}

impl Default for MeanTeacherConfig {
    fn default() -> Self {
        MeanTeacherConfig {
            epochs: 60,
            rampup_epochs: 40,
            rampup_target: 12.5,
            ramp: RampShape::Linear,
            ema_alpha: 0.99,
            labeled_batch: 32,
            unlabeled_batch: 32,
            lr: 0.01,
            momentum: 0.9,
            labeled_consistency: true,
            augment: true,
            seed: 0,
        }
    }
}

impl MeanTeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rampup_target >= 0.0) {
            return Err(Error::Config(format!("rampup_target {} must be >= 0", self.rampup_target)));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::Config(format!("ema_alpha {} outside [0, 1]", self.ema_alpha)));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Mean soft cross-entropy `−Σ ỹ log p` over the batch.
pub fn supervised_loss(probs: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<f64> {
    if probs.dim() != labels.dim() {
        return Err(Error::Shape(format!("probs {:?} vs labels {:?}", probs.dim(), labels.dim())));
    }
    let n = probs.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels.iter()) {
        if *y != 0.0 {
            if *p < PROB_FLOOR {
                log::debug!("labeled class probability {p:e} clamped to {PROB_FLOOR:e}");
            }
            total -= y * p.max(PROB_FLOOR).ln();
        }
    }
    Ok(total / n as f64)
}

/// Mean squared Euclidean distance between probability rows.
pub fn consistency_loss(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(Error::Shape(format!("student {:?} vs teacher {:?}", student.dim(), teacher.dim())));
    }
    let n = student.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    Ok(student.iter().zip(teacher.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64)
}

/// Gradient of [`supervised_loss`] with respect to the logits, `(p − ỹ)/N`
/// (labels rows sum to one).
pub fn supervised_loss_grad(probs: ArrayView2<f64>, labels: ArrayView2<f64>) -> Array2<f64> {
    let n = probs.nrows().max(1) as f64;
    (&probs - &labels) / n
}

/// Gradient of [`consistency_loss`] with respect to the student logits
/// (the teacher is held fixed).
pub fn consistency_loss_grad(student: ArrayView2<f64>, teacher: ArrayView2<f64>) -> Array2<f64> {
    let n = student.nrows().max(1) as f64;
    let dprobs = (&student - &teacher) * (2.0 / n);
    convnet::softmax_backward(student, dprobs.view())
}

pub fn rampup_weight(epoch: usize, cfg: &MeanTeacherConfig) -> f64 {
    if cfg.rampup_epochs == 0 || epoch >= cfg.rampup_epochs {
        return cfg.rampup_target;
    }
    let t = epoch as f64 / cfg.rampup_epochs as f64;
    match cfg.ramp {
        RampShape::Linear => cfg.rampup_target * t,
        RampShape::Sigmoid => cfg.rampup_target * (-5.0 * (1.0 - t) * (1.0 - t)).exp(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// Standardized channel-first input.
    pub input: Array3<f64>,
    /// Soft label; sums to one.
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalExample {
    pub input: Array3<f64>,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_cons: f64,
    pub w: f64,
    pub total: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }

    pub fn write_csv<W: Write>(&self, mut out: W, lineage: Option<&str>) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        if let Some(l) = lineage {
            writeln!(out, "# lineage={l}").map_err(io)?;
        }
        writeln!(out, "epoch,l_sup,l_cons,w,total,test_acc").map_err(io)?;
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?},{:?},{:?},{:?}", e.epoch, e.l_sup, e.l_cons, e.w, e.total, e.test_acc)
                .map_err(io)?;
        }
        Ok(())
    }
}

/// Fraction of examples whose argmax probability (ties to the lower class)
/// matches the class. Zero for an empty set.
pub fn accuracy(params: &ParamSet, data: &[EvalExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let inputs: Vec<Array3<f64>> = data.iter().map(|d| d.input.clone()).collect();
    let (_, probs) = convnet::infer(params, &inputs, 64)?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(data)
        .filter(|(p, d)| argmax(p.as_slice().expect("row-major")) == d.class)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_INIT: u64 = 0;
const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_STUDENT_AUG: u64 = 3;
const STREAM_TEACHER_AUG: u64 = 4;

/// Endless reshuffled pass over `0..n`.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Cycler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn augmented(x: &Array3<f64>, rng: &mut ChaCha8Rng, on: bool) -> Result<Array3<f64>> {
    if on {
        augment_chw(x.view(), rng.gen_range(0..TRANSFORMS))
    } else {
        Ok(x.clone())
    }
}

fn check_labels(spec: &ConvNetSpec, labeled: &[LabeledExample]) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::Config("training needs at least one labeled example".into()));
    }
    match labeled.iter().position(|l| l.target.len() != spec.classes) {
        Some(i) => Err(Error::Shape(format!(
            "label {i} has {} classes, network has {}",
            labeled[i].target.len(),
            spec.classes
        ))),
        None => Ok(()),
    }
}

fn target_matrix(labeled: &[LabeledExample], idx: &[usize], classes: usize) -> Array2<f64> {
    Array2::from_shape_fn((idx.len(), classes), |(i, c)| labeled[idx[i]].target[c])
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub report: TrainReport,
}

/// Observer called after every optimisation step with (step, student, teacher).
pub type StepObserver<'a> = dyn FnMut(usize, &ParamSet, &ParamSet) + 'a;

pub fn train(
    spec: &ConvNetSpec,
    labeled: &[LabeledExample],
    unlabeled: &[Array3<f64>],
    test: &[EvalExample],
    cfg: &MeanTeacherConfig,
) -> Result<TrainOutcome> {
    train_observed(spec, labeled, unlabeled, test, cfg, &mut |_, _, _| {})
}

pub fn train_observed(
    spec: &ConvNetSpec,
    labeled: &[LabeledExample],
    unlabeled: &[Array3<f64>],
    test: &[EvalExample],
    cfg: &MeanTeacherConfig,
    observer: &mut StepObserver<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_labels(spec, labeled)?;
    let mut student = ParamSet::init(spec, &mut rng_stream(cfg.seed, STREAM_INIT))?;
    let mut teacher = student.clone();
    let mut opt = Sgd::new(&student, cfg.lr, cfg.momentum)?;
    let mut lab = Cycler::new(labeled.len(), rng_stream(cfg.seed, STREAM_LABELED));
    let mut unl_rng = rng_stream(cfg.seed, STREAM_UNLABELED);
    let mut s_aug = rng_stream(cfg.seed, STREAM_STUDENT_AUG);
    let mut t_aug = rng_stream(cfg.seed, STREAM_TEACHER_AUG);
    let mut unl_order: Vec<usize> = (0..unlabeled.len()).collect();
    let steps = if unlabeled.is_empty() {
        labeled.len().div_ceil(cfg.labeled_batch)
    } else {
        unlabeled.len().div_ceil(cfg.unlabeled_batch)
    };
    let mut report = TrainReport::default();
    let mut step_no = 0;
    for epoch in 0..cfg.epochs {
        let w = rampup_weight(epoch, cfg);
        unl_order.shuffle(&mut unl_rng);
        let (mut sum_sup, mut sum_cons, mut sum_total) = (0.0, 0.0, 0.0);
        for s in 0..steps {
            let li = lab.next_batch(cfg.labeled_batch);
            let ui: &[usize] = if unlabeled.is_empty() {
                &[]
            } else {
                let lo = s * cfg.unlabeled_batch;
                &unl_order[lo..(lo + cfg.unlabeled_batch).min(unlabeled.len())]
            };
            let base: Vec<&Array3<f64>> =
                li.iter().map(|&i| &labeled[i].input).chain(ui.iter().map(|&i| &unlabeled[i])).collect();
            let s_in: Vec<Array3<f64>> =
                base.iter().map(|x| augmented(x, &mut s_aug, cfg.augment)).collect::<Result<_>>()?;
            let t_in: Vec<Array3<f64>> =
                base.iter().map(|x| augmented(x, &mut t_aug, cfg.augment)).collect::<Result<_>>()?;
            let nl = li.len();
            let cons_rows = if cfg.labeled_consistency { 0..base.len() } else { nl..base.len() };

            let sf = convnet::forward(&student, &s_in)?;
            let tf = convnet::forward(&teacher, &t_in[cons_rows.clone()])?;
            let y = target_matrix(labeled, &li, spec.classes);
            let sp_lab = sf.probs.slice(ndarray::s![..nl, ..]);
            let sp_cons = sf.probs.slice(ndarray::s![cons_rows.clone(), ..]);
            let l_sup = supervised_loss(sp_lab, y.view())?;
            let l_cons = consistency_loss(sp_cons, tf.probs.view())?;
            let total = l_sup + w * l_cons;

            let mut dlogits = Array2::zeros(sf.probs.dim());
            dlogits.slice_mut(ndarray::s![..nl, ..]).assign(&supervised_loss_grad(sp_lab, y.view()));
            if w != 0.0 && !cons_rows.is_empty() {
                let g = consistency_loss_grad(sp_cons, tf.probs.view()) * w;
                let mut block = dlogits.slice_mut(ndarray::s![cons_rows.clone(), ..]);
                block += &g;
            }
            let grads = convnet::backward(&student, &sf, dlogits.view(), None)?;
            opt.step(&mut student, &grads)?;
            ema_update(&mut teacher, &student, cfg.ema_alpha)?;
            if !student.is_finite() {
                return Err(Error::Numeric(format!("student parameters diverged at epoch {epoch}; lower the learning rate")));
            }
            observer(step_no, &student, &teacher);
            step_no += 1;
            sum_sup += l_sup;
            sum_cons += l_cons;
            sum_total += total;
        }
        let k = steps.max(1) as f64;
        let stats = EpochStats {
            epoch,
            l_sup: sum_sup / k,
            l_cons: sum_cons / k,
            w,
            total: sum_total / k,
            test_acc: accuracy(&teacher, test)?,
        };
        log::info!(
            "epoch {epoch}: l_sup {:.4} l_cons {:.4} w {:.3} teacher acc {:.3}",
            stats.l_sup,
            stats.l_cons,
            w,
            stats.test_acc
        );
        report.epochs.push(stats);
    }
    Ok(TrainOutcome {
        student,
        teacher,
        report,
    })
}

/// Plain supervised training (soft cross-entropy, SGD with momentum) with
/// the same batching and augmentation streams as [`train`]. The report's
/// accuracy column is the trained model's.
pub fn train_supervised(
    spec: &ConvNetSpec,
    labeled: &[LabeledExample],
    test: &[EvalExample],
    cfg: &MeanTeacherConfig,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    check_labels(spec, labeled)?;
    let mut params = ParamSet::init(spec, &mut rng_stream(cfg.seed, STREAM_INIT))?;
    let mut opt = Sgd::new(&params, cfg.lr, cfg.momentum)?;
    let mut lab = Cycler::new(labeled.len(), rng_stream(cfg.seed, STREAM_LABELED));
    let mut aug = rng_stream(cfg.seed, STREAM_STUDENT_AUG);
    let steps = labeled.len().div_ceil(cfg.labeled_batch);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..steps {
            let li = lab.next_batch(cfg.labeled_batch);
            let inputs: Vec<Array3<f64>> = li
                .iter()
                .map(|&i| augmented(&labeled[i].input, &mut aug, cfg.augment))
                .collect::<Result<_>>()?;
            let f = convnet::forward(&params, &inputs)?;
            let y = target_matrix(labeled, &li, spec.classes);
            sum += supervised_loss(f.probs.view(), y.view())?;
            let grads = convnet::backward(&params, &f, supervised_loss_grad(f.probs.view(), y.view()).view(), None)?;
            opt.step(&mut params, &grads)?;
            if !params.is_finite() {
                return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}; lower the learning rate")));
            }
        }
        let l_sup = sum / steps.max(1) as f64;
        report.epochs.push(EpochStats {
            epoch,
            l_sup,
            l_cons: 0.0,
            w: 0.0,
            total: l_sup,
            test_acc: accuracy(&params, test)?,
        });
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_anchors() {
        let one_hot = array![[1.0, 0.0, 0.0]];
        assert_eq!(supervised_loss(one_hot.view(), one_hot.view()).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let p = array![[1.0 / e, 1.0 - 1.0 / e, 0.0]];
        assert!((supervised_loss(p.view(), one_hot.view()).unwrap() - 1.0).abs() < 1e-15);
        let u = array![[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        assert!((supervised_loss(u.view(), u.view()).unwrap() - 3f64.ln()).abs() < 1e-15);
        let a = array![[1.0, 0.0, 0.0]];
        let b = array![[0.0, 1.0, 0.0]];
        assert_eq!(consistency_loss(a.view(), b.view()).unwrap(), 2.0);
        assert_eq!(consistency_loss(a.view(), a.view()).unwrap(), 0.0);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let y = array![[1.0, 0.0]];
        let p = array![[0.0, 1.0]];
        let l = supervised_loss(p.view(), y.view()).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn ramp() {
        let cfg = MeanTeacherConfig::default();
        assert_eq!(rampup_weight(0, &cfg), 0.0);
        assert_eq!(rampup_weight(20, &cfg), 6.25);
        assert_eq!(rampup_weight(40, &cfg), 12.5);
        assert_eq!(rampup_weight(55, &cfg), 12.5);
        let mut prev = 0.0;
        for e in 0..60 {
            let w = rampup_weight(e, &cfg);
            assert!(w >= prev);
            prev = w;
        }
        let sig = MeanTeacherConfig { ramp: RampShape::Sigmoid, ..cfg };
        assert_eq!(rampup_weight(40, &sig), 12.5);
        assert!(rampup_weight(0, &sig) < 0.1);
    }

    #[test]
    fn empty_labeled_set_is_config_error() {
        let spec = ConvNetSpec::new(4, vec![2], 2, 3);
        let r = train(&spec, &[], &[], &[], &MeanTeacherConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
