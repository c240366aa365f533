//! Alignment training: pull the student's final representation toward the
//! frozen teacher's on the same augmented view, with differential
//! learning rates per parameter group, then optionally continue with a
//! denser token grid.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::cortex::{cortex_blocks, Student};
use crate::data::{augment, eval_resize, AugmentConfig};
use crate::focusing::focusing_forward;
use crate::io::RunConfig;
use crate::model::roi_grid;
use crate::nn;
use crate::numerics::optim::AdamW;
use crate::numerics::schedule::LrSchedule;
use crate::numerics::tape::{Tape, VarId};
use crate::numerics::tensor::Tensor;
use crate::params::{Bound, Role};
use crate::vit::Teacher;
use crate::{Error, Result, Scalar};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct BootstrapConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    /// LR multiplier for the inherited-but-tunable cortex blocks
    /// (zeroed during warmup epochs).
    pub tunable_lr_mult: f64,
    pub flip_prob: f64,
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl BootstrapConfig {
    /// The main bootstrap recipe: 20 epochs, 1 warmup epoch, base LR
    /// 2e-4 decayed by a half cosine.
    pub fn standard(seed: u64) -> Self {
        BootstrapConfig {
            epochs: 20,
            warmup_epochs: 1,
            base_lr: 2e-4,
            tunable_lr_mult: 0.1,
            flip_prob: 0.5,
            crop_scale: (0.5, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            batch_size: 32,
            weight_decay: 1e-4,
            seed,
        }
    }

    /// Continued-bootstrap recipe after raising the token count:
    /// 5 epochs at base LR 5e-5, no fresh warmup.
    pub fn continued(seed: u64) -> Self {
        BootstrapConfig { epochs: 5, warmup_epochs: 0, base_lr: 5e-5, ..Self::standard(seed) }
    }

    pub fn augmentation(&self, target: usize) -> AugmentConfig {
        AugmentConfig {
            target,
            flip_prob: self.flip_prob,
            scale: self.crop_scale,
            aspect: self.crop_aspect,
        }
    }
}

impl From<&RunConfig> for BootstrapConfig {
    fn from(rc: &RunConfig) -> Self {
        BootstrapConfig {
            epochs: rc.epochs,
            warmup_epochs: rc.warmup_epochs,
            base_lr: rc.base_lr,
            tunable_lr_mult: rc.tunable_lr_mult,
            batch_size: rc.batch_size,
            seed: rc.seed,
            ..Self::standard(rc.seed)
        }
    }
}

/// Training objective. Cosine alignment is the method; the other two are
/// ablation variants kept behind this switch.
#[derive(Clone, Debug)]
pub enum Objective {
    /// 1 − cos(student, teacher) on the final representation; the teacher
    /// side is a constant (no gradient reaches it).
    Cosine,
    /// Cross-entropy of student logits against softened teacher logits
    /// softmax(z/τ). As τ→0 with a confidently peaked teacher this
    /// becomes hard cross-entropy on the teacher's argmax.
    KlDistill { tau: f64 },
    /// Cosine alignment plus `weight`·CE(student logits, label); labels
    /// are indexed per dataset item.
    CosineAndCls { weight: f64, labels: Vec<u32> },
}

/// One optimizer-step log row (`step,lr,loss` in the CSV).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BootstrapReport {
    pub curve: Vec<LossRecord>,
    pub epoch_mean_loss: Vec<f64>,
}

pub fn curve_to_csv(curve: &[LossRecord]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in curve {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

pub fn write_loss_csv(curve: &[LossRecord], path: &std::path::Path) -> Result<()> {
    std::fs::write(path, curve_to_csv(curve))?;
    Ok(())
}

/// Row-wise softmax of `logits/tau`, computed outside any tape (the
/// distillation target is detached by construction).
pub fn soft_targets<S: Scalar>(logits: &Tensor<S>, tau: f64) -> Tensor<S> {
    assert!(tau > 0.0, "temperature must be positive");
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
        let exps: Vec<f64> = row.iter().map(|&v| ((v.to_f64() - max) / tau).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for c in 0..cols {
            out[r * cols + c] = S::from_f64(exps[c] / sum);
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn dot_norms<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.to_f64(), y.to_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

/// Plain-value cosine alignment loss 1 − cos(a, b); errors on a
/// (near-)zero vector instead of silently dividing by epsilon.
pub fn cosine_align_value<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let (dot, na, nb) = dot_norms(a, b);
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    Ok(1.0 - dot / (na * nb))
}

/// Student forward yielding both the alignment representation and the
/// class logits from one shared trunk evaluation.
fn repr_and_logits<S: Scalar>(
    student: &Student<S>,
    tape: &mut Tape<S>,
    p: &Bound,
    image: &Tensor<S>,
) -> (VarId, VarId) {
    let img = tape.constant(image.clone());
    let tokens = p.p("sf.focus.tokens");
    let rois = p.p("sf.focus.rois");
    let (latents, _) = focusing_forward(tape, p, &student.spec, img, tokens, rois, None);
    let seq = tape.concat_rows(&[p.p("sf.cls"), latents]);
    let x = cortex_blocks(tape, p, &student.spec, seq, None);
    let cls = tape.slice_rows(x, 0, 1);
    let repr = if student.spec.projection.is_some() {
        tape.matmul(cls, p.p("sf.proj_out.w"))
    } else {
        cls
    };
    let logits = nn::linear(tape, p, "sf.head", cls);
    (repr, logits)
}

struct GradAccum<S: Scalar> {
    sums: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> GradAccum<S> {
    fn new() -> Self {
        GradAccum { sums: IndexMap::new() }
    }

    fn add(&mut self, name: &str, grad: &Tensor<S>) {
        match self.sums.get_mut(name) {
            Some(acc) => {
                for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + *g;
                }
            }
            None => {
                self.sums.insert(name.to_string(), grad.clone());
            }
        }
    }

    fn scale(&mut self, c: f64) {
        for acc in self.sums.values_mut() {
            for v in acc.data_mut() {
                *v = *v * S::from_f64(c);
            }
        }
    }
}

/// Forward/backward for one augmented view. Returns the item loss and
/// adds parameter gradients into `accum`.
fn item_step<S: Scalar>(
    teacher: &Teacher<S>,
    student: &Student<S>,
    image: &Tensor<S>,
    label: Option<u32>,
    objective: &Objective,
    trainable: &[(String, Role)],
    accum: &mut GradAccum<S>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = student.store.bind(&mut tape, true);
    let loss = match objective {
        Objective::Cosine => {
            let target = teacher.representation(image)?;
            if dot_norms(&target, &target).1 < NORM_EPS {
                return Err(Error::ZeroNorm);
            }
            let repr = student.repr_on_tape(&mut tape, &p, image, None, None);
            tape.cosine_loss(repr, &target)
        }
        Objective::KlDistill { tau } => {
            let targets = soft_targets(&teacher.logits(image)?, *tau);
            let (_, logits) = repr_and_logits(student, &mut tape, &p, image);
            tape.cross_entropy_soft(logits, &targets)
        }
        Objective::CosineAndCls { weight, .. } => {
            let target = teacher.representation(image)?;
            if dot_norms(&target, &target).1 < NORM_EPS {
                return Err(Error::ZeroNorm);
            }
            let (repr, logits) = repr_and_logits(student, &mut tape, &p, image);
            let align = tape.cosine_loss(repr, &target);
            let ce = tape.cross_entropy_rows(logits, &[label.expect("label required")], u32::MAX);
            let ce_w = tape.scale(ce, S::from_f64(*weight));
            tape.add(align, ce_w)
        }
    };
    if let Some(op) = tape.nonfinite_op() {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    let value = tape.value(loss).data()[0].to_f64();
    let mut grads = tape.backward(loss);
    for (name, _) in trainable {
        if let Some(g) = grads.take(p.p(name)) {
            accum.add(name, &g);
        }
    }
    Ok(value)
}

/// Align the student to the teacher over an unlabeled image set.
///
/// Per optimizer step: every image in the batch is augmented once, the
/// same view feeds both models, gradients are averaged, and each group
/// steps at `lr × role multiplier`. Frozen and teacher weights are never
/// touched, so they stay bit-identical to the donor.
pub fn bootstrap_run<S: Scalar>(
    teacher: &Teacher<S>,
    student: &mut Student<S>,
    images: &[Tensor<S>],
    objective: &Objective,
    cfg: &BootstrapConfig,
) -> Result<BootstrapReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    assert_eq!(
        teacher.spec.image, student.spec.image,
        "teacher and student must share the input resolution"
    );
    if let Objective::CosineAndCls { labels, .. } = objective {
        assert_eq!(labels.len(), images.len(), "one label per dataset item");
        for &l in labels {
            if l as usize >= student.spec.classes {
                return Err(Error::LabelOutOfRange { label: l, classes: student.spec.classes });
            }
        }
    }

    let steps_per_epoch = images.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut report = BootstrapReport::default();
    if total_steps == 0 {
        return Ok(report);
    }
    let schedule =
        LrSchedule::new(cfg.base_lr, cfg.warmup_epochs * steps_per_epoch, total_steps);
    let aug = cfg.augmentation(student.spec.image);
    let trainable: Vec<(String, Role)> = student
        .store
        .iter()
        .filter(|(_, p)| p.role.trainable())
        .map(|(n, p)| (n.to_string(), p.role))
        .collect();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..images.len()).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let warmup = epoch < cfg.warmup_epochs;
        indices.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let lr = schedule.lr_at(step)?;
            let mut accum = GradAccum::new();
            let mut loss_sum = 0.0;
            for &i in chunk {
                let view = augment(&images[i], &aug, &mut rng)?;
                let label = match objective {
                    Objective::CosineAndCls { labels, .. } => Some(labels[i]),
                    _ => None,
                };
                let item =
                    item_step(teacher, student, &view, label, objective, &trainable, &mut accum)
                        .map_err(|e| match e {
                            Error::NonFinite { .. } => Error::Diverged { step, seed: cfg.seed },
                            other => other,
                        })?;
                loss_sum += item;
            }
            let loss = loss_sum / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NanLoss { step, seed: cfg.seed });
            }
            accum.scale(1.0 / chunk.len() as f64);
            opt.begin_step();
            for (name, role) in &trainable {
                let mult = role.lr_multiplier(warmup, cfg.tunable_lr_mult);
                if mult == 0.0 {
                    continue; // frozen this step: no weight or moment update
                }
                if let Some(grad) = accum.sums.get(name) {
                    let grad = grad.clone();
                    opt.update(name, student.store.get_mut(name).data_mut(), grad.data(), lr * mult);
                }
            }
            report.curve.push(LossRecord { step, lr, loss });
            epoch_sum += loss;
            step += 1;
        }
        report.epoch_mean_loss.push(epoch_sum / steps_per_epoch as f64);
    }
    Ok(report)
}

/// Mean cosine alignment loss over a held-out set, no augmentation
/// (images are bilinearly resized to the model resolution if needed).
pub fn mean_alignment_loss<S: Scalar>(
    teacher: &Teacher<S>,
    student: &Student<S>,
    images: &[Tensor<S>],
) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let res = student.spec.image;
    let mut sum = 0.0;
    for img in images {
        let img = if img.dim(0) == res && img.dim(1) == res {
            img.clone()
        } else {
            eval_resize(img, res)
        };
        let target = teacher.representation(&img)?;
        let repr = student.representation(&img)?;
        sum += cosine_align_value(&repr, &target)?;
    }
    Ok(sum / images.len() as f64)
}

/// Re-initialize the latent tokens at a denser grid: fresh grid RoIs, and
/// each new embedding copied from the old token whose (trained) RoI
/// center is nearest the new grid cell center.
pub fn reinit_tokens<S: Scalar>(student: &mut Student<S>, new_n: usize) -> Result<()> {
    let old_n = student.spec.n_tokens;
    if new_n <= old_n {
        return Err(Error::TokenCountNotIncreased { new: new_n, old: old_n });
    }
    let old_tokens = student.store.get("sf.focus.tokens").clone();
    let old_rois = student.store.get("sf.focus.rois").clone();
    let df = old_tokens.cols();
    let new_rois: Tensor<S> = roi_grid(new_n);
    let mut new_tokens = vec![S::zero(); new_n * df];
    for t in 0..new_n {
        let cx = new_rois.data()[t * 4].to_f64();
        let cy = new_rois.data()[t * 4 + 1].to_f64();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for o in 0..old_n {
            let ox = old_rois.data()[o * 4].to_f64();
            let oy = old_rois.data()[o * 4 + 1].to_f64();
            let d = (cx - ox).powi(2) + (cy - oy).powi(2);
            if d < best_d {
                best_d = d;
                best = o;
            }
        }
        new_tokens[t * df..(t + 1) * df]
            .copy_from_slice(&old_tokens.data()[best * df..(best + 1) * df]);
    }
    student.store.remove("sf.focus.tokens");
    student.store.remove("sf.focus.rois");
    student.store.insert("sf.focus.tokens", Tensor::new(vec![new_n, df], new_tokens), Role::Fresh);
    student.store.insert("sf.focus.rois", new_rois, Role::Fresh);
    student.spec.n_tokens = new_n;
    Ok(())
}

/// Continue bootstrapping with more tokens: denser grid re-init, then a
/// short alignment run (fresh optimizer state, same parameter groups).
pub fn continue_with_more_tokens<S: Scalar>(
    teacher: &Teacher<S>,
    student: &mut Student<S>,
    images: &[Tensor<S>],
    new_n: usize,
    cfg: &BootstrapConfig,
) -> Result<BootstrapReport> {
    reinit_tokens(student, new_n)?;
    bootstrap_run(teacher, student, images, &Objective::Cosine, cfg)
}

#[derive(Clone, Debug)]
pub struct TeacherTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub flip_prob: f64,
    pub crop_scale: (f64, f64),
    pub crop_aspect: (f64, f64),
    pub seed: u64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            epochs: 30,
            batch_size: 16,
            base_lr: 1e-3,
            weight_decay: 1e-4,
            flip_prob: 0.5,
            crop_scale: (0.6, 1.0),
            crop_aspect: (0.9, 1.1),
            seed: 0,
        }
    }
}

/// Supervised cross-entropy training of the (toy) teacher itself, with
/// the same crop/flip augmentation family the alignment run uses so its
/// representations are stable under those views.
pub fn train_toy_teacher<S: Scalar>(
    teacher: &mut Teacher<S>,
    data: &[crate::data::LabeledImage<S>],
    cfg: &TeacherTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for item in data {
        if item.label as usize >= teacher.spec.classes {
            return Err(Error::LabelOutOfRange {
                label: item.label,
                classes: teacher.spec.classes,
            });
        }
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = LrSchedule::new(cfg.base_lr, steps_per_epoch, total_steps);
    let aug = AugmentConfig {
        target: teacher.spec.image,
        flip_prob: cfg.flip_prob,
        scale: cfg.crop_scale,
        aspect: cfg.crop_aspect,
    };
    let names: Vec<String> = teacher.store.names().map(str::to_string).collect();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            let lr = schedule.lr_at(step)?;
            let mut accum = GradAccum::new();
            let mut loss_sum = 0.0;
            for &i in chunk {
                let view = augment(&data[i].image, &aug, &mut rng)?;
                let mut tape = Tape::new();
                let p = teacher.store.bind_all(&mut tape);
                let logits = teacher.logits_on_tape(&mut tape, &p, &view);
                let loss = tape.cross_entropy_rows(logits, &[data[i].label], u32::MAX);
                if tape.nonfinite_op().is_some() {
                    return Err(Error::Diverged { step, seed: cfg.seed });
                }
                loss_sum += tape.value(loss).data()[0].to_f64();
                let mut grads = tape.backward(loss);
                for name in &names {
                    if let Some(g) = grads.take(p.p(name)) {
                        accum.add(name, &g);
                    }
                }
            }
            let loss = loss_sum / chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NanLoss { step, seed: cfg.seed });
            }
            accum.scale(1.0 / chunk.len() as f64);
            opt.begin_step();
            for name in &names {
                if let Some(grad) = accum.sums.get(name) {
                    let grad = grad.clone();
                    opt.update(name, teacher.store.get_mut(name).data_mut(), grad.data(), lr);
                }
            }
            epoch_sum += loss;
            step += 1;
        }
        epoch_losses.push(epoch_sum / steps_per_epoch as f64);
    }
    Ok(epoch_losses)
}

/// Top-1 accuracy on resolution-matched (or resized) labeled images.
pub fn teacher_accuracy<S: Scalar>(
    teacher: &Teacher<S>,
    data: &[crate::data::LabeledImage<S>],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let res = teacher.spec.image;
    let mut hits = 0usize;
    for item in data {
        let img = if item.image.dim(0) == res && item.image.dim(1) == res {
            item.image.clone()
        } else {
            eval_resize(&item.image, res)
        };
        if teacher.predict(&img)? == item.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
