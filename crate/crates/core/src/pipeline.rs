//! Two-stage adaptation: adversarial + memory-regularized Stage-I on source
//! and unlabeled target data, pseudo-label generation, then target-only
//! Stage-II self-training.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};

use crate::binio::write_atomic;
use crate::data::{encode_dataset, import_dataset, stack, BatchIter, Dataset, DomainSpec, SegSample};
use crate::error::{Error, Result};
use crate::losses::{
    self, adv_d_loss, adv_g_loss, class_balance_weights, fuse_pseudo_labels, memory_reg, seg_ce, ClassBalanceWeights, FusionRule,
    LossWeights, MrGradient, PseudoLabelMap, Stage1Parts, Stage2Parts,
};
use crate::metrics::{argmax_classes, ConfusionMatrix, Disagreement};
use crate::models::{DiscConfig, Discriminator, Mode, ModelCheckpoint, Parameters, SegConfig, SegModel};
use crate::optim::{OptimizerKind, OptimizerState, PolySchedule};
use crate::rng::{self, derive_seed};
use crate::tensor::{no_grad, Tensor};

/// Seed offsets for the splits a run derives from its base seed.
pub mod split {
    pub const SOURCE: u64 = 11;
    pub const TARGET_TRAIN: u64 = 12;
    pub const TARGET_VAL: u64 = 13;
    pub const TARGET_EVAL: u64 = 14;
    pub const MODEL: u64 = 21;
    pub const DISC_PRIMARY: u64 = 22;
    pub const DISC_AUX: u64 = 23;
    pub const SHUFFLE_SOURCE: u64 = 31;
    pub const SHUFFLE_TARGET: u64 = 32;
    pub const DROPOUT: u64 = 33;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Fraction of `stage1_iters` trained before the memory term switches on.
    pub mr_warmup_frac: f64,
    /// Absolute warm-up length; overrides `mr_warmup_frac` when set.
    pub mr_warmup_override: Option<usize>,
    pub batch_size: usize,
    /// SGD base rate. The desk-scale network needs a far larger rate than the
    /// 2.5e-4 used for a pretrained backbone.
    pub seg_lr: f64,
    pub seg_momentum: f64,
    /// Adam base rate of both discriminators.
    pub disc_lr: f64,
    pub loss_weights: LossWeights,
    pub lambda_mr_sweep: Vec<f64>,
    pub seed: u64,
    pub eval_every: usize,
    /// Unlabeled pool size per training domain.
    pub train_pool: usize,
    /// Labeled target images used for checkpoint selection.
    pub val_count: usize,
    /// Labeled target images used for reporting.
    pub eval_count: usize,
    /// Square training crop; `0` trains on full images.
    pub crop: usize,
    pub mr_gradient: MrGradient,
    pub class_balance: bool,
    pub seg: SegConfig,
    pub disc: DiscConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iters: 2500,
            stage2_iters: 2500,
            mr_warmup_frac: 0.4,
            mr_warmup_override: None,
            batch_size: 2,
            seg_lr: 0.03,
            seg_momentum: 0.9,
            disc_lr: 0.00002,
            loss_weights: LossWeights::default(),
            lambda_mr_sweep: vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.5],
            seed: 0,
            eval_every: 250,
            train_pool: 512,
            val_count: 48,
            eval_count: 96,
            crop: 48,
            mr_gradient: MrGradient::Detached,
            class_balance: true,
            seg: SegConfig::default(),
            disc: DiscConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn mr_warmup_iters(&self) -> usize {
        self.mr_warmup_override
            .unwrap_or_else(|| (self.mr_warmup_frac * self.stage1_iters as f64).round() as usize)
    }

    pub fn adversarial(&self) -> bool {
        self.loss_weights.adv_primary > 0.0 || self.loss_weights.adv_aux > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.stage1_iters == 0 || self.stage2_iters == 0 {
            return Err(Error::Config("stage iteration counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mr_warmup_frac) || self.mr_warmup_iters() >= self.stage1_iters {
            return Err(Error::Config(format!(
                "mr warm-up of {} iterations must be shorter than stage1_iters {}",
                self.mr_warmup_iters(),
                self.stage1_iters
            )));
        }
        for (name, lr) in [("seg_lr", self.seg_lr), ("disc_lr", self.disc_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.train_pool == 0 || self.val_count == 0 {
            return Err(Error::Config(
                "batch_size, eval_every, train_pool and val_count must be positive".into(),
            ));
        }
        if self.crop != 0 && !self.crop.is_multiple_of(SegConfig::TOTAL_STRIDE) {
            return Err(Error::Config(format!(
                "crop {} must be a multiple of {}",
                self.crop,
                SegConfig::TOTAL_STRIDE
            )));
        }
        if self.seg.num_classes != self.disc.num_classes {
            return Err(Error::Config("segmentation and discriminator class counts differ".into()));
        }
        Ok(())
    }

    pub fn source_spec(&self) -> DomainSpec {
        DomainSpec::source(derive_seed(self.seed, split::SOURCE))
    }

    pub fn target_spec(&self) -> DomainSpec {
        DomainSpec::target(derive_seed(self.seed, split::TARGET_TRAIN))
    }

    /// Held-out labeled target split used only for reporting.
    pub fn eval_spec(&self) -> DomainSpec {
        DomainSpec::target(derive_seed(self.seed, split::TARGET_EVAL))
    }

    fn val_spec(&self, target: &DomainSpec) -> DomainSpec {
        target.with_seed(derive_seed(target.seed, split::TARGET_VAL))
    }

    fn crop(&self) -> Option<usize> {
        (self.crop > 0).then_some(self.crop)
    }
}

/// Loss components and schedule values recorded for one iteration, plus the
/// evaluation snapshot when one was taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub lr: f64,
    pub seg_primary: f64,
    pub seg_aux: f64,
    pub adv_primary: f64,
    pub adv_aux: f64,
    pub mr: f64,
    /// `lambda_mr * mr` as added to the objective.
    pub mr_weighted: f64,
    pub total: f64,
    pub disc_primary: f64,
    pub disc_aux: f64,
    pub eval: Option<EvalSnapshot>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSnapshot {
    pub aux_miou: f64,
    pub primary_miou: f64,
    pub fused_miou: f64,
    pub disagreement_rate: f64,
}

/// Evaluation results plus the loss trace of the run that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    /// IoU per class of the fused prediction.
    pub per_class_iou: Vec<f64>,
    pub aux_iou: Vec<f64>,
    pub primary_iou: Vec<f64>,
    /// Fused mIoU, the headline number.
    pub miou: f64,
    pub aux_miou: f64,
    pub primary_miou: f64,
    pub fused_miou: f64,
    pub disagreement_rate: f64,
    pub trace: Vec<TraceRow>,
    /// Iteration whose weights were kept.
    pub best_iter: usize,
    /// Validation snapshot at the last iteration, before early-stop
    /// selection.
    pub last: Option<EvalSnapshot>,
    /// Source batches consumed.
    pub source_draws: u64,
}

impl RunMetrics {
    pub fn snapshot(&self) -> EvalSnapshot {
        EvalSnapshot {
            aux_miou: self.aux_miou,
            primary_miou: self.primary_miou,
            fused_miou: self.fused_miou,
            disagreement_rate: self.disagreement_rate,
        }
    }

    pub const CSV_HEADER: &'static str = "iter,lr,seg_primary,seg_aux,adv_primary,adv_aux,mr,mr_weighted,total,\
disc_primary,disc_aux,aux_miou,primary_miou,fused_miou,disagreement_rate";

    /// Loss trace as CSV; metric columns are empty on iterations without an
    /// evaluation.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.trace {
            let _ = write!(
                out,
                "{},{:e},{},{},{},{},{},{},{},{},{}",
                r.iter,
                r.lr,
                r.seg_primary,
                r.seg_aux,
                r.adv_primary,
                r.adv_aux,
                r.mr,
                r.mr_weighted,
                r.total,
                r.disc_primary,
                r.disc_aux
            );
            match r.eval {
                Some(e) => {
                    let _ = writeln!(
                        out,
                        ",{:.6},{:.6},{:.6},{:.6}",
                        e.aux_miou, e.primary_miou, e.fused_miou, e.disagreement_rate
                    );
                }
                None => out.push_str(",,,,\n"),
            }
        }
        out
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.trace_csv().as_bytes())
    }
}

/// Runs a labeled dataset through the model and scores aux-only,
/// primary-only and fused (`argmax(p_primary + 0.5 p_aux)`) predictions.
pub fn evaluate_model(model: &SegModel, data: &Dataset) -> Result<RunMetrics> {
    if data.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    if !data.is_labeled() {
        return Err(Error::Argument("evaluation data must carry labels".into()));
    }
    let c = model.num_classes();
    let mut cm_aux = ConfusionMatrix::new(c);
    let mut cm_primary = ConfusionMatrix::new(c);
    let mut cm_fused = ConfusionMatrix::new(c);
    let mut disagreement = Disagreement::default();
    no_grad(|| -> Result<()> {
        for chunk in data.samples.chunks(16) {
            let batch = stack(chunk)?;
            let out = model.forward(&batch.images, Mode::Eval)?;
            let fused = fuse_pseudo_labels(&out.primary, &out.aux)?;
            let (pa, pp) = (out.aux.data(), out.primary.data());
            let per = pa.len() / chunk.len();
            for (i, sample) in chunk.iter().enumerate() {
                let truth = sample.label.as_deref().expect("checked labeled");
                let aux = argmax_classes(&pa[i * per..(i + 1) * per], c);
                let primary = argmax_classes(&pp[i * per..(i + 1) * per], c);
                cm_aux.add(truth, &aux)?;
                cm_primary.add(truth, &primary)?;
                cm_fused.add(truth, &fused[i].labels)?;
                disagreement.add(&primary, &aux);
            }
        }
        Ok(())
    })?;
    let fused_miou = cm_fused.miou();
    Ok(RunMetrics {
        per_class_iou: cm_fused.iou(),
        aux_iou: cm_aux.iou(),
        primary_iou: cm_primary.iou(),
        miou: fused_miou,
        aux_miou: cm_aux.miou(),
        primary_miou: cm_primary.miou(),
        fused_miou,
        disagreement_rate: disagreement.rate(),
        ..RunMetrics::default()
    })
}

/// Evaluates a checkpoint on `count` labeled samples of `spec`.
pub fn evaluate(checkpoint: &ModelCheckpoint, spec: &DomainSpec, count: usize) -> Result<RunMetrics> {
    let model = checkpoint.seg_model()?;
    if spec.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint predicts {} classes, data has {}",
            model.num_classes(),
            spec.num_classes
        )));
    }
    evaluate_model(&model, &Dataset::generate(spec, count)?)
}

fn snapshot_params(models: &[&dyn ParamsDyn]) -> Vec<Vec<f32>> {
    models.iter().flat_map(|m| m.params()).map(|t| t.to_vec()).collect()
}

fn restore_params(models: &[&dyn ParamsDyn], saved: &[Vec<f32>]) {
    let params: Vec<Tensor> = models.iter().flat_map(|m| m.params()).collect();
    for (p, v) in params.iter().zip(saved) {
        p.data_mut().copy_from_slice(v);
    }
}

trait ParamsDyn {
    fn params(&self) -> Vec<Tensor>;
}

impl<T: Parameters> ParamsDyn for T {
    fn params(&self) -> Vec<Tensor> {
        self.parameters()
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.item() as f64
}

fn check_finite(iter: usize, row: &TraceRow) -> Result<()> {
    let parts = [
        ("seg_primary", row.seg_primary),
        ("seg_aux", row.seg_aux),
        ("adv_primary", row.adv_primary),
        ("adv_aux", row.adv_aux),
        ("mr", row.mr),
        ("total", row.total),
        ("disc_primary", row.disc_primary),
        ("disc_aux", row.disc_aux),
    ];
    if parts.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let components = parts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ");
    Err(Error::NonFinite { iter, components })
}

/// Keeps the weights with the best fused validation mIoU.
struct BestKeeper {
    best: Option<(f64, usize, Vec<Vec<f32>>)>,
}

impl BestKeeper {
    fn offer(&mut self, score: f64, iter: usize, models: &[&dyn ParamsDyn]) {
        if self.best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            self.best = Some((score, iter, snapshot_params(models)));
        }
    }
}

/// Stage-I: source segmentation, output-space adversarial alignment of both
/// heads and, after warm-up, memory regularization on target batches.
///
/// Returns the checkpoint with the best fused mIoU on a held-out target
/// validation split, among evaluations after the warm-up.
pub fn train_stage1(
    config: &TrainConfig,
    source_spec: &DomainSpec,
    target_spec: &DomainSpec,
) -> Result<(ModelCheckpoint, RunMetrics)> {
    config.validate()?;
    let source = Dataset::generate(source_spec, config.train_pool)?;
    let target = Dataset::generate(target_spec, config.train_pool)?.without_labels();
    let val = Dataset::generate(&config.val_spec(target_spec), config.val_count)?;
    let seg = SegModel::new(config.seg.clone(), derive_seed(config.seed, split::MODEL))?;
    stage1_loop(config, seg, &source, &target, &val)
}

fn stage1_loop(
    config: &TrainConfig,
    seg: SegModel,
    source: &Dataset,
    target: &Dataset,
    val: &Dataset,
) -> Result<(ModelCheckpoint, RunMetrics)> {
    let w = config.loss_weights;
    let adversarial = config.adversarial();
    let disc_p = Discriminator::new(config.disc.clone(), derive_seed(config.seed, split::DISC_PRIMARY))?;
    let disc_a = Discriminator::new(config.disc.clone(), derive_seed(config.seed, split::DISC_AUX))?;
    let seg_params = seg.parameters();
    let dp_params = disc_p.parameters();
    let da_params = disc_a.parameters();
    let mut seg_opt = OptimizerState::new(OptimizerKind::sgd(config.seg_momentum), config.seg_lr)?;
    let mut dp_opt = OptimizerState::new(OptimizerKind::adam(), config.disc_lr)?;
    let mut da_opt = OptimizerState::new(OptimizerKind::adam(), config.disc_lr)?;
    let seg_sched = PolySchedule::new(config.seg_lr, config.stage1_iters)?;
    let disc_sched = PolySchedule::new(config.disc_lr, config.stage1_iters)?;
    let warmup = config.mr_warmup_iters();

    let mut src_iter = BatchIter::new(
        source,
        config.batch_size,
        derive_seed(config.seed, split::SHUFFLE_SOURCE),
        config.crop(),
    )?;
    let mut tgt_iter = BatchIter::new(
        target,
        config.batch_size,
        derive_seed(config.seed, split::SHUFFLE_TARGET),
        config.crop(),
    )?;
    // Separate dropout streams keep the source path identical across arms
    // that skip the target forward pass.
    let mut src_drop = rng::seeded(derive_seed(config.seed, split::DROPOUT), rng::stream::DROPOUT);
    let mut tgt_drop = rng::seeded(derive_seed(config.seed, split::DROPOUT ^ 1), rng::stream::DROPOUT);
    let mut keeper = BestKeeper { best: None };
    let mut trace = Vec::with_capacity(config.stage1_iters);

    for iter in 0..config.stage1_iters {
        let lr = seg_sched.lr(iter)?;
        let mr_on = w.lambda_mr > 0.0 && iter >= warmup;
        let src = src_iter.next_batch()?;
        let labels = src.labels.as_deref().ok_or_else(|| Error::Argument("source batch lacks labels".into()))?;
        let src_out = seg.forward(&src.images, Mode::Train(&mut src_drop))?;
        let seg_primary = seg_ce(&src_out.primary, labels, None)?;
        let seg_aux = seg_ce(&src_out.aux, labels, None)?;

        let zero = Tensor::scalar(0.0f32);
        let mut row = TraceRow {
            iter,
            lr,
            ..TraceRow::default()
        };
        let tgt_out = if adversarial || mr_on {
            let tgt = tgt_iter.next_batch()?;
            Some(seg.forward(&tgt.images, Mode::Train(&mut tgt_drop))?)
        } else {
            None
        };
        let (adv_primary, adv_aux) = match (&tgt_out, adversarial) {
            (Some(t), true) => (
                adv_g_loss(&disc_p.forward(&t.primary)?)?,
                adv_g_loss(&disc_a.forward(&t.aux)?)?,
            ),
            _ => (zero.clone(), zero.clone()),
        };
        let mr = match (&tgt_out, mr_on) {
            (Some(t), true) => memory_reg(&t.aux, &t.primary, config.mr_gradient)?,
            _ => zero.clone(),
        };
        let parts = Stage1Parts {
            seg_primary,
            seg_aux,
            adv_primary,
            adv_aux,
            mr,
        };
        let total = losses::stage1_total(&w, &parts)?;
        row.seg_primary = scalar(&parts.seg_primary);
        row.seg_aux = scalar(&parts.seg_aux);
        row.adv_primary = scalar(&parts.adv_primary);
        row.adv_aux = scalar(&parts.adv_aux);
        row.mr = scalar(&parts.mr);
        row.mr_weighted = if mr_on { w.lambda_mr * row.mr } else { 0.0 };
        row.total = scalar(&total);
        check_finite(iter, &row)?;

        for p in &seg_params {
            p.zero_grad();
        }
        total.backward()?;
        seg_opt.step(&seg_params, lr)?;

        if let (Some(t), true) = (&tgt_out, adversarial) {
            let d_lr = disc_sched.lr(iter)?;
            for p in dp_params.iter().chain(&da_params) {
                p.zero_grad();
            }
            let d_primary = adv_d_loss(
                &disc_p.forward(&src_out.primary.detach())?,
                &disc_p.forward(&t.primary.detach())?,
            )?;
            let d_aux = adv_d_loss(&disc_a.forward(&src_out.aux.detach())?, &disc_a.forward(&t.aux.detach())?)?;
            row.disc_primary = scalar(&d_primary);
            row.disc_aux = scalar(&d_aux);
            check_finite(iter, &row)?;
            d_primary.add(&d_aux)?.backward()?;
            dp_opt.step(&dp_params, d_lr)?;
            da_opt.step(&da_params, d_lr)?;
        }

        let last = iter + 1 == config.stage1_iters;
        if (iter + 1) % config.eval_every == 0 || last {
            let m = evaluate_model(&seg, val)?;
            row.eval = Some(m.snapshot());
            // Selection starts once the regularizer is live, so every arm is
            // judged over the same window.
            if iter + 1 > warmup || last {
                keeper.offer(m.fused_miou, iter + 1, &[&seg, &disc_p, &disc_a]);
            }
            info!(
                "stage1 iter {}: total {:.4} mr {:.4} val fused mIoU {:.4} (aux {:.4}, primary {:.4}, disagree {:.4})",
                iter + 1,
                row.total,
                row.mr,
                m.fused_miou,
                m.aux_miou,
                m.primary_miou,
                m.disagreement_rate
            );
        } else if iter % 100 == 0 {
            debug!("stage1 iter {iter}: total {:.4}", row.total);
        }
        trace.push(row);
    }

    let (_, best_iter, saved) = keeper.best.expect("final iteration always evaluates");
    restore_params(&[&seg, &disc_p, &disc_a], &saved);
    let checkpoint = ModelCheckpoint::capture(
        &seg,
        Some((&disc_p, &disc_a)),
        &[("seg", &seg_opt), ("disc_p", &dp_opt), ("disc_a", &da_opt)],
        best_iter as u64,
    );
    let mut metrics = evaluate_model(&seg, val)?;
    metrics.last = trace.last().and_then(|r| r.eval);
    metrics.trace = trace;
    metrics.best_iter = best_iter;
    metrics.source_draws = src_iter.draws();
    Ok((checkpoint, metrics))
}

/// Target images paired with their frozen pseudo labels.
#[derive(Clone, Debug)]
pub struct PseudoDataset {
    pub data: Dataset,
    pub maps: Vec<PseudoLabelMap>,
    pub weights: ClassBalanceWeights,
}

impl PseudoDataset {
    pub const LABELS_FILE: &'static str = "pseudo.ds";
    pub const WEIGHTS_FILE: &'static str = "class_weights.txt";

    /// Writes the labeled images as a dataset container plus the class
    /// weights as one comma-separated line.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(Self::LABELS_FILE), &encode_dataset(&self.data))?;
        let w: Vec<String> = self.weights.as_slice().iter().map(|v| v.to_string()).collect();
        write_atomic(&dir.join(Self::WEIGHTS_FILE), format!("{}\n", w.join(",")).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let data = import_dataset(&dir.join(Self::LABELS_FILE))?;
        if !data.is_labeled() {
            return Err(Error::Argument(format!("{} holds unlabeled samples", dir.display())));
        }
        let path = dir.join(Self::WEIGHTS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let weights = text
            .trim()
            .split(',')
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("bad class weight `{v}` in {}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        let weights = ClassBalanceWeights::new(weights)?;
        let maps = data
            .samples
            .iter()
            .map(|s| PseudoLabelMap {
                height: s.height,
                width: s.width,
                labels: s.label.clone().expect("checked labeled"),
                rule: FusionRule::PrimaryPlusHalfAux,
            })
            .collect();
        Ok(PseudoDataset { data, maps, weights })
    }
}

/// Labels every target image with `argmax(p_primary + 0.5 p_aux)` of the
/// Stage-I model at inference and derives class-balance weights from the
/// resulting label histogram.
pub fn generate_pseudo_labels(
    checkpoint: &ModelCheckpoint,
    target_spec: &DomainSpec,
    count: usize,
) -> Result<PseudoDataset> {
    let images = Dataset::generate(target_spec, count)?.without_labels();
    pseudo_label_dataset(checkpoint, images)
}

pub fn pseudo_label_dataset(checkpoint: &ModelCheckpoint, images: Dataset) -> Result<PseudoDataset> {
    let classes = checkpoint.num_classes()?;
    if classes != images.spec.num_classes {
        return Err(Error::Config(format!(
            "checkpoint predicts {classes} classes, target spec has {}",
            images.spec.num_classes
        )));
    }
    if images.is_empty() {
        return Err(Error::Argument("no target images to pseudo-label".into()));
    }
    let model = checkpoint.seg_model()?;
    let mut maps = Vec::with_capacity(images.len());
    no_grad(|| -> Result<()> {
        for chunk in images.samples.chunks(16) {
            let batch = stack(chunk)?;
            let out = model.forward(&batch.images, Mode::Eval)?;
            maps.extend(fuse_pseudo_labels(&out.primary, &out.aux)?);
        }
        Ok(())
    })?;
    let weights = class_balance_weights(&maps, classes)?;
    let samples: Vec<SegSample> = images
        .samples
        .into_iter()
        .zip(&maps)
        .map(|(s, m)| SegSample {
            label: Some(m.labels.clone()),
            ..s
        })
        .collect();
    Ok(PseudoDataset {
        data: Dataset {
            spec: images.spec,
            samples,
        },
        maps,
        weights,
    })
}

/// Stage-II: target-only fine-tuning on frozen pseudo labels with memory
/// regularization. Discriminators and source data are not used; the
/// optimizer and learning-rate schedule start fresh.
pub fn train_stage2(
    config: &TrainConfig,
    stage1: &ModelCheckpoint,
    pseudo: &PseudoDataset,
) -> Result<(ModelCheckpoint, RunMetrics)> {
    config.validate()?;
    let val = Dataset::generate(&config.val_spec(&pseudo.data.spec), config.val_count)?;
    stage2_loop(config, stage1, pseudo, &val)
}

fn stage2_loop(
    config: &TrainConfig,
    stage1: &ModelCheckpoint,
    pseudo: &PseudoDataset,
    val: &Dataset,
) -> Result<(ModelCheckpoint, RunMetrics)> {
    let w = config.loss_weights;
    let seg = stage1.seg_model()?;
    if seg.num_classes() != pseudo.weights.len() {
        return Err(Error::Config("pseudo labels and checkpoint disagree on class count".into()));
    }
    let seg_params = seg.parameters();
    let mut opt = OptimizerState::new(OptimizerKind::sgd(config.seg_momentum), config.seg_lr)?;
    let sched = PolySchedule::new(config.seg_lr, config.stage2_iters)?;
    let class_weights = config.class_balance.then_some(&pseudo.weights);
    let mut it = BatchIter::new(
        &pseudo.data,
        config.batch_size,
        derive_seed(config.seed, split::SHUFFLE_TARGET ^ 0x5EC0),
        config.crop(),
    )?;
    let mut drop_rng = rng::seeded(derive_seed(config.seed, split::DROPOUT ^ 0x5EC0), rng::stream::DROPOUT);
    let mut keeper = BestKeeper { best: None };
    let mut trace = Vec::with_capacity(config.stage2_iters);

    for iter in 0..config.stage2_iters {
        let lr = sched.lr(iter)?;
        let batch = it.next_batch()?;
        let labels = batch.labels.as_deref().expect("pseudo dataset is labeled");
        let out = seg.forward(&batch.images, Mode::Train(&mut drop_rng))?;
        let parts = Stage2Parts {
            pseg_primary: seg_ce(&out.primary, labels, class_weights)?,
            pseg_aux: seg_ce(&out.aux, labels, class_weights)?,
            mr: if w.lambda_mr > 0.0 {
                memory_reg(&out.aux, &out.primary, config.mr_gradient)?
            } else {
                Tensor::scalar(0.0)
            },
        };
        let total = losses::stage2_total(&w, &parts)?;
        let mut row = TraceRow {
            iter,
            lr,
            seg_primary: scalar(&parts.pseg_primary),
            seg_aux: scalar(&parts.pseg_aux),
            mr: scalar(&parts.mr),
            total: scalar(&total),
            ..TraceRow::default()
        };
        row.mr_weighted = w.lambda_mr * row.mr;
        check_finite(iter, &row)?;
        for p in &seg_params {
            p.zero_grad();
        }
        total.backward()?;
        opt.step(&seg_params, lr)?;

        let last = iter + 1 == config.stage2_iters;
        if (iter + 1) % config.eval_every == 0 || last {
            let m = evaluate_model(&seg, val)?;
            row.eval = Some(m.snapshot());
            keeper.offer(m.fused_miou, iter + 1, &[&seg]);
            info!(
                "stage2 iter {}: total {:.4} val fused mIoU {:.4} (disagree {:.4})",
                iter + 1,
                row.total,
                m.fused_miou,
                m.disagreement_rate
            );
        }
        trace.push(row);
    }

    let (_, best_iter, saved) = keeper.best.expect("final iteration always evaluates");
    restore_params(&[&seg], &saved);
    let checkpoint = ModelCheckpoint::capture(&seg, None, &[("seg", &opt)], best_iter as u64);
    let mut metrics = evaluate_model(&seg, val)?;
    metrics.last = trace.last().and_then(|r| r.eval);
    metrics.trace = trace;
    metrics.best_iter = best_iter;
    Ok((checkpoint, metrics))
}
