//! Two-stage training: supervised pretraining on paired data with the
//! pixel + correlation objective, pseudo-label generation with frozen
//! reference scores, and fine-tuning under a frozen differentiable
//! quality scorer with the weighted three-term objective.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Result, UieError};
use crate::extractor::FeatureExtractor;
use crate::graph::{NodeId, Program};
use crate::image::{augment_flip, extract_patch, Image, ImagePair};
use crate::iqa::QualityScorer;
use crate::loss::{build_pearson_loss, build_pixel_loss, build_perceptual_loss, LossBreakdown, LossWeights};
use crate::manifest::SourceTag;
use crate::net::{forward_enhance, init_network, open_network, NetworkConfig};
use crate::params::{Checkpoint, ParameterStore};
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Steps averaged by the early-stop rule.
pub const STOP_WINDOW: usize = 10;

/// Cosine annealing from `eta_max` (step 0) to `eta_min` (step =
/// total): eta_min + ½(eta_max − eta_min)(1 + cos(π·step/total)).
pub fn cosine_lr(step: usize, total: usize, eta_max: f64, eta_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(UieError::Range(format!(
            "schedule step {step} outside 0..={total}"
        )));
    }
    if !(eta_min <= eta_max) || !eta_min.is_finite() || !eta_max.is_finite() {
        return Err(UieError::Range(format!(
            "learning-rate bounds ({eta_min}, {eta_max}) are invalid"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(eta_min + 0.5 * (eta_max - eta_min) * (1.0 + phase.cos()))
}

/// Decoupled-weight-decay adaptive-moment optimizer.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamW {
    /// One update over every trainable parameter. `t` is the 1-based
    /// step count used for bias correction; missing gradients count as
    /// zero. Weight decay is applied directly to the parameter,
    /// decoupled from the moment estimates.
    pub fn step(
        &self,
        params: &mut ParameterStore,
        moments: &mut BTreeMap<String, (Tensor, Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        t: u64,
    ) {
        let names: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.to_string())
            .collect();
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for name in names {
            let value = params.get_mut(&name).unwrap();
            let (m, v) = moments.entry(name.clone()).or_insert_with(|| {
                (Tensor::zeros(value.shape()), Tensor::zeros(value.shape()))
            });
            let zero;
            let grad = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(value.shape());
                    &zero
                }
            };
            for i in 0..value.data().len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let p = value.data()[i];
                value.data_mut()[i] = p - lr * self.weight_decay * p - lr * update;
            }
        }
    }
}

/// Trailing-window early-stop rule: fires once the mean of the last
/// [`STOP_WINDOW`] observed batch-mean scores reaches `desired`. A
/// desired value of −∞ disables the rule.
#[derive(Clone, Debug)]
pub struct StopRule {
    desired: f64,
    window: Vec<f64>,
}

impl StopRule {
    pub fn new(desired: f64) -> Self {
        Self { desired, window: Vec::new() }
    }

    /// Record one batch-mean score; true iff the full trailing window
    /// now averages at or above the desired score.
    pub fn should_stop(&mut self, batch_mean_q: f64) -> bool {
        self.window.push(batch_mean_q);
        if self.window.len() > STOP_WINDOW {
            self.window.remove(0);
        }
        if self.desired == f64::NEG_INFINITY || self.window.len() < STOP_WINDOW {
            return false;
        }
        let mean: f64 = self.window.iter().sum::<f64>() / self.window.len() as f64;
        mean >= self.desired
    }
}

/// One stage of the progressive pretraining schedule, active from
/// `start_epoch` until the next stage begins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleStage {
    pub start_epoch: usize,
    pub batch_size: usize,
    pub patch_size: usize,
}

/// The built-in progressive schedule scaled to an epoch budget:
/// batches shrink 8 → 4 → 2 while patches grow 64 → 96 → 128.
pub fn desk_schedule(epochs: usize) -> Vec<ScheduleStage> {
    vec![
        ScheduleStage { start_epoch: 0, batch_size: 8, patch_size: 64 },
        ScheduleStage { start_epoch: epochs / 2, batch_size: 4, patch_size: 96 },
        ScheduleStage { start_epoch: epochs * 3 / 4, batch_size: 2, patch_size: 128 },
    ]
}

/// Pretraining hyperparameters. One epoch draws one batch and applies
/// one optimizer step, so the epoch budget equals the step budget.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub eta_min: f64,
    pub schedule: Vec<ScheduleStage>,
    pub seed: u64,
    pub weight_decay: f64,
    /// Include the correlation term in the objective (ablation knob);
    /// the term is still logged either way.
    pub use_pearson: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 3e-4,
            eta_min: 0.0,
            schedule: desk_schedule(50),
            seed: 0,
            weight_decay: 1e-4,
            use_pearson: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(UieError::Config("epochs must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(UieError::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..=self.lr).contains(&self.eta_min) {
            return Err(UieError::Config(format!(
                "eta_min {} outside [0, lr]",
                self.eta_min
            )));
        }
        if self.schedule.is_empty() || self.schedule[0].start_epoch != 0 {
            return Err(UieError::Config(
                "schedule must be nonempty and cover epoch 0".into(),
            ));
        }
        for w in self.schedule.windows(2) {
            if w[1].start_epoch <= w[0].start_epoch {
                return Err(UieError::Config(
                    "schedule start epochs must strictly increase".into(),
                ));
            }
            if w[1].batch_size > w[0].batch_size {
                return Err(UieError::Config(
                    "schedule batch sizes must be non-increasing".into(),
                ));
            }
            if w[1].patch_size < w[0].patch_size {
                return Err(UieError::Config(
                    "schedule patch sizes must be non-decreasing".into(),
                ));
            }
        }
        if self.schedule.iter().any(|s| s.batch_size == 0 || s.patch_size == 0) {
            return Err(UieError::Config("schedule entries must be positive".into()));
        }
        Ok(())
    }

    /// The stage active during `epoch`.
    pub fn stage_for(&self, epoch: usize) -> ScheduleStage {
        *self
            .schedule
            .iter()
            .rev()
            .find(|s| s.start_epoch <= epoch)
            .expect("validated schedule covers epoch 0")
    }

    /// Flat key=value rendering stored in checkpoints.
    pub fn echo(&self) -> String {
        let schedule: Vec<String> = self
            .schedule
            .iter()
            .map(|s| format!("{}:{}:{}", s.start_epoch, s.batch_size, s.patch_size))
            .collect();
        format!(
            "mode=pretrain\nepochs={}\nlr={}\neta_min={}\nschedule={}\nseed={}\nweight_decay={}\npearson={}\n",
            self.epochs,
            self.lr,
            self.eta_min,
            schedule.join(","),
            self.seed,
            self.weight_decay,
            self.use_pearson
        )
    }
}

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub eta_min: f64,
    pub weights: LossWeights,
    /// Early-stop target for the trailing-window mean score; −∞
    /// disables early stopping.
    pub desired_q: f64,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 2,
            lr: 1e-5,
            eta_min: 0.0,
            weights: LossWeights::default(),
            desired_q: f64::NEG_INFINITY,
            seed: 0,
            weight_decay: 1e-4,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(UieError::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(UieError::Config("batch size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(UieError::Config(format!("bad learning rate {}", self.lr)));
        }
        if !(0.0..=self.lr).contains(&self.eta_min) {
            return Err(UieError::Config(format!(
                "eta_min {} outside [0, lr]",
                self.eta_min
            )));
        }
        self.weights.validate()?;
        if self.desired_q.is_nan() || self.desired_q == f64::INFINITY {
            return Err(UieError::Config(format!(
                "desired score {} must be finite or -inf",
                self.desired_q
            )));
        }
        Ok(())
    }

    pub fn echo(&self) -> String {
        format!(
            "mode=finetune\nsteps={}\nbatch_size={}\nlr={}\neta_min={}\nlambda1={}\nlambda2={}\nlambda3={}\ndesired_q={}\nseed={}\nweight_decay={}\n",
            self.steps,
            self.batch_size,
            self.lr,
            self.eta_min,
            self.weights.lambda1,
            self.weights.lambda2,
            self.weights.lambda3,
            self.desired_q,
            self.seed,
            self.weight_decay
        )
    }
}

/// A fine-tuning sample: the raw input, its generated pseudo label,
/// and the reference score assigned to that label at generation time.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub input: Image,
    pub pseudo_label: Image,
    pub q_reference: f64,
    pub source: SourceTag,
}

/// Content digest of a generated dataset, for determinism checks.
pub fn records_digest(records: &[SampleRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        for &v in r.input.pixels() {
            h.update(v.to_le_bytes());
        }
        for &v in r.pseudo_label.pixels() {
            h.update(v.to_le_bytes());
        }
        h.update(r.q_reference.to_le_bytes());
        h.update([matches!(r.source, SourceTag::Reference) as u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One pretraining epoch in the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub pixel: f64,
    pub pearson: f64,
    pub total: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: f64,
}

/// One fine-tuning step in the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub pixel: f64,
    pub perceptual: f64,
    /// Batch-mean score gap q_pred − q_ref; exactly 0.0 when the score
    /// weight is zero and the scorer is skipped.
    pub score: f64,
    pub total: f64,
    /// Batch-mean predicted score; 0.0 when the scorer is skipped.
    pub mean_q: f64,
    pub lr: f64,
}

impl StepLog {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            pixel: self.pixel,
            perceptual: self.perceptual,
            score: self.score,
            total: self.total,
        }
    }
}

/// Write the pretraining log as CSV (epoch,pixel,pearson,total,batch,patch,lr).
pub fn write_pretrain_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| UieError::io(path, e))?;
    let mut out = String::from("epoch,pixel,pearson,total,batch,patch,lr\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.pixel, r.pearson, r.total, r.batch_size, r.patch_size, r.lr
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| UieError::io(path, e))
}

/// Write the fine-tuning log as CSV (step,pixel,perceptual,score,total,mean_q,lr).
pub fn write_finetune_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| UieError::io(path, e))?;
    let mut out = String::from("step,pixel,perceptual,score,total,mean_q,lr\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.pixel, r.perceptual, r.score, r.total, r.mean_q, r.lr
        ));
    }
    f.write_all(out.as_bytes()).map_err(|e| UieError::io(path, e))
}

/// Result of a pretraining run: the final state plus the epochs this
/// call actually executed.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Result of a fine-tuning run.
#[derive(Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    /// Whether the stop rule ended the run before the step budget.
    pub stopped_early: bool,
}

struct PretrainGraph {
    program: Program,
    input: NodeId,
    target: NodeId,
    param_nodes: BTreeMap<String, NodeId>,
    pixel: NodeId,
    pearson: NodeId,
    total: NodeId,
}

fn compile_pretrain_graph(
    net: &NetworkConfig,
    patch: usize,
    use_pearson: bool,
) -> Result<PretrainGraph> {
    let open = open_network(net, patch, patch)?;
    let mut gb = open.gb;
    let target = gb.feed(&[patch, patch, 3]);
    let pixel = build_pixel_loss(&mut gb, open.output, target);
    let pearson = build_pearson_loss(&mut gb, open.output, target);
    let total = if use_pearson { gb.add(pixel, pearson) } else { pixel };
    Ok(PretrainGraph {
        program: gb.finish(),
        input: open.input,
        target,
        param_nodes: open.param_nodes,
        pixel,
        pearson,
        total,
    })
}

fn bind_params(
    program: &Program,
    param_nodes: &BTreeMap<String, NodeId>,
    params: &ParameterStore,
) -> Result<BTreeMap<NodeId, Tensor>> {
    let mut feeds = BTreeMap::new();
    for (name, &node) in param_nodes {
        let t = params
            .get(name)
            .ok_or_else(|| UieError::Config(format!("parameter store is missing {name}")))?;
        if t.shape() != program.shape(node) {
            return Err(UieError::Config(format!(
                "parameter {name}: stored shape {:?} vs expected {:?}",
                t.shape(),
                program.shape(node)
            )));
        }
        feeds.insert(node, t.clone());
    }
    Ok(feeds)
}

fn grads_by_name(
    raw: &BTreeMap<NodeId, Tensor>,
    param_nodes: &BTreeMap<String, NodeId>,
) -> BTreeMap<String, Tensor> {
    param_nodes
        .iter()
        .filter_map(|(name, node)| raw.get(node).map(|g| (name.clone(), g.clone())))
        .collect()
}

fn accumulate(into: &mut BTreeMap<String, Tensor>, delta: &BTreeMap<String, Tensor>) {
    for (name, g) in delta {
        match into.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
}

fn scale_grads(grads: &mut BTreeMap<String, Tensor>, k: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= k;
        }
    }
}

/// Batch indices for one step: a seeded permutation prefix, so a batch
/// never repeats a sample unless the batch outsizes the dataset (then
/// the permutation cycles).
fn batch_indices(rng: &mut impl Rng, len: usize, batch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    (0..batch).map(|b| order[b % len]).collect()
}

/// Pretrain from a fresh seeded initialization.
pub fn pretrain(
    pairs: &[ImagePair],
    net: &NetworkConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    pretrain_span(pairs, net, cfg, None, None)
}

/// Pretrain, optionally continuing from a saved checkpoint; the run
/// picks up at the checkpoint's step counter and reproduces the
/// uninterrupted trajectory.
pub fn pretrain_resume(
    pairs: &[ImagePair],
    net: &NetworkConfig,
    cfg: &PretrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    pretrain_span(pairs, net, cfg, resume, None)
}

/// Pretrain over part of the epoch budget. The learning-rate and
/// progressive schedules still span the full budget, so interrupting
/// at `until` and resuming later reproduces the uninterrupted run.
pub fn pretrain_span(
    pairs: &[ImagePair],
    net: &NetworkConfig,
    cfg: &PretrainConfig,
    resume: Option<&Checkpoint>,
    until: Option<usize>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    if pairs.is_empty() {
        return Err(UieError::Config("pretraining needs at least one pair".into()));
    }
    let align = net.alignment();
    for stage in &cfg.schedule {
        if stage.patch_size % align != 0 {
            return Err(UieError::Alignment(format!(
                "patch size {} must divide by the network alignment {align}",
                stage.patch_size
            )));
        }
    }
    let end = until.unwrap_or(cfg.epochs);
    if end > cfg.epochs {
        return Err(UieError::Range(format!(
            "partial-run bound {end} exceeds the epoch budget {}",
            cfg.epochs
        )));
    }
    let (mut params, mut moments, start) = match resume {
        Some(ck) => (ck.params.clone(), ck.moments.clone(), ck.step as usize),
        None => (init_network(net, cfg.seed)?, BTreeMap::new(), 0),
    };
    let optimizer = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
    let mut graphs: BTreeMap<usize, PretrainGraph> = BTreeMap::new();
    let mut log = Vec::new();

    for epoch in start..end {
        let stage = cfg.stage_for(epoch);
        if !graphs.contains_key(&stage.patch_size) {
            graphs.insert(
                stage.patch_size,
                compile_pretrain_graph(net, stage.patch_size, cfg.use_pearson)?,
            );
        }
        let g = &graphs[&stage.patch_size];
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.eta_min)?;
        let mut feeds = bind_params(&g.program, &g.param_nodes, &params)?;
        let wrt: Vec<NodeId> = g.param_nodes.values().copied().collect();

        let mut rng = stream_rng(cfg.seed, "pretrain.epoch", epoch as u64);
        let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut pixel_sum = 0.0;
        let mut pearson_sum = 0.0;
        let mut total_sum = 0.0;
        for pair_idx in batch_indices(&mut rng, pairs.len(), stage.batch_size) {
            let pair = &pairs[pair_idx];
            let patch_seed: u64 = rng.gen();
            let (fh, fv) = (rng.gen::<bool>(), rng.gen::<bool>());
            let patch = extract_patch(pair, stage.patch_size, align, patch_seed)?;
            let patch = augment_flip(&patch, fh, fv);
            feeds.insert(g.input, patch.input.to_tensor());
            feeds.insert(g.target, patch.target.to_tensor());
            let exec = g.program.forward(&feeds);
            let total = exec.value(g.total).item();
            if !total.is_finite() {
                return Err(UieError::Training {
                    step: epoch,
                    message: format!("non-finite pretraining loss {total}"),
                });
            }
            pixel_sum += exec.value(g.pixel).item();
            pearson_sum += exec.value(g.pearson).item();
            total_sum += total;
            let raw = g.program.backward(&exec, g.total, &wrt);
            accumulate(&mut grad_sum, &grads_by_name(&raw, &g.param_nodes));
        }
        let b = stage.batch_size as f64;
        scale_grads(&mut grad_sum, 1.0 / b);
        optimizer.step(&mut params, &mut moments, &grad_sum, lr, epoch as u64 + 1);
        log.push(EpochLog {
            epoch,
            pixel: pixel_sum / b,
            pearson: pearson_sum / b,
            total: total_sum / b,
            batch_size: stage.batch_size,
            patch_size: stage.patch_size,
            lr,
        });
    }

    let mut checkpoint = Checkpoint::new(params, &cfg.echo());
    checkpoint.step = end as u64;
    checkpoint.moments = moments;
    Ok(PretrainOutcome { checkpoint, log })
}

/// Run the restored network over raw inputs, producing pseudo labels
/// and their frozen reference scores.
pub fn generate_pseudo_labels(
    inputs: &[(Image, SourceTag)],
    ckpt: &Checkpoint,
    net: &NetworkConfig,
    scorer: &dyn QualityScorer,
) -> Result<Vec<SampleRecord>> {
    inputs
        .iter()
        .map(|(img, source)| {
            let pseudo_label = forward_enhance(img, &ckpt.params, net)?;
            let q_reference = scorer.score(&pseudo_label)?;
            Ok(SampleRecord {
                input: img.clone(),
                pseudo_label,
                q_reference,
                source: *source,
            })
        })
        .collect()
}

struct FinetuneGraph {
    program: Program,
    input: NodeId,
    pseudo: NodeId,
    q_ref: NodeId,
    param_nodes: BTreeMap<String, NodeId>,
    pixel: NodeId,
    perceptual: NodeId,
    /// Predicted-score node; absent when the score weight is zero.
    q_pred: Option<NodeId>,
    total: NodeId,
}

/// Assemble network + objective. The scorer enters the graph through
/// frozen constants, so no gradient can ever reach its parameters.
fn compile_finetune_graph(
    net: &NetworkConfig,
    h: usize,
    w: usize,
    scorer: &dyn QualityScorer,
    extractor: &dyn FeatureExtractor,
    weights: &LossWeights,
) -> Result<FinetuneGraph> {
    let open = open_network(net, h, w)?;
    let mut gb = open.gb;
    let pseudo = gb.feed(&[h, w, 3]);
    let q_ref = gb.feed(&[1]);
    let pixel = build_pixel_loss(&mut gb, open.output, pseudo);
    let perceptual = build_perceptual_loss(&mut gb, open.output, pseudo, extractor);
    let wpix = gb.mul_const(pixel, weights.lambda1);
    let wperc = gb.mul_const(perceptual, weights.lambda2);
    let mut total = gb.add(wpix, wperc);
    let q_pred = if weights.lambda3 > 0.0 {
        let q = scorer
            .build_score(&mut gb, open.output)
            .ok_or_else(|| UieError::Capability("scorer offered no graph form".into()))?;
        let gap = gb.sub(q, q_ref);
        let neg = gb.mul_const(gap, -weights.lambda3);
        total = gb.add(total, neg);
        Some(q)
    } else {
        None
    };
    Ok(FinetuneGraph {
        program: gb.finish(),
        input: open.input,
        pseudo,
        q_ref,
        param_nodes: open.param_nodes,
        pixel,
        perceptual,
        q_pred,
        total,
    })
}

/// Fine-tune the restored network on pseudo-labeled records under a
/// frozen scorer. Resumes from the checkpoint's step counter when the
/// checkpoint came from fine-tuning; per-step logs cover only the
/// steps this call executed.
pub fn finetune(
    records: &[SampleRecord],
    ckpt: &Checkpoint,
    scorer: &dyn QualityScorer,
    extractor: &dyn FeatureExtractor,
    net: &NetworkConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    finetune_span(records, ckpt, scorer, extractor, net, cfg, None)
}

/// Fine-tune over part of the step budget. The cosine schedule still
/// spans the full budget, so interrupting at `until` and resuming
/// later reproduces the uninterrupted run.
pub fn finetune_span(
    records: &[SampleRecord],
    ckpt: &Checkpoint,
    scorer: &dyn QualityScorer,
    extractor: &dyn FeatureExtractor,
    net: &NetworkConfig,
    cfg: &FinetuneConfig,
    until: Option<usize>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    net.validate()?;
    if records.is_empty() {
        return Err(UieError::Config("fine-tuning needs at least one record".into()));
    }
    if cfg.weights.lambda3 > 0.0 && !scorer.is_differentiable() {
        return Err(UieError::Capability(format!(
            "scorer '{}' offers no gradients; use lambda3 = 0 or a differentiable scorer",
            scorer.tag()
        )));
    }
    let (h, w) = (records[0].input.height(), records[0].input.width());
    for (i, r) in records.iter().enumerate() {
        if r.input.height() != h || r.input.width() != w || !r.input.same_shape(&r.pseudo_label) {
            return Err(UieError::Shape(format!(
                "record {i} shape differs from {h}x{w}"
            )));
        }
    }
    let scorer_digest_before = scorer.parameters().digest();
    let g = compile_finetune_graph(net, h, w, scorer, extractor, &cfg.weights)?;
    let mut params = ckpt.params.clone();
    // The step counter only carries over when resuming a fine-tuning
    // run; a pretraining checkpoint starts this stage from step 0.
    let resuming = ckpt.config_echo.starts_with("mode=finetune");
    let mut moments = if resuming { ckpt.moments.clone() } else { BTreeMap::new() };
    let start = if resuming { ckpt.step as usize } else { 0 };
    let end = until.unwrap_or(cfg.steps);
    if end > cfg.steps {
        return Err(UieError::Range(format!(
            "partial-run bound {end} exceeds the step budget {}",
            cfg.steps
        )));
    }
    let optimizer = AdamW { weight_decay: cfg.weight_decay, ..AdamW::default() };
    let wrt: Vec<NodeId> = g.param_nodes.values().copied().collect();
    let mut rule = StopRule::new(cfg.desired_q);
    let mut log = Vec::new();
    let mut stopped_early = false;

    for step in start..end {
        let lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.eta_min)?;
        let mut feeds = bind_params(&g.program, &g.param_nodes, &params)?;
        let mut rng = stream_rng(cfg.seed, "finetune.step", step as u64);
        let mut grad_sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut sums = [0.0f64; 4]; // pixel, perceptual, score-gap, total
        let mut q_sum = 0.0;
        for record_idx in batch_indices(&mut rng, records.len(), cfg.batch_size) {
            let record = &records[record_idx];
            feeds.insert(g.input, record.input.to_tensor());
            feeds.insert(g.pseudo, record.pseudo_label.to_tensor());
            feeds.insert(g.q_ref, Tensor::scalar(record.q_reference));
            let exec = g.program.forward(&feeds);
            let total = exec.value(g.total).item();
            if !total.is_finite() {
                return Err(UieError::Training {
                    step,
                    message: format!("non-finite fine-tuning loss {total}"),
                });
            }
            sums[0] += exec.value(g.pixel).item();
            sums[1] += exec.value(g.perceptual).item();
            if let Some(q) = g.q_pred {
                let qv = exec.value(q).item();
                sums[2] += qv - record.q_reference;
                q_sum += qv;
            }
            sums[3] += total;
            let raw = g.program.backward(&exec, g.total, &wrt);
            accumulate(&mut grad_sum, &grads_by_name(&raw, &g.param_nodes));
        }
        let b = cfg.batch_size as f64;
        scale_grads(&mut grad_sum, 1.0 / b);
        optimizer.step(&mut params, &mut moments, &grad_sum, lr, step as u64 + 1);
        let mean_q = if g.q_pred.is_some() { q_sum / b } else { 0.0 };
        log.push(StepLog {
            step,
            pixel: sums[0] / b,
            perceptual: sums[1] / b,
            score: if g.q_pred.is_some() { sums[2] / b } else { 0.0 },
            total: sums[3] / b,
            mean_q,
            lr,
        });
        if g.q_pred.is_some() && rule.should_stop(mean_q) {
            stopped_early = true;
            break;
        }
    }

    assert_eq!(
        scorer.parameters().digest(),
        scorer_digest_before,
        "frozen-scorer contract violated"
    );
    let mut checkpoint = Checkpoint::new(params, &cfg.echo());
    checkpoint.step = start as u64 + log.len() as u64;
    checkpoint.moments = moments;
    Ok(FinetuneOutcome { checkpoint, log, stopped_early })
}
