use std::collections::BTreeSet;

use crate::autodiff::{Tape, Var};
use crate::data::{AugmentSpec, Batch, BatchSampler, PhantomSample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, mean_dice};
use crate::losses::{adversarial_seg_loss, discriminator_loss, hybrid_seg_loss, mce_loss};
use crate::models::{Checkpoint, CheckpointMeta, Discriminator, RngState, Segmentor};
use crate::seeding::rng_for;
use crate::trainer::adam::{adam_step, clip_grad_norm, AdamState};
use crate::trainer::config::{lr_at, Scheme, TrainConfig};
use crate::trainer::log::{EpochRecord, Phase, StepRecord, TrainLog};

/// Consecutive non-finite steps tolerated before training is abandoned.
pub const MAX_NONFINITE_STREAK: usize = 3;

/// Both networks with their optimizer states and the running log.
pub struct Trainer {
    pub seg: Segmentor,
    pub disc: Option<Discriminator>,
    pub adam_s: AdamState,
    pub adam_d: Option<AdamState>,
    pub log: TrainLog,
    cfg: TrainConfig,
    round: u64,
    streak: usize,
    skipped: usize,
}

fn collect_grads(tape: &Tape<f32>, vars: &[Var]) -> Vec<Option<Vec<f32>>> {
    vars.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect()
}

fn finite(tape: &Tape<f32>, vars: &[Var]) -> bool {
    vars.iter().all(|&v| tape.value(v).all_finite())
}

impl Trainer {
    pub fn new(seg: Segmentor, disc: Option<Discriminator>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let disc = if cfg.scheme.uses_discriminator() {
            Some(disc.ok_or_else(|| {
                Error::Contract(format!("scheme {} needs a discriminator", cfg.scheme))
            })?)
        } else {
            None
        };
        Ok(Trainer {
            adam_s: AdamState::new(seg.params()),
            adam_d: disc.as_ref().map(|d| AdamState::new(d.params())),
            seg,
            disc,
            log: TrainLog::default(),
            cfg: cfg.clone(),
            round: 0,
            streak: 0,
            skipped: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed minimax rounds.
    pub fn rounds(&self) -> u64 {
        self.round
    }

    fn settle(&mut self, record: StepRecord, outcome: Result<(), String>) -> Result<()> {
        let (phase, epoch, step) = (record.phase, record.epoch, record.step);
        self.log.steps.push(record);
        match outcome {
            Ok(()) => {
                self.streak = 0;
                Ok(())
            }
            Err(why) => {
                self.streak += 1;
                self.skipped += 1;
                if self.streak >= MAX_NONFINITE_STREAK {
                    return Err(Error::Divergence(format!(
                        "{} consecutive non-finite steps, last was the {phase} update of round {step} \
                         in epoch {epoch}: {why}",
                        self.streak
                    )));
                }
                Ok(())
            }
        }
    }

    fn apply(&mut self, phase: Phase, mut grads: Vec<Option<Vec<f32>>>, lr: f64) -> Result<(), String> {
        if let Some(c) = self.cfg.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let res = match phase {
            Phase::S => adam_step(self.seg.params_mut(), &grads, &mut self.adam_s, lr),
            Phase::D => adam_step(
                self.disc.as_mut().expect("checked in new").params_mut(),
                &grads,
                self.adam_d.as_mut().expect("checked in new"),
                lr,
            ),
        };
        res.map_err(|e| e.to_string())
    }

    /// One discriminator update on `batch` with the segmentor frozen.
    pub fn d_step(&mut self, batch: &Batch, epoch: usize) -> Result<()> {
        let disc = self
            .disc
            .as_ref()
            .ok_or_else(|| Error::Contract("no discriminator to update".into()))?;
        let fake = self.seg.predict(&batch.images)?;
        let mut tape = Tape::<f32>::new();
        let pd = disc.bind(&mut tape, true);
        let x = tape.constant(batch.images.clone());
        let real = tape.constant(batch.labels.clone());
        let fake = tape.constant(fake);
        let d_real = disc.forward(&mut tape, &pd, real, x)?;
        let d_fake = disc.forward(&mut tape, &pd, fake, x)?;
        let (value, grads) = if finite(&tape, &[fake, d_real, d_fake]) {
            let loss = discriminator_loss(&mut tape, d_real, d_fake)?;
            if loss.value.is_finite() {
                tape.backward(loss.var)?;
            }
            (loss.value, collect_grads(&tape, &pd))
        } else {
            (f64::NAN, Vec::new())
        };
        drop(tape);
        let lr = self.cfg.lr_d;
        let outcome = if value.is_finite() {
            self.apply(Phase::D, grads, lr)
        } else {
            Err(format!("discriminator loss {value}"))
        };
        let rec = StepRecord {
            epoch,
            step: self.round,
            phase: Phase::D,
            loss_name: "d_loss",
            loss_value: value,
            lr,
        };
        self.settle(rec, outcome)
    }

    /// One segmentor update on `batch` with the discriminator frozen.
    pub fn s_step(&mut self, batch: &Batch, epoch: usize, lr: f64) -> Result<()> {
        let scheme = self.cfg.scheme;
        let mut tape = Tape::<f32>::new();
        let ps = self.seg.bind(&mut tape, true);
        let x = tape.constant(batch.images.clone());
        let y = tape.constant(batch.labels.clone());
        let probs = self.seg.forward(&mut tape, &ps, x)?;
        let mut outputs = vec![probs];
        let d_fake = match (&self.disc, scheme) {
            (Some(disc), Scheme::Adversarial | Scheme::Hybrid) => {
                let pd = disc.bind(&mut tape, false);
                let d = disc.forward(&mut tape, &pd, probs, x)?;
                outputs.push(d);
                Some(d)
            }
            _ => None,
        };
        let (value, grads) = if finite(&tape, &outputs) {
            let loss = match (scheme, d_fake) {
                (Scheme::Mce, _) => mce_loss(&mut tape, probs, y)?,
                (Scheme::Adversarial, Some(d)) => adversarial_seg_loss(&mut tape, d)?,
                (Scheme::Hybrid, Some(d)) => {
                    hybrid_seg_loss(&mut tape, probs, y, d, self.cfg.hybrid_mce_weight)?
                }
                _ => unreachable!("discriminator presence checked in new"),
            };
            if loss.value.is_finite() {
                tape.backward(loss.var)?;
            }
            (loss.value, collect_grads(&tape, &ps))
        } else {
            (f64::NAN, Vec::new())
        };
        drop(tape);
        let outcome = if value.is_finite() {
            self.apply(Phase::S, grads, lr)
        } else {
            Err(format!("segmentor loss {value}"))
        };
        let rec = StepRecord {
            epoch,
            step: self.round,
            phase: Phase::S,
            loss_name: scheme.name(),
            loss_value: value,
            lr,
        };
        self.settle(rec, outcome)
    }
}

/// `k` discriminator updates on fresh batches from `d_batches`, then one
/// segmentor update on a fresh batch from `s_batches`. With the
/// cross-entropy scheme only the segmentor update happens.
///
/// The two samplers are separate streams so the segmentor sees the same
/// batch sequence whichever scheme is trained.
pub fn minimax_round(
    tr: &mut Trainer,
    s_batches: &mut BatchSampler,
    d_batches: &mut BatchSampler,
    epoch: usize,
) -> Result<()> {
    if tr.cfg.scheme.uses_discriminator() {
        for _ in 0..tr.cfg.k {
            let b = d_batches.sample_batch()?;
            tr.d_step(&b, epoch)?;
        }
    }
    let lr = lr_at(epoch, &tr.cfg)?;
    let b = s_batches.sample_batch()?;
    tr.s_step(&b, epoch, lr)?;
    tr.round += 1;
    Ok(())
}

/// Training pools plus the clean model-selection slices.
pub struct TrainingData<'a> {
    pub pos: Vec<&'a PhantomSample>,
    pub neg: Vec<&'a PhantomSample>,
    pub selection: Vec<&'a PhantomSample>,
}

impl TrainingData<'_> {
    fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<u32> = self.pos.iter().chain(&self.neg).map(|s| s.subject_id).collect();
        if let Some(s) = self.selection.iter().find(|s| train.contains(&s.subject_id)) {
            return Err(Error::Contract(format!(
                "subject {} is in both the training pool and the selection set",
                s.subject_id
            )));
        }
        if self.selection.is_empty() {
            return Err(Error::Contract("selection set is empty".into()));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the highest selection dice.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_selection_dice: f64,
    pub log: TrainLog,
}

/// Train for `cfg.epochs` epochs of `cfg.batches_per_epoch` rounds,
/// evaluating mean tumor dice on the selection slices after every epoch and
/// keeping the best checkpoint (earliest epoch on ties).
pub fn run_training(
    seg: Segmentor,
    disc: Option<Discriminator>,
    data: &TrainingData,
    cfg: &TrainConfig,
    augment: &AugmentSpec,
) -> Result<TrainOutcome> {
    run_training_observed(seg, disc, data, cfg, augment, &mut |_| {})
}

pub fn run_training_observed(
    seg: Segmentor,
    disc: Option<Discriminator>,
    data: &TrainingData,
    cfg: &TrainConfig,
    augment: &AugmentSpec,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    data.check_disjoint()?;
    let aug = cfg.augment.then(|| augment.clone());
    let sampler = |tag: u64| {
        BatchSampler::new(
            data.pos.clone(),
            data.neg.clone(),
            cfg.batch_size,
            cfg.p_pos,
            aug.clone(),
            rng_for(cfg.seed, &[tag]),
        )
    };
    let mut s_batches = sampler(0x5E6)?;
    let mut d_batches = sampler(0xD15C)?;
    let mut tr = Trainer::new(seg, disc, cfg)?;
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let skipped_before = tr.skipped;
        for _ in 0..cfg.batches_per_epoch {
            minimax_round(&mut tr, &mut s_batches, &mut d_batches, epoch)?;
        }
        let score = mean_dice(&evaluate(&tr.seg, &data.selection)?);
        let rec = EpochRecord {
            epoch,
            lr_s: lr_at(epoch, cfg)?,
            selection_dice: score,
            skipped_steps: tr.skipped - skipped_before,
        };
        observer(&rec);
        tr.log.epochs.push(rec);
        if best.as_ref().is_none_or(|b| score > b.1) {
            let mut meta = CheckpointMeta::new(tr.seg.config().clone());
            meta.step = tr.round;
            meta.epoch = Some(epoch);
            meta.scheme = Some(cfg.scheme.name().to_string());
            meta.rng = Some(RngState::capture(s_batches.rng()));
            best = Some((epoch, score, Checkpoint::from_models(&tr.seg, tr.disc.as_ref(), meta)));
        }
    }
    let (best_epoch, best_selection_dice, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_selection_dice,
        log: tr.log,
    })
}
