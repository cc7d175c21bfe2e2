use std::fmt::{self, Write as _};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    D,
    S,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::D => "D",
            Phase::S => "S",
        })
    }
}

/// One optimizer step. `step` is the index of the minimax round the update
/// belongs to, so the D rows of a round share the S row's step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub phase: Phase,
    pub loss_name: &'static str,
    pub loss_value: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_s: f64,
    pub selection_dice: f64,
    /// Steps whose update was skipped because of a non-finite loss or
    /// gradient.
    pub skipped_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const TRAINLOG_HEADER: &str = "epoch,step,phase,loss_name,loss_value,lr";

impl TrainLog {
    pub fn count(&self, phase: Phase) -> usize {
        self.steps.iter().filter(|s| s.phase == phase).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAINLOG_HEADER);
        out.push('\n');
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.epoch, s.step, s.phase, s.loss_name, s.loss_value, s.lr
            );
        }
        out
    }

    pub fn selection_csv(&self) -> String {
        let mut out = String::from("epoch,lr_s,selection_dice,skipped_steps\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.lr_s, e.selection_dice, e.skipped_steps);
        }
        out
    }
}
