use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Teacher,
    Distill,
    Finetune,
}

impl Stage {
    pub fn code(self) -> u8 {
        match self {
            Stage::Teacher => 0,
            Stage::Distill => 1,
            Stage::Finetune => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Stage::Teacher),
            1 => Ok(Stage::Distill),
            2 => Ok(Stage::Finetune),
            c => Err(Error::Checkpoint(format!("unknown stage code {c}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Teacher => "teacher",
            Stage::Distill => "distill",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Stage::Teacher),
            "distill" => Ok(Stage::Distill),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    Distortion,
    Rate,
    KnowledgeDistillation,
}

/// Iteration budget, piecewise-constant learning rate and enabled loss terms
/// of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub total_iterations: u64,
    /// `(first iteration, learning rate)`, ascending, starting at 0.
    pub lr_schedule: Vec<(u64, f64)>,
    pub loss_terms: BTreeSet<LossTerm>,
}

impl StagePlan {
    /// Learning rate in effect at `iter`.
    pub fn lr_at(&self, iter: u64) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|(start, _)| *start <= iter)
            .last()
            .map(|&(_, lr)| lr)
            .unwrap_or(self.lr_schedule[0].1)
    }

    pub fn uses(&self, term: LossTerm) -> bool {
        self.loss_terms.contains(&term)
    }

    /// Iteration counts and drop points multiplied by `factor` (rounded).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Config(format!("scale factor must be positive, got {factor}")));
        }
        let sc = |it: u64| (it as f64 * factor).round() as u64;
        Ok(Self {
            stage: self.stage,
            total_iterations: sc(self.total_iterations).max(1),
            lr_schedule: self.lr_schedule.iter().map(|&(it, lr)| (sc(it), lr)).collect(),
            loss_terms: self.loss_terms.clone(),
        })
    }

    /// The same plan with the distillation term removed (direct training).
    pub fn without_distillation(&self) -> Self {
        let mut plan = self.clone();
        plan.loss_terms.remove(&LossTerm::KnowledgeDistillation);
        plan
    }
}

/// Full-scale plan of a stage.
pub fn stage_plan(stage: Stage) -> StagePlan {
    let rd: BTreeSet<LossTerm> = [LossTerm::Distortion, LossTerm::Rate].into_iter().collect();
    match stage {
        Stage::Teacher | Stage::Distill => {
            let mut loss_terms = rd;
            if stage == Stage::Distill {
                loss_terms.insert(LossTerm::KnowledgeDistillation);
            }
            StagePlan {
                stage,
                total_iterations: 180_000,
                lr_schedule: vec![(0, 1e-4), (130_000, 1e-5), (160_000, 1e-6)],
                loss_terms,
            }
        }
        // Continues from the final distillation rate.
        Stage::Finetune => StagePlan {
            stage,
            total_iterations: 150_000,
            lr_schedule: vec![(0, 1e-6), (50_000, 1e-7), (100_000, 1e-8)],
            loss_terms: rd,
        },
    }
}
