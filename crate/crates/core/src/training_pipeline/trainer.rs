//! Stage execution: teacher training, distillation, fine-tuning.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::codec_networks::{pad_image, ImageBuffer, Role};
use crate::entropy_engine::{channel_means, rate_bits, ChannelEntropyRanking, Noise, QuantMode};
use crate::error::{Error, Result};
use crate::feds_distillation::{
    distortion, stage_plan, student_total_loss, teacher_loss, DistillationBatchOutputs, FEDSWeights, LossBreakdown,
    LossTerm, Stage, StagePlan, StudentOutputs, TeacherOutputs,
};
use crate::model::CodecModel;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::dataset::PatchStream;

/// Learning rate the stage schedules are written against.
const REFERENCE_LR: f64 = 1e-4;

const DATA_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG that drives the patch stream of a run with this seed.
pub fn data_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, DATA_STREAM)
}

/// A frozen teacher and the checksum of its weights when it was loaded.
struct FrozenTeacher<T> {
    model: CodecModel<T>,
    checksum: u64,
}

pub struct Trainer<T> {
    config: TrainConfig,
    plan: StagePlan,
    model: CodecModel<T>,
    teacher: Option<FrozenTeacher<T>>,
    optimizer: Adam<T>,
    iteration: u64,
    data: PatchStream,
    noise_rng: ChaCha8Rng,
    history: Vec<LossBreakdown>,
    log: Option<Box<dyn Write>>,
    checkpoint_path: Option<PathBuf>,
}

fn require_completed<T: Scalar>(ck: &Checkpoint<T>, stage: Stage, needed_by: Stage) -> Result<()> {
    if ck.stage != stage || !ck.completed {
        return Err(Error::StageOrder(format!(
            "{needed_by} needs a completed {stage} checkpoint, got {} at iteration {}{}",
            ck.stage,
            ck.iteration,
            if ck.completed { "" } else { " (incomplete)" }
        )));
    }
    Ok(())
}

impl<T: Scalar> Trainer<T> {
    fn build(
        config: TrainConfig,
        plan: StagePlan,
        model: CodecModel<T>,
        teacher: Option<CodecModel<T>>,
        mut data: PatchStream,
    ) -> Result<Self> {
        config.validate()?;
        data.set_rng(data_rng(config.seed));
        let optimizer = Adam::new(&model.params);
        let noise_rng = stream_rng(config.seed, NOISE_STREAM);
        let plan = plan.scaled(config.scale)?;
        Ok(Self {
            teacher: teacher.map(|model| FrozenTeacher {
                checksum: model.params.checksum(),
                model,
            }),
            config,
            plan,
            model,
            optimizer,
            iteration: 0,
            data,
            noise_rng,
            history: Vec::new(),
            log: None,
            checkpoint_path: None,
        })
    }

    /// Stage 1: train a teacher from the seed-determined initialization.
    pub fn teacher_stage(config: TrainConfig, data: PatchStream) -> Result<Self> {
        if config.network.role != Role::Teacher {
            return Err(Error::Config("the teacher stage needs a teacher network config".into()));
        }
        let model = CodecModel::new(config.network.clone(), config.seed)?;
        Self::build(config, stage_plan(Stage::Teacher), model, None, data)
    }

    /// Stage 2: train a fresh student against a completed, frozen teacher.
    pub fn distill_stage(config: TrainConfig, teacher: &Checkpoint<T>, data: PatchStream) -> Result<Self> {
        require_completed(teacher, Stage::Teacher, Stage::Distill)?;
        if config.network.role != Role::Student {
            return Err(Error::Config("the distillation stage needs a student network config".into()));
        }
        let teacher_model = teacher.model(None)?;
        let model = CodecModel::new(config.network.clone(), config.seed)?;
        Self::build(config, stage_plan(Stage::Distill), model, Some(teacher_model), data)
    }

    /// Stage-2 budget and schedule without the distillation terms and
    /// without a teacher: the direct-training baseline.
    pub fn direct_stage(config: TrainConfig, data: PatchStream) -> Result<Self> {
        let model = CodecModel::new(config.network.clone(), config.seed)?;
        let plan = stage_plan(Stage::Distill).without_distillation();
        Self::build(config, plan, model, None, data)
    }

    /// Stage 3: continue the student alone from a completed stage-2 checkpoint.
    pub fn finetune_stage(config: TrainConfig, student: &Checkpoint<T>, data: PatchStream) -> Result<Self> {
        require_completed(student, Stage::Distill, Stage::Finetune)?;
        let model = student.model(Some(&config.network))?;
        Self::build(config, stage_plan(Stage::Finetune), model, None, data)
    }

    /// Continue an interrupted stage. A distillation checkpoint needs its teacher.
    pub fn resume(ckpt: &Checkpoint<T>, teacher: Option<&Checkpoint<T>>, data: PatchStream) -> Result<Self> {
        if ckpt.completed {
            return Err(Error::StageOrder(format!("{} checkpoint is already complete", ckpt.stage)));
        }
        let model = ckpt.model(None)?;
        let uses_kd = ckpt.distillation;
        let plan = if ckpt.stage == Stage::Distill && !uses_kd {
            stage_plan(Stage::Distill).without_distillation()
        } else {
            stage_plan(ckpt.stage)
        };
        let teacher_model = if uses_kd {
            let t = teacher.ok_or_else(|| Error::StageOrder("resuming distillation needs the teacher checkpoint".into()))?;
            require_completed(t, Stage::Teacher, Stage::Distill)?;
            Some(t.model(None)?)
        } else {
            None
        };
        let mut trainer = Self::build(ckpt.config.clone(), plan, model, teacher_model, data)?;
        trainer.iteration = ckpt.iteration;
        if let Some(opt) = &ckpt.optimizer {
            trainer.optimizer = opt.clone();
        }
        let state = |name: &str| {
            ckpt.rngs
                .get(name)
                .map(RngState::restore)
                .ok_or_else(|| Error::Checkpoint(format!("missing rng state `{name}`")))
        };
        trainer.data.set_rng(state("data")?);
        trainer.noise_rng = state("noise")?;
        Ok(trainer)
    }

    /// JSON-lines sink for per-step logs.
    pub fn with_log(mut self, sink: Box<dyn Write>) -> Self {
        self.log = Some(sink);
        self
    }

    /// Where periodic and final checkpoints are written.
    pub fn with_checkpoint_path(mut self, path: PathBuf) -> Self {
        self.checkpoint_path = Some(path);
        self
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn model(&self) -> &CodecModel<T> {
        &self.model
    }

    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.plan.total_iterations
    }

    fn uses_kd(&self) -> bool {
        self.plan.uses(LossTerm::KnowledgeDistillation)
    }

    /// Learning rate of the next step.
    pub fn current_lr(&self) -> f64 {
        self.plan.lr_at(self.iteration) * self.config.optimizer.base_lr / REFERENCE_LR
    }

    /// One optimizer step on a fresh batch.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let batch: Tensor<T> = self.data.next_batch(self.config.optimizer.batch_size);
        let w = self.config.feds;
        let lr = self.current_lr();
        let g = Graph::new();
        let p = self.model.bind(&g, true);
        let x = g.constant(batch);
        let out = self
            .model
            .forward(&g, &p, &x, QuantMode::Train, &mut Noise::Uniform(&mut self.noise_rng))?;
        let (r_y, r_z) = out.rates(&g);

        let (loss, breakdown) = if self.uses_kd() {
            let teacher = self
                .teacher
                .as_ref()
                .ok_or_else(|| Error::StageOrder("distillation step without a teacher".into()))?;
            let teacher_outputs = teacher_forward(&teacher.model, &g, x.value())?;
            let batch = DistillationBatchOutputs {
                teacher: teacher_outputs,
                student: StudentOutputs {
                    x_hat: out.x_hat.clone(),
                    y_hat: out.y_hat.clone(),
                    taps: out.taps.clone(),
                    r_y: r_y.clone(),
                    r_z: r_z.clone(),
                },
            };
            student_total_loss(&g, &batch, &x, &w)?
        } else {
            let loss = teacher_loss(&g, &x, &out.x_hat, &r_y, &r_z, &w)?;
            let d = distortion(&g, &x, &out.x_hat, w.distortion)?;
            let b = LossBreakdown {
                d: d.item().as_f64(),
                r_y: r_y.item().as_f64(),
                r_z: r_z.item().as_f64(),
                total: loss.item().as_f64(),
                ..LossBreakdown::default()
            };
            (loss, b)
        };

        if !breakdown.is_finite() {
            let detail = format!("{breakdown:?}");
            log::error!("non-finite loss at iteration {}: {detail}", self.iteration);
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                batch_index: self.iteration,
                breakdown: detail,
            });
        }

        let mut grads = g.backward(&loss);
        let list = Adam::gather(&p, &mut grads);
        drop(p);
        drop(out);
        self.optimizer
            .update(&mut self.model.params, &list, lr, self.config.optimizer.clip_norm);
        self.iteration += 1;
        self.history.push(breakdown);

        if let Some(t) = &self.teacher {
            if t.model.params.checksum() != t.checksum {
                return Err(Error::Invariant("teacher weights changed during distillation".into()));
            }
        }
        if self.config.log_every > 0 && self.iteration % self.config.log_every == 0 {
            self.write_log(&breakdown, lr)?;
        }
        if let (Some(every), Some(path)) = (self.config.checkpoint_every, &self.checkpoint_path) {
            if every > 0 && self.iteration % every == 0 && !self.is_done() {
                self.checkpoint().save(path)?;
            }
        }
        Ok(breakdown)
    }

    fn write_log(&mut self, b: &LossBreakdown, lr: f64) -> Result<()> {
        let Some(sink) = self.log.as_mut() else {
            return Ok(());
        };
        let line = serde_json::json!({
            "iter": self.iteration,
            "stage": self.plan.stage.to_string(),
            "D": b.d,
            "R_y": b.r_y,
            "R_z": b.r_z,
            "L_out": b.l_out,
            "L_feat": b.l_feat,
            "L_lat": b.l_lat,
            "total": b.total,
            "lr": lr,
        });
        writeln!(sink, "{line}")?;
        Ok(())
    }

    /// Up to `n` more steps, stopping at the end of the plan.
    pub fn run_for(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Finish the stage and return its completed checkpoint (also written to
    /// the checkpoint path when one is set).
    pub fn run(&mut self) -> Result<Checkpoint<T>> {
        while !self.is_done() {
            self.step()?;
        }
        if let Some(sink) = self.log.as_mut() {
            sink.flush()?;
        }
        let ck = self.checkpoint();
        if let Some(path) = &self.checkpoint_path {
            ck.save(path)?;
        }
        Ok(ck)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut rngs = BTreeMap::new();
        rngs.insert("data".to_string(), RngState::capture(self.data.rng()));
        rngs.insert("noise".to_string(), RngState::capture(&self.noise_rng));
        Checkpoint {
            config: self.config.clone(),
            stage: self.plan.stage,
            iteration: self.iteration,
            completed: self.is_done(),
            distillation: self.uses_kd(),
            weights: self.model.params.to_named(),
            optimizer: Some(self.optimizer.clone()),
            rngs,
        }
    }
}

/// Frozen-teacher pass in inference mode with rounding quantization. The
/// values enter the student graph as constants.
fn teacher_forward<T: Scalar>(teacher: &CodecModel<T>, student_graph: &Graph<T>, x: &Tensor<T>) -> Result<TeacherOutputs<T>> {
    let tg = Graph::inference();
    let tp = teacher.bind(&tg, false);
    let xv = tg.constant(x.clone());
    let out = teacher.forward(&tg, &tp, &xv, QuantMode::Eval, &mut Noise::Off)?;
    let ranking = ChannelEntropyRanking::from_mean_entropy(channel_means(&rate_bits(out.y_likelihoods.value())));
    let c = |v: &crate::autograd::Var<T>| student_graph.constant(v.value().clone());
    Ok(TeacherOutputs {
        x_hat: c(&out.x_hat),
        y_hat: c(&out.y_hat),
        taps: out
            .taps
            .iter()
            .map(|t| crate::codec_networks::FeatureTap {
                stage_index: t.stage_index,
                values: c(&t.values),
            })
            .collect(),
        ranking,
    })
}

/// Mean eval-mode `D + λ(R_y + R_z)` over images, with the rate from the
/// model likelihoods and the distortion on the clamped, cropped reconstruction.
pub fn validation_loss<T: Scalar>(model: &CodecModel<T>, images: &[ImageBuffer], w: &FEDSWeights) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Invalid("validation needs at least one image".into()));
    }
    let mut total = 0.0;
    for img in images {
        let padded = pad_image(img);
        let out = model.evaluate(&padded)?;
        let bits: f64 = rate_bits(out.y_likelihoods.value())
            .data()
            .iter()
            .chain(rate_bits(out.z_likelihoods.value()).data())
            .map(|v| v.as_f64())
            .sum();
        let pixels = (img.height() * img.width()) as f64;
        let recon = ImageBuffer::from_tensor(out.x_hat.value(), img.height(), img.width())?.crop_to_original();
        let g = Graph::<T>::inference();
        let a = g.constant(img.to_tensor());
        let b = g.constant(recon.to_tensor());
        let d = distortion(&g, &a, &b, w.distortion)?.item().as_f64();
        total += d + w.lambda * bits / pixels;
    }
    Ok(total / images.len() as f64)
}
