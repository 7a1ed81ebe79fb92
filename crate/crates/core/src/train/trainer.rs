//! Optimization loop, per-epoch checkpoints, step logs and resume.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::plan::TrainPlan;
use crate::data::{Batch, DatasetManifest, Loader};
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, Objective, Targets};
use crate::model::{checkpoint, SodaNet};

pub const STEP_LOG: &str = "steps.jsonl";
pub const RUN_RECORD: &str = "run.json";

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepLog {
    /// One JSON line: step, epoch, lr and the flattened loss breakdown.
    pub fn to_json_line(&self) -> String {
        let mut v = self.loss.to_flat_json();
        if let Some(m) = v.as_object_mut() {
            m.insert("step".into(), self.step.into());
            m.insert("epoch".into(), self.epoch.into());
            m.insert("lr".into(), self.lr.into());
        }
        v.to_string()
    }
}

/// Progress stored next to each checkpoint so a run can resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub plan: TrainPlan,
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("state.json")
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.safetensors"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub plan: TrainPlan,
    pub seed: u64,
    pub steps: Vec<StepLog>,
    pub step_log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    pub resumed_from: Option<PathBuf>,
}

/// Network, objective and optimizer for one plan.
pub struct Trainer {
    net: SodaNet,
    plan: TrainPlan,
    objective: Objective,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(plan: TrainPlan) -> Result<Self> {
        Self::with_dtype(plan, DType::F32)
    }

    pub fn with_dtype(plan: TrainPlan, dtype: DType) -> Result<Self> {
        plan.validate()?;
        let net = SodaNet::with_dtype(plan.model_config()?, plan.seed, dtype, &Device::Cpu)?;
        Self::from_net(plan, net, 0)
    }

    /// Continue from a checkpoint written by [`train`]; refuses when the stored
    /// model config or training plan differs from `plan`.
    pub fn resume(plan: TrainPlan, checkpoint: &Path) -> Result<(Self, usize)> {
        plan.validate()?;
        let net = checkpoint::load(checkpoint, Some(&plan.model_config()?))?;
        let state: TrainState = serde_json::from_str(&std::fs::read_to_string(state_path(checkpoint))?)?;
        let fields = plan.resume_diff(&state.plan);
        if !fields.is_empty() {
            return Err(Error::ConfigMismatch { fields });
        }
        let epoch = state.epoch;
        Ok((Self::from_net(plan, net, state.step)?, epoch))
    }

    fn from_net(plan: TrainPlan, net: SodaNet, step: usize) -> Result<Self> {
        let objective = Objective::for_config(net.config(), plan.effective_beta());
        let params = ParamsAdamW { lr: plan.lr0, weight_decay: 0.0, ..Default::default() };
        let opt = AdamW::new(net.store().trainable(), params)?;
        Ok(Self { net, plan, objective, opt, step })
    }

    pub fn net(&self) -> &SodaNet {
        &self.net
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Loss of a batch in training mode, without updating weights.
    pub fn loss(&self, batch: &Batch) -> Result<(candle_core::Tensor, LossBreakdown)> {
        let outputs = self.net.forward(&batch.images, true)?;
        let targets = Targets::new(&batch.gt, &batch.contour, self.net.store().dtype())?;
        self.objective.evaluate(&outputs, &targets)
    }

    /// One optimizer step at `lr`. A non-finite loss leaves the weights untouched.
    pub fn step(&mut self, batch: &Batch, epoch: usize, lr: f64) -> Result<StepLog> {
        let (loss, breakdown) = self.loss(batch)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite { site: format!("loss at step {}", self.step) });
        }
        self.opt.set_learning_rate(lr);
        self.opt.backward_step(&loss)?;
        let log = StepLog { step: self.step, epoch, lr, loss: breakdown };
        self.step += 1;
        Ok(log)
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        checkpoint::save(&self.net, path)?;
        let state = TrainState { epoch, step: self.step, plan: self.plan.clone() };
        std::fs::write(state_path(path), serde_json::to_string_pretty(&state)?)?;
        Ok(())
    }
}

/// Run a plan over a manifest, writing checkpoints, `steps.jsonl` and `run.json` into `out_dir`.
pub fn train(plan: &TrainPlan, manifest: DatasetManifest, out_dir: &Path, resume: Option<&Path>) -> Result<RunRecord> {
    let start = Instant::now();
    if manifest.phase != plan.phase.manifest_phase() {
        return Err(Error::Manifest(format!(
            "manifest is for {:?} but the plan trains {}",
            manifest.phase, plan.phase
        )));
    }
    if let Some(e) = manifest.entries.iter().find(|e| ![&e.image, &e.gt, &e.contour].iter().all(|p| p.is_file())) {
        return Err(Error::Manifest(format!("missing files for entry {}", e.image.display())));
    }
    let (mut trainer, done_epochs) = match resume {
        Some(ckpt) => Trainer::resume(plan.clone(), ckpt)?,
        None => (Trainer::new(plan.clone())?, 0),
    };
    let cfg = trainer.net().config().clone();
    let loader = Loader::new(manifest, cfg.input_size, plan.batch_size, plan.seed)?;
    std::fs::create_dir_all(out_dir)?;
    let step_log = out_dir.join(STEP_LOG);
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&step_log)?
    } else {
        File::create(&step_log)?
    };
    let mut log_out = BufWriter::new(file);
    let mut record = RunRecord {
        plan: plan.clone(),
        seed: plan.seed,
        steps: Vec::new(),
        step_log: step_log.clone(),
        checkpoints: Vec::new(),
        wall_clock_secs: 0.0,
        resumed_from: resume.map(Path::to_path_buf),
    };
    let mut last_good = resume.map(Path::to_path_buf);
    let dtype = trainer.net().store().dtype();
    'epochs: for epoch in done_epochs + 1..=plan.epochs {
        let lr = plan.lr_at(epoch);
        for index in 0..loader.batches_per_epoch() {
            if plan.max_steps.is_some_and(|m| trainer.steps_taken() >= m) {
                break 'epochs;
            }
            let Some(batch) = loader.batch(epoch, index, dtype, &Device::Cpu)? else {
                continue;
            };
            let log = match trainer.step(&batch, epoch, lr) {
                Ok(log) => log,
                Err(Error::NonFinite { .. }) => {
                    log_out.flush()?;
                    return Err(Error::Diverged { step: trainer.steps_taken(), last_good });
                }
                Err(e) => return Err(e),
            };
            writeln!(log_out, "{}", log.to_json_line())?;
            log::info!("epoch {epoch} step {} loss {:.5}", log.step, log.loss.total);
            record.steps.push(log);
        }
        log_out.flush()?;
        let ckpt = checkpoint_path(out_dir, epoch);
        trainer.save(&ckpt, epoch)?;
        record.checkpoints.push(ckpt.clone());
        last_good = Some(ckpt);
    }
    log_out.flush()?;
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    std::fs::write(out_dir.join(RUN_RECORD), serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::write_synthetic;
    use crate::data::Phase;
    use crate::model::Variant;

    fn toy_plan() -> TrainPlan {
        TrainPlan {
            variant: Variant::Custom,
            epochs: 2,
            batch_size: 2,
            input_size: Some(16),
            ..TrainPlan::pretrain()
        }
    }

    fn manifest(dir: &Path) -> DatasetManifest {
        let sources = write_synthetic(&dir.join("data"), 2, 16, 3).unwrap();
        DatasetManifest::expand(&sources, Phase::Pretrain, "synthetic")
    }

    #[test]
    fn writes_logs_checkpoints_and_record() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let rec = train(&toy_plan(), manifest(dir.path()), &out, None).unwrap();
        assert_eq!(rec.steps.len(), 6);
        assert_eq!(rec.checkpoints, vec![checkpoint_path(&out, 1), checkpoint_path(&out, 2)]);
        let lines = std::fs::read_to_string(&rec.step_log).unwrap();
        assert_eq!(lines.lines().count(), 6);
        let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 0);
        assert!(first["total"].as_f64().unwrap().is_finite());
        assert!(out.join(RUN_RECORD).is_file());
    }

    #[test]
    fn resume_continues_and_refuses_changed_plans() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let plan = TrainPlan { epochs: 1, ..toy_plan() };
        let rec = train(&plan, manifest(dir.path()), &out, None).unwrap();
        let ckpt = rec.checkpoints[0].clone();

        let more = TrainPlan { epochs: 2, ..toy_plan() };
        let rec2 = train(&more, manifest(dir.path()), &out, Some(&ckpt)).unwrap();
        assert_eq!(rec2.steps.first().map(|s| (s.step, s.epoch)), Some((3, 2)));

        let changed = TrainPlan { beta: 0.25, ..more };
        match train(&changed, manifest(dir.path()), &out, Some(&ckpt)) {
            Err(Error::ConfigMismatch { fields }) => assert_eq!(fields, vec!["beta".to_string()]),
            other => panic!("expected refusal, got {:?}", other.map(|r| r.steps.len())),
        }
        let other_model = TrainPlan { input_size: Some(32), ..toy_plan() };
        assert!(matches!(
            train(&other_model, manifest(dir.path()), &out, Some(&ckpt)),
            Err(Error::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_loss_halts_with_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let plan = TrainPlan { epochs: 1, ..toy_plan() };
        let rec = train(&plan, manifest(dir.path()), &out, None).unwrap();
        let ckpt = rec.checkpoints[0].clone();
        let (trainer, _) = Trainer::resume(TrainPlan { epochs: 2, ..toy_plan() }, &ckpt).unwrap();
        let (name, var) = trainer.net().store().named_trainable().into_iter().next().unwrap();
        trainer.net().store().assign(&name, &(var.as_tensor() * f64::NAN).unwrap()).unwrap();
        trainer.save(&ckpt.with_file_name("poisoned.safetensors"), 1).unwrap();
        let poisoned = ckpt.with_file_name("poisoned.safetensors");
        match train(&TrainPlan { epochs: 2, ..toy_plan() }, manifest(dir.path()), &out, Some(&poisoned)) {
            Err(Error::Diverged { step, last_good }) => {
                assert_eq!(step, 3);
                assert_eq!(last_good, Some(poisoned));
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.steps.len())),
        }
    }
}
