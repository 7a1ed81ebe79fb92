//! Training plans: phase presets, the step learning-rate schedule and the flat
//! `key: value` plan file format.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Phase;
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig, Variant};

pub const SEED_ENV: &str = "SODA_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Pretrain,
    Finetune,
}

impl TrainPhase {
    pub fn manifest_phase(self) -> Phase {
        match self {
            TrainPhase::Pretrain => Phase::Pretrain,
            TrainPhase::Finetune => Phase::Finetune,
        }
    }
}

impl FromStr for TrainPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pretrain" => Ok(TrainPhase::Pretrain),
            "finetune" => Ok(TrainPhase::Finetune),
            other => Err(Error::Plan(format!("unknown phase `{other}` (pretrain or finetune)"))),
        }
    }
}

impl fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainPhase::Pretrain => "pretrain",
            TrainPhase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub phase: TrainPhase,
    pub epochs: usize,
    pub lr0: f64,
    /// `(epoch, multiplier)`: the multiplier applies to every later epoch.
    pub lr_schedule: Vec<(usize, f64)>,
    pub beta: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub variant: Variant,
    pub ablations: BTreeSet<Ablation>,
    /// Square training resolution; the variant's default when absent.
    pub input_size: Option<usize>,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

impl TrainPlan {
    pub fn pretrain() -> Self {
        Self {
            phase: TrainPhase::Pretrain,
            epochs: 21,
            lr0: 1e-3,
            lr_schedule: vec![(15, 0.5)],
            beta: 1.0,
            seed: 0,
            batch_size: 8,
            variant: Variant::Full,
            ablations: BTreeSet::new(),
            input_size: None,
            max_steps: None,
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: TrainPhase::Finetune,
            epochs: 11,
            lr_schedule: vec![(5, 0.1)],
            beta: 0.5,
            ..Self::pretrain()
        }
    }

    pub fn preset(phase: TrainPhase) -> Self {
        match phase {
            TrainPhase::Pretrain => Self::pretrain(),
            TrainPhase::Finetune => Self::finetune(),
        }
    }

    /// Learning rate during 1-indexed `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(trigger, _)| trigger < epoch)
            .fold(self.lr0, |lr, &(_, m)| lr * m)
    }

    /// Background weight actually used by the objective.
    pub fn effective_beta(&self) -> f64 {
        if self.ablations.contains(&Ablation::FgOnly) {
            0.0
        } else {
            self.beta
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = match self.variant {
            Variant::Custom => ModelConfig::toy(),
            v => ModelConfig::for_variant(v)?,
        };
        let mut cfg = base.with_ablations(self.ablations.iter().copied());
        if let Some(s) = self.input_size {
            cfg.input_size = (s, s);
        }
        cfg.validate()?;
        let (h, w) = cfg.input_size;
        cfg.check_input(h, w)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Plan(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if let Some(&(e, m)) = self.lr_schedule.iter().find(|(_, m)| !(m.is_finite() && *m > 0.0)) {
            return bad(format!("schedule multiplier at epoch {e} must be positive, got {m}"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be non-negative, got {}", self.beta));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }

    /// Fields that must match for a run to continue from a checkpoint of `other`.
    /// Run length (`epochs`, `max_steps`) may change.
    pub fn resume_diff(&self, other: &TrainPlan) -> Vec<String> {
        let fields = |p: &TrainPlan| -> Vec<(String, String)> {
            p.to_text()
                .lines()
                .filter_map(|l| l.split_once(':').map(|(k, v)| (k.to_string(), v.trim().to_string())))
                .filter(|(k, _)| k != "epochs" && k != "max_steps")
                .collect()
        };
        let (a, b) = (fields(self), fields(other));
        let keys: BTreeSet<&String> = a.iter().chain(&b).map(|(k, _)| k).collect();
        keys.into_iter()
            .filter(|k| a.iter().find(|(x, _)| x == *k) != b.iter().find(|(x, _)| x == *k))
            .cloned()
            .collect()
    }

    /// Replace the seed with `SODA_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Plan(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Parse a flat plan file on top of the preset for its `phase` (or `default_phase`).
    ///
    /// One `key: value` per line; `#` starts a comment. Lists are comma separated,
    /// schedule entries are `epoch:multiplier` or `epoch=multiplier`.
    pub fn parse(text: &str, default_phase: TrainPhase) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::Plan(format!("line {}: expected `key: value`, got `{line}`", no + 1)))?;
            pairs.push((no + 1, k.trim().to_ascii_lowercase(), v.trim().to_string()));
        }
        let phase = match pairs.iter().rev().find(|(_, k, _)| k == "phase") {
            Some((_, _, v)) => v.parse()?,
            None => default_phase,
        };
        let mut plan = Self::preset(phase);
        for (no, key, value) in &pairs {
            plan.set(key, value).map_err(|e| Error::Plan(format!("line {no}: {e}")))?;
        }
        plan.validate()?;
        Ok(plan)
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Plan(format!("{key}: cannot parse `{v}`")))
        }
        let list = || value.split(',').map(str::trim).filter(|s| !s.is_empty());
        match key {
            "phase" => self.phase = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "lr0" | "lr" => self.lr0 = num(key, value)?,
            "lr_schedule" | "schedule" => {
                self.lr_schedule = list()
                    .map(|item| {
                        let (e, m) = item
                            .split_once([':', '='])
                            .ok_or_else(|| Error::Plan(format!("{key}: entry `{item}` is not epoch:multiplier")))?;
                        Ok((num(key, e.trim())?, num(key, m.trim())?))
                    })
                    .collect::<Result<_>>()?
            }
            "beta" => self.beta = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "ablation" | "ablations" => self.ablations = list().map(str::parse).collect::<Result<_>>()?,
            "input_size" => self.input_size = Some(num(key, value)?),
            "max_steps" => self.max_steps = Some(num(key, value)?),
            other => return Err(Error::Plan(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// The plan in the flat file format; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("phase: {}", self.phase),
            format!("epochs: {}", self.epochs),
            format!("lr0: {}", self.lr0),
            format!(
                "lr_schedule: {}",
                self.lr_schedule.iter().map(|(e, m)| format!("{e}={m}")).collect::<Vec<_>>().join(", ")
            ),
            format!("beta: {}", self.beta),
            format!("seed: {}", self.seed),
            format!("batch_size: {}", self.batch_size),
            format!("variant: {}", self.variant),
            format!("ablation: {}", self.ablations.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(", ")),
        ];
        if let Some(s) = self.input_size {
            lines.push(format!("input_size: {s}"));
        }
        if let Some(s) = self.max_steps {
            lines.push(format!("max_steps: {s}"));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_follow_the_recipe() {
        let p = TrainPlan::pretrain();
        assert_eq!((p.epochs, p.lr0, p.beta), (21, 1e-3, 1.0));
        let f = TrainPlan::finetune();
        assert_eq!((f.epochs, f.lr0, f.beta), (11, 1e-3, 0.5));
    }

    #[test]
    fn schedule_steps_after_trigger_epoch() {
        let p = TrainPlan::pretrain();
        assert_eq!(p.lr_at(15), 1e-3);
        assert_eq!(p.lr_at(16), 5e-4);
        let f = TrainPlan::finetune();
        assert_eq!(f.lr_at(5), 1e-3);
        assert_eq!(f.lr_at(6), 1e-3 * 0.1);
    }

    #[test]
    fn parses_flat_file_over_phase_preset() {
        let text = "# smoke\nphase: finetune\nvariant: s\nbatch_size: 4\nlr_schedule: 2:0.5, 4=0.1\nablation: no_cfm, fg_only\ninput_size: 96\n";
        let p = TrainPlan::parse(text, TrainPhase::Pretrain).unwrap();
        assert_eq!(p.phase, TrainPhase::Finetune);
        assert_eq!(p.epochs, 11);
        assert_eq!(p.variant, Variant::Small);
        assert_eq!(p.lr_schedule, vec![(2, 0.5), (4, 0.1)]);
        assert_eq!(p.effective_beta(), 0.0);
        let cfg = p.model_config().unwrap();
        assert!(cfg.has(Ablation::NoCfm) && !cfg.has(Ablation::FgOnly));
        assert_eq!(cfg.input_size, (96, 96));
        assert_eq!(TrainPlan::parse(&p.to_text(), TrainPhase::Pretrain).unwrap(), p);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(TrainPlan::parse("colour: red", TrainPhase::Pretrain), Err(Error::Plan(_))));
        assert!(matches!(TrainPlan::parse("epochs: many", TrainPhase::Pretrain), Err(Error::Plan(_))));
        assert!(matches!(TrainPlan::parse("epochs: 0", TrainPhase::Pretrain), Err(Error::Plan(_))));
        assert!(TrainPlan::parse("ablation: no_wings", TrainPhase::Pretrain).is_err());
    }

    #[test]
    fn resume_diff_names_changed_fields_only() {
        let a = TrainPlan::pretrain();
        let b = TrainPlan { epochs: 40, max_steps: Some(3), ..a.clone() };
        assert!(a.resume_diff(&b).is_empty());
        let c = TrainPlan { beta: 0.1, input_size: Some(96), ..a.clone() };
        assert_eq!(a.resume_diff(&c), vec!["beta".to_string(), "input_size".to_string()]);
    }

    proptest! {
        #[test]
        fn lr_is_product_of_passed_multipliers(
            sched in proptest::collection::vec((1usize..30, 0.01f64..2.0), 0..4),
            epoch in 1usize..40,
        ) {
            let plan = TrainPlan { lr_schedule: sched.clone(), ..TrainPlan::pretrain() };
            let mut want = plan.lr0;
            for (t, m) in &sched {
                if *t < epoch {
                    want *= m;
                }
            }
            prop_assert_eq!(plan.lr_at(epoch), want);
        }
    }
}
