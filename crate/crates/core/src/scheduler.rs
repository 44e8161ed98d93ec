//! Auxiliary-task weighting driven by measured gradient impact.
//!
//! Each update multiplies an auxiliary weight by `m^(u/s)`, where `m` is how
//! much of the combined ST+auxiliary gradient the auxiliary task accounts
//! for. Tasks whose weight drops below a threshold are pruned for good.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;

/// Which step count enters the exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExponentMode {
    /// The absolute training step.
    #[default]
    Absolute,
    /// Steps elapsed since the previous update.
    SinceLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    /// Probe instances per update.
    pub k: usize,
    pub update_every: u64,
    pub s_asr: f64,
    pub s_mt: f64,
    pub prune_threshold: f64,
    pub exponent: ExponentMode,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            k: 16,
            update_every: 500,
            s_asr: 500.0,
            s_mt: 1000.0,
            prune_threshold: 0.1,
            exponent: ExponentMode::Absolute,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.update_every == 0 {
            return Err(Error::Config("scheduler k and update_every must be positive".into()));
        }
        if !(self.s_asr > 0.0 && self.s_mt > 0.0) {
            return Err(Error::Config("smoothing coefficients must be positive".into()));
        }
        if !(self.prune_threshold >= 0.0) {
            return Err(Error::Config(format!("prune threshold {} must be >= 0", self.prune_threshold)));
        }
        Ok(())
    }

    pub fn smoothing(&self, task: Task) -> f64 {
        match task {
            Task::Asr => self.s_asr,
            _ => self.s_mt,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean over instances of `‖δ_task‖ / ‖δ_st + δ_task‖`. Instances whose
/// denominator vanishes are skipped.
pub fn task_impact(delta_task: &[Vec<f64>], delta_st: &[Vec<f64>]) -> Result<f64> {
    if delta_task.len() != delta_st.len() || delta_task.is_empty() {
        return Err(Error::invalid(format!(
            "task impact needs matching non-empty instance lists, got {} and {}",
            delta_task.len(),
            delta_st.len()
        )));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (t, s) in delta_task.iter().zip(delta_st) {
        if t.len() != s.len() {
            return Err(Error::shape("task_impact", format!("{} vs {} gradient entries", t.len(), s.len())));
        }
        let sum: Vec<f64> = t.iter().zip(s).map(|(a, b)| a + b).collect();
        let den = norm(&sum);
        if den == 0.0 {
            continue;
        }
        total += norm(t) / den;
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid("every probe instance had a zero combined gradient"));
    }
    Ok(total / used as f64)
}

/// `w · m^(u/s)`.
pub fn update_weight(w_prev: f64, m: f64, u: f64, s: f64) -> Result<f64> {
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::invalid(format!("task impact {m} must be finite and non-negative")));
    }
    if !(s > 0.0) {
        return Err(Error::invalid(format!("smoothing coefficient {s} must be positive")));
    }
    Ok(w_prev * m.powf(u / s))
}

/// MT trains both the textual encoder and the decoder; the larger impact wins.
pub fn mt_module_rule(m_tenc: f64, m_dec: f64) -> f64 {
    m_tenc.max(m_dec)
}

/// Measured impacts from one probe round; `None` for tasks not measured.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImpactSample {
    pub k: usize,
    pub asr: Option<f64>,
    pub mt_tenc: Option<f64>,
    pub mt_dec: Option<f64>,
}

impl ImpactSample {
    pub fn impact(&self, task: Task) -> Option<f64> {
        match task {
            Task::St => None,
            Task::Asr => self.asr,
            Task::Mt => match (self.mt_tenc, self.mt_dec) {
                (Some(a), Some(b)) => Some(mt_module_rule(a, b)),
                (a, b) => a.or(b),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub task: Task,
    pub m: f64,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub config: SchedulerConfig,
    pub w_asr: f64,
    pub w_mt: f64,
    pub initial_asr: f64,
    pub initial_mt: f64,
    pub pruned_asr: bool,
    pub pruned_mt: bool,
    pub last_update: u64,
    pub history: Vec<HistoryRow>,
    pub warnings: Vec<String>,
}

impl TaskWeights {
    pub fn new(config: SchedulerConfig, initial_asr: f64, initial_mt: f64) -> Result<Self> {
        config.validate()?;
        if !(initial_asr >= 0.0 && initial_mt >= 0.0) {
            return Err(Error::Config("initial task weights must be non-negative".into()));
        }
        Ok(TaskWeights {
            config,
            w_asr: initial_asr,
            w_mt: initial_mt,
            initial_asr,
            initial_mt,
            // a task that starts at zero never trains
            pruned_asr: initial_asr == 0.0,
            pruned_mt: initial_mt == 0.0,
            last_update: 0,
            history: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Weight entering the total loss; zero once pruned.
    pub fn weight(&self, task: Task) -> f64 {
        match task {
            Task::St => 1.0,
            Task::Asr if self.pruned_asr => 0.0,
            Task::Asr => self.w_asr,
            Task::Mt if self.pruned_mt => 0.0,
            Task::Mt => self.w_mt,
        }
    }

    pub fn is_pruned(&self, task: Task) -> bool {
        match task {
            Task::St => false,
            Task::Asr => self.pruned_asr,
            Task::Mt => self.pruned_mt,
        }
    }

    /// Auxiliary tasks that still train.
    pub fn active(&self) -> Vec<Task> {
        [Task::Asr, Task::Mt].into_iter().filter(|&t| !self.is_pruned(t)).collect()
    }

    /// First step at which `task` was pruned, from the history.
    pub fn pruned_at(&self, task: Task) -> Option<u64> {
        if !self.is_pruned(task) {
            return None;
        }
        self.history
            .iter()
            .find(|r| r.task == task && r.w < self.config.prune_threshold)
            .map(|r| r.step)
    }

    pub fn is_due(&self, step: u64) -> bool {
        step > 0 && step % self.config.update_every == 0 && !self.active().is_empty()
    }

    fn exponent_steps(&self, step: u64) -> f64 {
        match self.config.exponent {
            ExponentMode::Absolute => step as f64,
            ExponentMode::SinceLast => (step - self.last_update.min(step)) as f64,
        }
    }

    /// Applies one measured sample at `step`.
    pub fn apply(&mut self, step: u64, sample: &ImpactSample) -> Result<()> {
        let u = self.exponent_steps(step);
        for task in self.active() {
            let Some(m) = sample.impact(task) else { continue };
            let (w, w0) = match task {
                Task::Asr => (&mut self.w_asr, self.initial_asr),
                _ => (&mut self.w_mt, self.initial_mt),
            };
            *w = update_weight(*w, m, u, self.config.smoothing(task))?.min(w0);
            let w_new = *w;
            self.history.push(HistoryRow { step, task, m, w: w_new });
            if w_new < self.config.prune_threshold {
                match task {
                    Task::Asr => self.pruned_asr = true,
                    _ => self.pruned_mt = true,
                }
            }
        }
        self.last_update = step;
        Ok(())
    }

    /// Runs `probe` for the active tasks and applies its result. A failing
    /// probe leaves the weights unchanged and records a warning.
    pub fn schedule_step(&mut self, step: u64, probe: impl FnOnce(&[Task]) -> Result<ImpactSample>) -> Result<()> {
        let active = self.active();
        if active.is_empty() {
            return Ok(());
        }
        match probe(&active) {
            Ok(sample) => self.apply(step, &sample),
            Err(e) => {
                self.warnings.push(format!("step {step}: probe failed, weights unchanged: {e}"));
                Ok(())
            }
        }
    }

    /// Rebuilds the weight trajectory of `task` from its initial value and
    /// the recorded impacts.
    pub fn replay(&self, task: Task) -> Result<Vec<f64>> {
        let w0 = match task {
            Task::Asr => self.initial_asr,
            Task::Mt => self.initial_mt,
            Task::St => return Ok(Vec::new()),
        };
        let mut w = w0;
        let (mut prev, mut cur) = (0u64, 0u64);
        let mut out = Vec::new();
        for r in self.history.iter() {
            // rows of one update share a step; the reference moves between updates
            if r.step != cur {
                prev = cur;
                cur = r.step;
            }
            let u = match self.config.exponent {
                ExponentMode::Absolute => r.step as f64,
                ExponentMode::SinceLast => (r.step - prev) as f64,
            };
            if r.task == task {
                w = update_weight(w, r.m, u, self.config.smoothing(task))?.min(w0);
                out.push(w);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impact_hand_cases() {
        assert_eq!(task_impact(&[vec![0.0, 0.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        let d = vec![0.3, -1.2, 2.0];
        assert!((task_impact(&[d.clone()], &[d]).unwrap() - 0.5).abs() < 1e-15);
        let m = task_impact(&[vec![0.0, 4.0]], &[vec![3.0, 0.0]]).unwrap();
        assert!((m - 0.8).abs() < 1e-15);
    }

    #[test]
    fn impact_skips_zero_denominators() {
        assert!(task_impact(&[vec![1.0]], &[vec![1.0, 2.0]]).is_err());
        let m = task_impact(&[vec![1.0, 0.0], vec![0.0, 4.0]], &[vec![-1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert!((m - 0.8).abs() < 1e-15);
        assert!(task_impact(&[vec![1.0]], &[vec![-1.0]]).is_err());
    }

    #[test]
    fn weight_update_cases() {
        assert_eq!(update_weight(0.7, 1.0, 1500.0, 500.0).unwrap(), 0.7);
        assert!((update_weight(1.0, 0.5, 500.0, 500.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(update_weight(1.0, -0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn constant_impact_matches_closed_form() {
        let (m, s) = (0.83, 1000.0);
        let steps = [500.0, 1000.0, 1500.0, 2000.0, 2500.0];
        let mut w = 1.0;
        for &u in &steps {
            w = update_weight(w, m, u, s).unwrap();
        }
        let closed = m.powf(steps.iter().sum::<f64>() / s);
        assert!((w - closed).abs() < 1e-12);
    }

    #[test]
    fn decay_accelerates_with_step() {
        let mut tw = TaskWeights::new(SchedulerConfig::default(), 1.0, 1.0).unwrap();
        let sample = ImpactSample {
            k: 1,
            asr: Some(0.9),
            mt_tenc: Some(0.95),
            mt_dec: Some(0.9),
        };
        let mut ratios = Vec::new();
        let mut prev = 1.0;
        for i in 1..=4 {
            tw.apply(i * 500, &sample).unwrap();
            ratios.push(tw.w_asr / prev);
            prev = tw.w_asr;
        }
        assert!(ratios.windows(2).all(|r| r[1] < r[0]));
    }

    #[test]
    fn mt_takes_the_larger_module() {
        assert_eq!(mt_module_rule(0.3, 0.7), 0.7);
        assert_eq!(mt_module_rule(0.7, 0.3), 0.7);
        assert_eq!(mt_module_rule(0.4, 0.4), 0.4);
    }

    #[test]
    fn pruning_is_permanent_and_zero_threshold_never_prunes() {
        let sample = ImpactSample {
            k: 1,
            asr: Some(0.5),
            mt_tenc: Some(0.5),
            mt_dec: Some(0.5),
        };
        let mut tw = TaskWeights::new(SchedulerConfig::default(), 1.0, 1.0).unwrap();
        for i in 1..=8 {
            tw.schedule_step(i * 500, |_| Ok(sample.clone())).unwrap();
        }
        let asr = tw.pruned_at(Task::Asr).unwrap();
        let mt = tw.pruned_at(Task::Mt).unwrap();
        assert!(asr < mt);
        assert_eq!(tw.weight(Task::Asr), 0.0);
        let asr_rows = tw.history.iter().filter(|r| r.task == Task::Asr).count();
        assert_eq!(asr_rows as u64, asr / 500);

        let cfg = SchedulerConfig {
            prune_threshold: 0.0,
            ..SchedulerConfig::default()
        };
        let mut tw = TaskWeights::new(cfg, 1.0, 1.0).unwrap();
        for i in 1..=8 {
            tw.schedule_step(i * 500, |_| Ok(sample.clone())).unwrap();
        }
        assert!(tw.active().len() == 2);
    }

    #[test]
    fn history_replays_weights() {
        for exponent in [ExponentMode::Absolute, ExponentMode::SinceLast] {
            let cfg = SchedulerConfig {
                exponent,
                ..SchedulerConfig::default()
            };
            let mut tw = TaskWeights::new(cfg, 1.0, 0.8).unwrap();
            for (i, m) in [0.9, 0.7, 0.95, 0.6].into_iter().enumerate() {
                let sample = ImpactSample {
                    k: 4,
                    asr: Some(m),
                    mt_tenc: Some(m * 0.9),
                    mt_dec: Some(m),
                };
                tw.apply((i as u64 + 1) * 500, &sample).unwrap();
            }
            for task in [Task::Asr, Task::Mt] {
                let replay = tw.replay(task).unwrap();
                let logged: Vec<f64> = tw.history.iter().filter(|r| r.task == task).map(|r| r.w).collect();
                assert_eq!(replay, logged);
            }
        }
    }

    #[test]
    fn failed_probe_keeps_weights() {
        let mut tw = TaskWeights::new(SchedulerConfig::default(), 1.0, 1.0).unwrap();
        tw.schedule_step(500, |_| Err(Error::invalid("boom"))).unwrap();
        assert_eq!((tw.w_asr, tw.w_mt), (1.0, 1.0));
        assert_eq!(tw.warnings.len(), 1);
        assert!(tw.history.is_empty());
    }
}
