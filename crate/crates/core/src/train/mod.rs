//! Multi-task training loop, checkpoints and run directories.

pub mod checkpoint;
pub mod config;
pub mod objective;
pub mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Toggles, TrainingConfig};
pub use objective::{objective, task_loss};
pub use optim::{learning_rate, Adam};

use crate::analysis::module_vector;
use crate::data::{mix_seed, Corpus, SeedStream, SyntheticBatch};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ForwardCtx, ForwardOptions, Model, Task, TaskSet};
use crate::scheduler::{task_impact, ImpactSample, TaskWeights};
use crate::tensor::{Graph, ParamKind, Partition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub l_st: f64,
    pub l_asr: Option<f64>,
    pub l_mt: Option<f64>,
    pub l_cl: Option<f64>,
    pub l_consistency: Option<f64>,
    pub total: f64,
    pub w_asr: f64,
    pub w_mt: f64,
    pub lr: f64,
    pub length_ratio: Option<f64>,
    pub st_accuracy: Option<f64>,
}

/// Position-wise token accuracy of greedy ST output against the reference,
/// with the copy-the-source baseline on the same samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub copy_baseline: f64,
    pub tokens: usize,
}

/// Fraction of reference positions matched by `hyp` at the same index.
pub fn token_accuracy<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (hyp, reference) in pairs {
        total += reference.len();
        hit += reference.iter().zip(hyp).filter(|(r, h)| r == h).count();
    }
    (hit, total)
}

pub struct Trainer {
    config: RunConfig,
    corpus: Corpus,
    model: Model,
    adam: Adam,
    weights: TaskWeights,
    step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let corpus = Corpus::new(config.corpus.clone())?;
        let model = Model::new(config.model.clone())?;
        let t = &config.training;
        let adam = Adam::new(model.store(), t.beta1, t.beta2, t.eps);
        let weights = TaskWeights::new(
            config.scheduler.clone(),
            if config.toggles.use_asr { t.initial_w_asr } else { 0.0 },
            if config.toggles.use_mt { t.initial_w_mt } else { 0.0 },
        )?;
        Ok(Trainer {
            config,
            corpus,
            model,
            adam,
            weights,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config)?;
        t.model.store_mut().load_flat_values(&ckpt.params)?;
        if ckpt.adam.m.len() != t.model.store().num_scalars() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        t.adam = ckpt.adam;
        t.weights = ckpt.weights;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            params: self.model.store().flat_values(),
            weights: self.weights.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn weights(&self) -> &TaskWeights {
        &self.weights
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.training.steps
    }

    /// Forward options in effect at 0-based step `step`.
    pub fn forward_options(&self, step: u64) -> ForwardOptions {
        let t = &self.config.toggles;
        ForwardOptions {
            shrink: self.config.shrink_active(step),
            lbm: t.use_lbm,
            l2g: t.use_l2g,
            text_noise: if t.use_l2g { t.text_noise } else { 0.0 },
            asr_variant: t.asr_variant,
            clean_text: t.use_cl,
        }
    }

    fn active_tasks(&self) -> TaskSet {
        let t = &self.config.toggles;
        TaskSet {
            st: true,
            asr: t.use_asr && !self.weights.is_pruned(Task::Asr),
            mt: t.use_mt && !self.weights.is_pruned(Task::Mt),
        }
    }

    /// Runs one optimization step and, when due, a scheduler update.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let idx = self.step;
        let cfg = &self.config;
        let batch = self.corpus.stream_batch(SeedStream::Train, idx, cfg.training.batch_size)?;
        let opts = self.forward_options(idx);
        let tasks = self.active_tasks();
        let weights = LossWeights {
            asr: self.weights.weight(Task::Asr),
            mt: self.weights.weight(Task::Mt),
            cl: cfg.training.w_cl,
        };
        let mut ctx = ForwardCtx::train(cfg.model.dropout, mix_seed(cfg.training.seed, idx));
        let (bundle, ratio, grads) = {
            let mut g = Graph::new(self.model.store());
            let out = self.model.forward_tasks(&mut g, &mut ctx, &batch, tasks, &opts)?;
            let bundle = objective(&mut g, &self.model, &out, &batch.src_lens, weights, opts.clean_text)?;
            if !bundle.l_total.is_finite() {
                return Err(Error::NonFinite {
                    step: idx + 1,
                    last_checkpoint: None,
                });
            }
            let grads = g.backward(bundle.total)?;
            (bundle, out.shrink.as_ref().map(|s| s.length_ratio), grads)
        };
        let lr = learning_rate(cfg.training.lr, idx + 1, cfg.warmup_steps());
        let clip = cfg.training.clip_norm;
        let scale = if clip > 0.0 {
            let n = Adam::grad_norm(self.model.store(), &grads);
            if n > clip {
                clip / n
            } else {
                1.0
            }
        } else {
            1.0
        };
        self.adam.step(self.model.store_mut(), &grads, lr, scale)?;
        self.step += 1;

        if self.weights.is_due(self.step) {
            let completed = self.step;
            let mut weights = self.weights.clone();
            weights.schedule_step(completed, |active| self.probe(active))?;
            self.weights = weights;
        }
        Ok(MetricsRow {
            step: self.step,
            l_st: bundle.l_st,
            l_asr: bundle.l_asr,
            l_mt: bundle.l_mt,
            l_cl: bundle.l_cl,
            l_consistency: bundle.l_consistency,
            total: bundle.l_total,
            w_asr: self.weights.weight(Task::Asr),
            w_mt: self.weights.weight(Task::Mt),
            lr,
            length_ratio: ratio,
            st_accuracy: None,
        })
    }

    /// Task impacts on `k` single-instance probes with dropout off.
    pub fn probe(&self, active: &[Task]) -> Result<ImpactSample> {
        let k = self.config.scheduler.k;
        let round = self.step / self.config.scheduler.update_every;
        let opts = self.forward_options(self.step.saturating_sub(1));
        let store = self.model.store();
        let want_asr = active.contains(&Task::Asr);
        let want_mt = active.contains(&Task::Mt);
        let (mut st_a, mut st_t, mut st_d) = (Vec::new(), Vec::new(), Vec::new());
        let (mut asr_a, mut mt_t, mut mt_d) = (Vec::new(), Vec::new(), Vec::new());
        for j in 0..k as u64 {
            let index = round * k as u64 + j;
            let batch = self.corpus.stream_batch(SeedStream::Probe, index, 1)?;
            let seed = mix_seed(self.config.training.seed, SeedStream::Probe.sample_seed(index));
            let mut tasks = vec![Task::St];
            if want_asr {
                tasks.push(Task::Asr);
            }
            if want_mt {
                tasks.push(Task::Mt);
            }
            for task in tasks {
                let mut g = Graph::new(store);
                let mut ctx = ForwardCtx::eval(seed);
                let out = self.model.forward_task(&mut g, &mut ctx, &batch, task, &opts)?;
                let loss = task_loss(&mut g, &self.model, &out, task)?;
                let grads = g.backward(loss)?;
                let atten = |p| module_vector(store, &grads, p, ParamKind::Atten);
                match task {
                    Task::St => {
                        st_a.push(atten(Partition::AEnc));
                        st_t.push(atten(Partition::TEnc));
                        st_d.push(atten(Partition::Decoder));
                    }
                    Task::Asr => asr_a.push(atten(Partition::AEnc)),
                    Task::Mt => {
                        mt_t.push(atten(Partition::TEnc));
                        mt_d.push(atten(Partition::Decoder));
                    }
                }
            }
        }
        Ok(ImpactSample {
            k,
            asr: if want_asr { Some(task_impact(&asr_a, &st_a)?) } else { None },
            mt_tenc: if want_mt { Some(task_impact(&mt_t, &st_t)?) } else { None },
            mt_dec: if want_mt { Some(task_impact(&mt_d, &st_d)?) } else { None },
        })
    }

    /// Fixed evaluation set drawn from its own seed stream.
    pub fn eval_batches(&self) -> Result<Vec<SyntheticBatch>> {
        let n = self.config.training.eval_samples;
        let bs = self.config.training.batch_size.max(1);
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let size = bs.min(n - start);
            let seeds: Vec<u64> = (start..start + size).map(|i| SeedStream::Eval.sample_seed(i as u64)).collect();
            out.push(self.corpus.batch(&seeds)?);
            start += size;
        }
        Ok(out)
    }

    pub fn evaluate(&self) -> Result<EvalResult> {
        let opts = self.forward_options(self.step.saturating_sub(1));
        let max_len = self.config.corpus.max_src_len + 2;
        let (mut hit, mut total, mut copy_hit) = (0, 0, 0);
        for batch in self.eval_batches()? {
            let hyps = self.model.greedy_decode(&batch, &opts, max_len)?;
            let (h, t) = token_accuracy((0..batch.batch_size).map(|b| (hyps[b].as_slice(), batch.tgt(b))));
            let (c, _) = token_accuracy((0..batch.batch_size).map(|b| (batch.src(b), batch.tgt(b))));
            hit += h;
            total += t;
            copy_hit += c;
        }
        Ok(EvalResult {
            accuracy: hit as f64 / total as f64,
            copy_baseline: copy_hit as f64 / total as f64,
            tokens: total,
        })
    }
}

/// Files of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.jsonl")
    }

    pub fn weights(&self) -> PathBuf {
        self.root.join("weights.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step:06}.ckpt"))
    }

    /// Checkpoints sorted by step.
    pub fn list_checkpoints(&self) -> Result<Vec<(u64, PathBuf)>> {
        let mut out = Vec::new();
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(step) = name
                .strip_prefix("step_")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                out.push((step, path));
            }
        }
        out.sort();
        Ok(out)
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        Ok(self.list_checkpoints()?.pop().map(|(_, p)| p))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    crate_version: String,
    seed: u64,
    corpus_seed: u64,
    model_seed: u64,
}

#[derive(Debug, Clone, Serialize)]
struct TimingRow {
    step: u64,
    seconds: f64,
}

/// Writes the weight history as `step,task,m,w`.
pub fn write_weight_history(path: &Path, weights: &TaskWeights) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["step", "task", "m", "w"]).map_err(|e| Error::Io(e.into()))?;
    for r in &weights.history {
        w.write_record([r.step.to_string(), r.task.as_str().to_string(), r.m.to_string(), r.w.to_string()])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Keeps only the JSON lines whose `step` is at most `max_step`.
fn truncate_jsonl(path: &Path, max_step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= max_step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: RunDir,
    pub steps: u64,
    pub eval: EvalResult,
    pub final_checkpoint: PathBuf,
    pub weights: TaskWeights,
}

/// Trains `config` into `out`, or continues from `resume`.
pub fn run(config: RunConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let dir = RunDir::new(out);
    fs::create_dir_all(dir.checkpoints())?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config != config {
                return Err(Error::Config("checkpoint was written with a different config".into()));
            }
            truncate_jsonl(&dir.metrics(), ckpt.step)?;
            truncate_jsonl(&dir.timing(), ckpt.step)?;
            Trainer::from_checkpoint(ckpt)?
        }
        None => {
            for p in [dir.metrics(), dir.timing()] {
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            Trainer::new(config.clone())?
        }
    };
    fs::write(dir.config(), config.to_json() + "\n")?;
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.training.seed,
        corpus_seed: config.corpus.seed,
        model_seed: config.model.seed,
    };
    fs::write(dir.manifest(), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let open = |p: PathBuf| OpenOptions::new().create(true).append(true).open(p);
    let mut metrics = open(dir.metrics())?;
    let mut timing = open(dir.timing())?;
    let t = config.training.clone();
    let mut last_ckpt: Option<PathBuf> = resume.map(Path::to_path_buf);
    let clock = Instant::now();
    while !trainer.is_done() {
        let mut row = match trainer.train_step() {
            Ok(r) => r,
            Err(Error::NonFinite { step, .. }) => {
                return Err(Error::NonFinite {
                    step,
                    last_checkpoint: last_ckpt,
                })
            }
            Err(e) => return Err(e),
        };
        let s = trainer.step();
        if s % t.eval_every == 0 || s == t.steps {
            row.st_accuracy = Some(trainer.evaluate()?.accuracy);
        }
        if s % t.log_every == 0 || s == t.steps {
            writeln!(metrics, "{}", serde_json::to_string(&row)?)?;
            let tr = TimingRow {
                step: s,
                seconds: clock.elapsed().as_secs_f64(),
            };
            writeln!(timing, "{}", serde_json::to_string(&tr)?)?;
        }
        if s % t.checkpoint_every == 0 || s == t.steps {
            let path = dir.checkpoint(s);
            trainer.checkpoint().save(&path)?;
            write_weight_history(&dir.weights(), trainer.weights())?;
            last_ckpt = Some(path);
        }
    }
    metrics.flush()?;
    let eval = trainer.evaluate()?;
    fs::write(dir.eval(), serde_json::to_string_pretty(&eval)? + "\n")?;
    write_weight_history(&dir.weights(), trainer.weights())?;
    let final_checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            let p = dir.checkpoint(trainer.step());
            trainer.checkpoint().save(&p)?;
            p
        }
    };
    Ok(RunSummary {
        dir,
        steps: trainer.step(),
        eval,
        final_checkpoint,
        weights: trainer.weights().clone(),
    })
}
