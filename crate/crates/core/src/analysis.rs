//! Gradient-consistency and attention-entropy measurements.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{alignment_runs, mix_seed, Corpus, SeedStream, SyntheticBatch};
use crate::error::{Error, Result};
use crate::model::{AsrVariant, ForwardCtx, ForwardOptions, Model, Task};
use crate::tensor::{Gradients, GroupKey, Graph, ParamKind, ParamStore, Partition};
use crate::train::{task_loss, Checkpoint, RunDir};

/// Concatenated gradient of every layer group of `kind` in `partition`,
/// zero where the gradient did not reach.
pub fn module_vector(store: &ParamStore, grads: &Gradients, partition: Partition, kind: ParamKind) -> Vec<f64> {
    let mut out = Vec::new();
    for group in store.groups() {
        if group.key.partition != partition || group.key.kind != kind || group.key.layer.is_none() {
            continue;
        }
        match grads.flatten_group(store, group) {
            Some(v) => out.extend(v),
            None => out.extend(group.params.iter().flat_map(|&p| vec![0.0; store.get(p).numel()])),
        }
    }
    out
}

/// Per-group, per-tensor gradients of one task on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSnapshot {
    pub task: Task,
    pub batch_id: u64,
    groups: BTreeMap<GroupKey, Vec<Vec<f64>>>,
}

impl GradSnapshot {
    pub fn from_groups(task: Task, batch_id: u64, groups: BTreeMap<GroupKey, Vec<Vec<f64>>>) -> Self {
        GradSnapshot { task, batch_id, groups }
    }

    pub fn keys(&self) -> impl Iterator<Item = &GroupKey> {
        self.groups.keys()
    }

    pub fn contains(&self, key: &GroupKey) -> bool {
        self.groups.contains_key(key)
    }

    /// Flattened gradient of one group.
    pub fn group(&self, key: &GroupKey) -> Option<Vec<f64>> {
        self.groups.get(key).map(|ts| ts.concat())
    }

    /// Every vector multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let groups = self
            .groups
            .iter()
            .map(|(k, ts)| (*k, ts.iter().map(|t| t.iter().map(|x| x * c).collect()).collect()))
            .collect();
        GradSnapshot {
            task: self.task,
            batch_id: self.batch_id,
            groups,
        }
    }

    /// `Σ c_i · snap_i`; a group is present if any input has it.
    pub fn weighted_sum(parts: &[(GradSnapshot, f64)]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to accumulate"))?;
        let mut groups: BTreeMap<GroupKey, Vec<Vec<f64>>> = BTreeMap::new();
        for (snap, c) in parts {
            for (k, ts) in &snap.groups {
                let acc = groups
                    .entry(*k)
                    .or_insert_with(|| ts.iter().map(|t| vec![0.0; t.len()]).collect());
                for (a, t) in acc.iter_mut().zip(ts) {
                    for (x, y) in a.iter_mut().zip(t) {
                        *x += c * y;
                    }
                }
            }
        }
        Ok(GradSnapshot {
            task: first.0.task,
            batch_id: first.0.batch_id,
            groups,
        })
    }
}

/// Gradient of `task`'s unweighted loss on `batch` with dropout off. Groups
/// the task never reaches are absent from the snapshot.
pub fn capture_gradients(
    model: &Model,
    batch: &SyntheticBatch,
    batch_id: u64,
    task: Task,
    opts: &ForwardOptions,
    seed: u64,
) -> Result<GradSnapshot> {
    let store = model.store();
    let wrap = |e: Error| Error::invalid(format!("{} gradient capture failed: {e}", task.as_str()));
    let mut g = Graph::new(store);
    let mut ctx = ForwardCtx::eval(seed);
    let out = model.forward_task(&mut g, &mut ctx, batch, task, opts).map_err(wrap)?;
    let loss = task_loss(&mut g, model, &out, task).map_err(wrap)?;
    let grads = g.backward(loss).map_err(wrap)?;
    let mut groups = BTreeMap::new();
    for group in store.groups() {
        if !grads.touches(group) {
            continue;
        }
        let ts = group
            .params
            .iter()
            .map(|&p| grads.param(p).map_or_else(|| vec![0.0; store.get(p).numel()], <[f64]>::to_vec))
            .collect();
        groups.insert(group.key, ts);
    }
    Ok(GradSnapshot { task, batch_id, groups })
}

/// Exact for identical inputs: `sqrt(x·x)` is `|x|` in IEEE arithmetic.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    let den = if aa == bb { aa } else { (aa * bb).sqrt() };
    (dot / den).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupFilter {
    pub partitions: Vec<Partition>,
    pub kinds: Vec<ParamKind>,
}

impl Default for GroupFilter {
    fn default() -> Self {
        GroupFilter {
            partitions: Partition::ALL.to_vec(),
            kinds: vec![ParamKind::Atten, ParamKind::Ffn],
        }
    }
}

impl GroupFilter {
    pub fn new(partitions: &[Partition], kinds: &[ParamKind]) -> Self {
        GroupFilter {
            partitions: partitions.to_vec(),
            kinds: kinds.to_vec(),
        }
    }

    pub fn accepts(&self, key: &GroupKey) -> bool {
        key.layer.is_some() && self.partitions.contains(&key.partition) && self.kinds.contains(&key.kind)
    }
}

/// How several weight matrices combine into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// One cosine over the concatenation of every matrix.
    #[default]
    Concat,
    /// Mean of per-matrix cosines.
    PerMatrixMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub partition: Partition,
    pub kind: ParamKind,
    pub layer: Option<usize>,
    pub cosine: f64,
}

/// Cosine between two snapshots per (partition, kind), or per layer too.
pub fn grad_consistency(
    a: &GradSnapshot,
    b: &GradSnapshot,
    filter: &GroupFilter,
    per_layer: bool,
    agg: Aggregation,
) -> Result<Vec<CosineRow>> {
    let mut buckets: BTreeMap<(Partition, ParamKind, Option<usize>), Vec<GroupKey>> = BTreeMap::new();
    for key in a.keys().filter(|k| filter.accepts(k) && b.contains(k)) {
        let layer = if per_layer { key.layer } else { None };
        buckets.entry((key.partition, key.kind, layer)).or_default().push(*key);
    }
    if buckets.is_empty() {
        return Err(Error::invalid("tasks share no parameters under filter"));
    }
    let mut rows = Vec::with_capacity(buckets.len());
    for ((partition, kind, layer), keys) in buckets {
        let cosine = match agg {
            Aggregation::Concat => {
                let va: Vec<f64> = keys.iter().flat_map(|k| a.groups[k].concat()).collect();
                let vb: Vec<f64> = keys.iter().flat_map(|k| b.groups[k].concat()).collect();
                cosine(&va, &vb)
            }
            Aggregation::PerMatrixMean => {
                let pairs: Vec<f64> = keys
                    .iter()
                    .flat_map(|k| a.groups[k].iter().zip(&b.groups[k]).map(|(x, y)| cosine(x, y)))
                    .collect();
                pairs.iter().sum::<f64>() / pairs.len() as f64
            }
        };
        rows.push(CosineRow {
            partition,
            kind,
            layer,
            cosine,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Probe samples per repeat.
    pub n: usize,
    pub repeats: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Draw from a finite pool of this many samples instead of fresh ones.
    pub pool: Option<u64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n: 200,
            repeats: 5,
            batch_size: 50,
            seed: 0,
            pool: None,
        }
    }
}

impl ProtocolConfig {
    /// Corpus indices of repeat `r`, ascending.
    pub fn indices(&self, r: usize) -> Result<Vec<u64>> {
        if self.n == 0 || self.repeats == 0 || self.batch_size == 0 {
            return Err(Error::invalid("protocol n, repeats and batch_size must be positive"));
        }
        match self.pool {
            Some(p) if (p as usize) < self.n => Err(Error::invalid(format!("corpus of {p} samples is smaller than n = {}", self.n))),
            Some(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, r as u64));
                let mut v: Vec<u64> = sample(&mut rng, p as usize, self.n).into_iter().map(|i| i as u64).collect();
                v.sort_unstable();
                Ok(v)
            }
            None => Ok((0..self.n as u64).map(|i| (r * self.n) as u64 + i).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub partition: Partition,
    pub kind: ParamKind,
    pub layer: Option<usize>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub tasks: (Task, Task),
    pub n: usize,
    pub repeats: usize,
    pub rows: Vec<ReportRow>,
}

impl ConsistencyReport {
    pub fn find(&self, partition: Partition, kind: ParamKind, layer: Option<usize>) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.partition == partition && r.kind == kind && r.layer == layer)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["partition", "kind", "layer", "mean", "std"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.partition.as_str().to_string(),
                r.kind.as_str().to_string(),
                r.layer.map_or_else(|| "-".to_string(), |l| l.to_string()),
                r.mean.to_string(),
                r.std.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.iter().all(|x| *x == v[0]) {
        return (v[0], 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Both tasks' full-probe-set gradient for one repeat.
fn probe_pair(
    model: &Model,
    corpus: &Corpus,
    cfg: &ProtocolConfig,
    r: usize,
    tasks: (Task, Task),
    opts: (&ForwardOptions, &ForwardOptions),
) -> Result<(GradSnapshot, GradSnapshot)> {
    let idx = cfg.indices(r)?;
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    for chunk in idx.chunks(cfg.batch_size) {
        let seeds: Vec<u64> = chunk
            .iter()
            .map(|&i| SeedStream::Analysis.sample_seed(mix_seed(cfg.seed, i)))
            .collect();
        let batch = corpus.batch(&seeds)?;
        let w = chunk.len() as f64 / idx.len() as f64;
        let seed = mix_seed(cfg.seed, chunk[0]);
        pa.push((capture_gradients(model, &batch, chunk[0], tasks.0, opts.0, seed)?, w));
        pb.push((capture_gradients(model, &batch, chunk[0], tasks.1, opts.1, seed)?, w));
    }
    Ok((GradSnapshot::weighted_sum(&pa)?, GradSnapshot::weighted_sum(&pb)?))
}

/// Repeated consistency measurement between two tasks. `opts` apply to
/// the first and second task respectively.
#[allow(clippy::too_many_arguments)]
pub fn consistency_protocol(
    model: &Model,
    corpus: &Corpus,
    cfg: &ProtocolConfig,
    tasks: (Task, Task),
    opts: (&ForwardOptions, &ForwardOptions),
    filter: &GroupFilter,
    per_layer: bool,
    agg: Aggregation,
) -> Result<ConsistencyReport> {
    let mut acc: BTreeMap<(Partition, ParamKind, Option<usize>), Vec<f64>> = BTreeMap::new();
    for r in 0..cfg.repeats.max(1) {
        let (a, b) = probe_pair(model, corpus, cfg, r, tasks, opts)?;
        for row in grad_consistency(&a, &b, filter, per_layer, agg)? {
            acc.entry((row.partition, row.kind, row.layer)).or_default().push(row.cosine);
        }
    }
    let rows = acc
        .into_iter()
        .map(|((partition, kind, layer), values)| {
            let (mean, std) = mean_std(&values);
            ReportRow {
                partition,
                kind,
                layer,
                values,
                mean,
                std,
            }
        })
        .collect();
    Ok(ConsistencyReport {
        tasks,
        n: cfg.n,
        repeats: cfg.repeats,
        rows,
    })
}

/// Shannon entropy in bits with `0·log 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.log2()).sum::<f64>()
}

/// Mean entropy of `weights[B·H, Lq, Lk]` over heads, valid queries and the
/// batch; rows are restricted to valid keys and renormalized.
pub fn attention_entropy(weights: &[f64], shape: [usize; 3], heads: usize, q_lens: &[usize], k_lens: &[usize]) -> Result<f64> {
    let [groups, lq, lk] = shape;
    if weights.len() != groups * lq * lk || heads == 0 || groups != q_lens.len() * heads || q_lens.len() != k_lens.len() {
        return Err(Error::shape("attention_entropy", format!("{} weights for {shape:?}", weights.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for gi in 0..groups {
        let b = gi / heads;
        for q in 0..q_lens[b].min(lq) {
            let row = &weights[(gi * lq + q) * lk..(gi * lq + q + 1) * lk];
            let valid = &row[..k_lens[b].min(lk)];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("attention row sums to {sum}, not 1")));
            }
            let vs: f64 = valid.iter().sum();
            let normed: Vec<f64> = valid.iter().map(|p| p / vs).collect();
            total += row_entropy(&normed);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no valid attention rows"));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub layer: usize,
    pub stream: String,
    pub ie: f64,
}

/// Per-layer self-attention entropy of the textual encoder for the speech
/// stream (as configured by `opts`) and the text stream.
pub fn entropy_report(model: &Model, batch: &SyntheticBatch, opts: &ForwardOptions, speech_label: &str, seed: u64) -> Result<Vec<EntropyRow>> {
    let heads = model.config().n_heads;
    let mut rows = Vec::new();
    for task in [Task::St, Task::Mt] {
        let mut g = Graph::new(model.store());
        let mut ctx = ForwardCtx::eval(seed);
        let out = model.forward_task(&mut g, &mut ctx, batch, task, opts)?;
        let (enc, label) = match task {
            Task::St => (out.speech_enc.expect("speech encoder"), speech_label),
            _ => (out.mt.expect("text encoder").t_enc, "MT"),
        };
        for (layer, &w) in enc.attn_weights.iter().enumerate() {
            let s = g.shape(w);
            let ie = attention_entropy(g.value(w), [s[0], s[1], s[2]], heads, &enc.lens, &enc.lens)?;
            rows.push(EntropyRow {
                layer,
                stream: label.to_string(),
                ie,
            });
        }
    }
    Ok(rows)
}

pub fn write_entropy_csv(path: &Path, rows: &[EntropyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["layer", "stream", "IE"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.layer.to_string(), r.stream.clone(), r.ie.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the model and corpus a checkpoint was trained with.
pub fn load_model(ckpt: &Checkpoint) -> Result<(Model, Corpus)> {
    let mut model = Model::new(ckpt.config.model.clone())?;
    model.store_mut().load_flat_values(&ckpt.params)?;
    Ok((model, Corpus::new(ckpt.config.corpus.clone())?))
}

/// Options matching the end state of training for the checkpoint's config.
pub fn analysis_options(ckpt: &Checkpoint, variant: AsrVariant) -> ForwardOptions {
    let t = &ckpt.config.toggles;
    ForwardOptions {
        shrink: ckpt.config.shrink_active(ckpt.step.saturating_sub(1)),
        lbm: t.use_lbm,
        l2g: t.use_l2g,
        text_noise: if t.use_l2g { t.text_noise } else { 0.0 },
        asr_variant: variant,
        clean_text: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub step: u64,
    pub pair: String,
    pub partition: Partition,
    pub kind: ParamKind,
    pub mean: f64,
}

/// Module-level consistency at every checkpoint, in step order. Unreadable
/// checkpoints are skipped and reported in the returned warnings.
pub fn consistency_over_training(
    checkpoints: &[(u64, PathBuf)],
    pairs: &[(Task, Task)],
    cfg: &ProtocolConfig,
    filter: &GroupFilter,
) -> Result<(Vec<SeriesRow>, Vec<String>)> {
    let mut sorted = checkpoints.to_vec();
    sorted.sort();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (step, path) in sorted {
        let ckpt = match Checkpoint::load(&path) {
            Ok(c) => c,
            Err(e) => {
                warnings.push(format!("skipping step {step}: {e}"));
                continue;
            }
        };
        let (model, corpus) = load_model(&ckpt)?;
        let opts = analysis_options(&ckpt, ckpt.config.toggles.asr_variant);
        for &(a, b) in pairs {
            let rep = consistency_protocol(&model, &corpus, cfg, (a, b), (&opts, &opts), filter, false, Aggregation::Concat)?;
            for r in rep.rows {
                rows.push(SeriesRow {
                    step,
                    pair: format!("{}-{}", a.as_str(), b.as_str()),
                    partition: r.partition,
                    kind: r.kind,
                    mean: r.mean,
                });
            }
        }
    }
    Ok((rows, warnings))
}

pub fn write_series_csv(path: &Path, rows: &[SeriesRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "pair", "partition", "kind", "mean"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.pair.clone(),
            r.partition.as_str().to_string(),
            r.kind.as_str().to_string(),
            r.mean.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRow {
    pub step: u64,
    pub batch: usize,
    pub n_mean: f64,
    pub m_mean: f64,
    pub ratio: f64,
}

/// Run-length count of the generator alignments over their frame count.
pub fn oracle_ratio(batches: &[SyntheticBatch]) -> f64 {
    let (mut runs, mut frames) = (0usize, 0usize);
    for b in batches {
        for a in &b.alignments {
            runs += alignment_runs(a);
            frames += a.len();
        }
    }
    runs as f64 / frames as f64
}

/// Shrunk-to-original length statistics of the ST path, one row per batch.
pub fn shrink_eval(model: &Model, batches: &[SyntheticBatch], step: u64, lbm: bool) -> Result<Vec<ShrinkRow>> {
    let opts = ForwardOptions {
        shrink: true,
        lbm,
        ..ForwardOptions::default()
    };
    let mut rows = Vec::with_capacity(batches.len());
    for (i, batch) in batches.iter().enumerate() {
        let mut g = Graph::new(model.store());
        let mut ctx = ForwardCtx::eval(0);
        let out = model.forward_task(&mut g, &mut ctx, batch, Task::St, &opts)?;
        let sh = out.shrink.ok_or_else(|| Error::invalid("shrinking produced no output"))?;
        let n: usize = batch.speech_lens.iter().sum();
        let m: usize = sh.lens.iter().sum();
        let bsz = batch.batch_size as f64;
        rows.push(ShrinkRow {
            step,
            batch: i,
            n_mean: n as f64 / bsz,
            m_mean: m as f64 / bsz,
            ratio: sh.length_ratio,
        });
    }
    Ok(rows)
}

pub fn write_shrink_csv(path: &Path, rows: &[ShrinkRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "batch", "n_mean", "m_mean", "ratio"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.batch.to_string(),
            r.n_mean.to_string(),
            r.m_mean.to_string(),
            r.ratio.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    ModulesBar,
    PerLayer,
    AsrVariants,
    ShrinkCl,
    OverTraining,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::ModulesBar,
        Preset::PerLayer,
        Preset::AsrVariants,
        Preset::ShrinkCl,
        Preset::OverTraining,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::ModulesBar => "modules-bar",
            Preset::PerLayer => "per-layer",
            Preset::AsrVariants => "asr-variants",
            Preset::ShrinkCl => "shrink-cl",
            Preset::OverTraining => "over-training",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

/// Runs a preset against a run directory, writing CSV reports into `out`.
/// Returns the files written.
pub fn run_preset(preset: Preset, run: &RunDir, out: &Path, cfg: &ProtocolConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let latest = run
        .latest_checkpoint()?
        .ok_or_else(|| Error::Config(format!("no checkpoints under {}", run.root.display())))?;
    let ckpt = Checkpoint::load(&latest)?;
    let (model, corpus) = load_model(&ckpt)?;
    let base = analysis_options(&ckpt, AsrVariant::Ctc);
    let mut written = Vec::new();
    let mut emit = |name: String, rep: ConsistencyReport| -> Result<()> {
        let p = out.join(name);
        rep.write_csv(&p)?;
        written.push(p);
        Ok(())
    };
    match preset {
        Preset::ModulesBar => {
            let variant = ckpt.config.toggles.asr_variant;
            let asr = analysis_options(&ckpt, variant);
            let all = GroupFilter::default();
            let r = consistency_protocol(&model, &corpus, cfg, (Task::Asr, Task::St), (&asr, &base), &all, false, Aggregation::Concat)?;
            emit("consistency_ASR-ST.csv".into(), r)?;
            let r = consistency_protocol(&model, &corpus, cfg, (Task::Mt, Task::St), (&base, &base), &all, false, Aggregation::Concat)?;
            emit("consistency_MT-ST.csv".into(), r)?;
        }
        Preset::PerLayer => {
            let f = GroupFilter::new(&[Partition::TEnc], &[ParamKind::Atten]);
            let ce = analysis_options(&ckpt, AsrVariant::Ce);
            let r = consistency_protocol(&model, &corpus, cfg, (Task::Asr, Task::St), (&ce, &base), &f, true, Aggregation::Concat)?;
            emit("per_layer_ASR-ST.csv".into(), r)?;
            let r = consistency_protocol(&model, &corpus, cfg, (Task::Mt, Task::St), (&base, &base), &f, true, Aggregation::Concat)?;
            emit("per_layer_MT-ST.csv".into(), r)?;
        }
        Preset::AsrVariants => {
            let all = GroupFilter::default();
            for (variant, label) in [(AsrVariant::Ctc, "ctc"), (AsrVariant::Ce, "ce")] {
                let o = analysis_options(&ckpt, variant);
                let r = consistency_protocol(&model, &corpus, cfg, (Task::Asr, Task::St), (&o, &base), &all, false, Aggregation::Concat)?;
                emit(format!("consistency_ASR-{label}-ST.csv"), r)?;
            }
        }
        Preset::ShrinkCl => {
            let f = GroupFilter::new(&[Partition::TEnc], &[ParamKind::Atten]);
            let unshrunk = ForwardOptions { shrink: false, ..base };
            let shrunk = ForwardOptions { shrink: true, ..base };
            for (label, o) in [("shrink", &shrunk), ("noshrink", &unshrunk)] {
                let r = consistency_protocol(&model, &corpus, cfg, (Task::Mt, Task::St), (o, o), &f, true, Aggregation::Concat)?;
                emit(format!("per_layer_MT-ST_{label}.csv"), r)?;
            }
            let seeds: Vec<u64> = (0..cfg.batch_size as u64)
                .map(|i| SeedStream::Analysis.sample_seed(mix_seed(cfg.seed, i)))
                .collect();
            let batch = corpus.batch(&seeds)?;
            let mut rows = entropy_report(&model, &batch, &shrunk, "ST", cfg.seed)?;
            rows.retain(|r| r.stream == "ST" || r.stream == "MT");
            let mut plain = entropy_report(&model, &batch, &unshrunk, "ST-noshrink", cfg.seed)?;
            plain.retain(|r| r.stream == "ST-noshrink");
            rows.extend(plain);
            let p = out.join("entropy.csv");
            write_entropy_csv(&p, &rows)?;
            written.push(p);
        }
        Preset::OverTraining => {
            let cks = run.list_checkpoints()?;
            let f = GroupFilter::default();
            let (rows, _warnings) = consistency_over_training(&cks, &[(Task::Asr, Task::St), (Task::Mt, Task::St)], cfg, &f)?;
            let p = out.join("over_training.csv");
            write_series_csv(&p, &rows)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusConfig;
    use crate::model::ModelConfig;

    fn tiny() -> (Model, Corpus) {
        let corpus = Corpus::new(CorpusConfig {
            vocab_size: 6,
            max_src_len: 4,
            frame_dim: 5,
            ..CorpusConfig::default()
        })
        .unwrap();
        let model = Model::new(ModelConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 12,
            a_enc_layers: 1,
            t_enc_layers: 2,
            dec_layers: 1,
            dropout: 0.0,
            vocab_size: 6,
            frame_dim: 5,
            ..ModelConfig::default()
        })
        .unwrap();
        (model, corpus)
    }

    #[test]
    fn uniform_and_one_hot_rows() {
        for n in [1usize, 2, 5, 17] {
            let row = vec![1.0 / n as f64; n];
            assert!((row_entropy(&row) - (n as f64).log2()).abs() < 1e-9);
        }
        assert_eq!(row_entropy(&[0.0, 1.0, 0.0]), 0.0);
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let w = [0.5, 0.4];
        assert!(attention_entropy(&w, [1, 1, 2], 1, &[1], &[2]).is_err());
    }

    #[test]
    fn padding_keys_are_excluded() {
        // two valid keys out of four, uniform over them
        let w = [0.5, 0.5, 0.0, 0.0];
        let ie = attention_entropy(&w, [1, 1, 4], 1, &[1], &[2]).unwrap();
        assert!((ie - 1.0).abs() < 1e-12);
    }

    #[test]
    fn snapshots_isolate_paths_and_repeat_exactly() {
        let (model, corpus) = tiny();
        let batch = corpus.batch(&[1, 2, 3]).unwrap();
        let opts = ForwardOptions::default();
        let asr = capture_gradients(&model, &batch, 0, Task::Asr, &opts, 5).unwrap();
        assert!(asr.keys().all(|k| k.partition == Partition::AEnc));
        let mt = capture_gradients(&model, &batch, 0, Task::Mt, &opts, 5).unwrap();
        assert!(mt.keys().all(|k| k.partition != Partition::AEnc));
        assert!(mt.keys().any(|k| k.partition == Partition::Decoder));
        let again = capture_gradients(&model, &batch, 0, Task::Mt, &opts, 5).unwrap();
        assert_eq!(mt, again);
    }

    #[test]
    fn self_negation_and_scale() {
        let (model, corpus) = tiny();
        let batch = corpus.batch(&[4, 5]).unwrap();
        let opts = ForwardOptions::default();
        let st = capture_gradients(&model, &batch, 0, Task::St, &opts, 1).unwrap();
        let f = GroupFilter::default();
        for per_layer in [false, true] {
            for agg in [Aggregation::Concat, Aggregation::PerMatrixMean] {
                for r in grad_consistency(&st, &st, &f, per_layer, agg).unwrap() {
                    assert_eq!(r.cosine, 1.0, "{r:?}");
                }
                for r in grad_consistency(&st, &st.scaled(-1.0), &f, per_layer, agg).unwrap() {
                    assert_eq!(r.cosine, -1.0);
                }
            }
        }
        let mt = capture_gradients(&model, &batch, 0, Task::Mt, &opts, 1).unwrap();
        let a = grad_consistency(&mt, &st, &f, false, Aggregation::Concat).unwrap();
        let b = grad_consistency(&mt.scaled(3.5), &st, &f, false, Aggregation::Concat).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.cosine - y.cosine).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&x.cosine));
        }
        let asr = capture_gradients(&model, &batch, 0, Task::Asr, &opts, 1).unwrap();
        let err = grad_consistency(&asr, &mt, &f, false, Aggregation::Concat).unwrap_err();
        assert!(err.to_string().contains("share no parameters"));
    }

    #[test]
    fn protocol_averages_repeats() {
        let (model, corpus) = tiny();
        let opts = ForwardOptions::default();
        let f = GroupFilter::default();
        let cfg = ProtocolConfig {
            n: 4,
            repeats: 3,
            batch_size: 2,
            seed: 9,
            pool: None,
        };
        let rep = consistency_protocol(&model, &corpus, &cfg, (Task::Mt, Task::St), (&opts, &opts), &f, false, Aggregation::Concat).unwrap();
        for r in &rep.rows {
            assert_eq!(r.values.len(), 3);
            let m = r.values.iter().sum::<f64>() / 3.0;
            assert!((m - r.mean).abs() < 1e-12);
        }
        // a pool of exactly n pins every repeat to the same samples
        let fixed = ProtocolConfig {
            pool: Some(4),
            ..cfg.clone()
        };
        let rep = consistency_protocol(&model, &corpus, &fixed, (Task::Mt, Task::St), (&opts, &opts), &f, false, Aggregation::Concat).unwrap();
        assert!(rep.rows.iter().all(|r| r.std == 0.0));
        let small = ProtocolConfig { pool: Some(3), ..cfg };
        assert!(small.indices(0).is_err());
    }

    #[test]
    fn single_repeat_is_one_comparison() {
        let (model, corpus) = tiny();
        let opts = ForwardOptions::default();
        let f = GroupFilter::default();
        let cfg = ProtocolConfig {
            n: 2,
            repeats: 1,
            batch_size: 2,
            seed: 3,
            pool: None,
        };
        let rep = consistency_protocol(&model, &corpus, &cfg, (Task::Mt, Task::St), (&opts, &opts), &f, false, Aggregation::Concat).unwrap();
        let seeds: Vec<u64> = (0..2).map(|i| SeedStream::Analysis.sample_seed(mix_seed(3, i))).collect();
        let batch = corpus.batch(&seeds).unwrap();
        let seed = mix_seed(3, 0);
        let a = capture_gradients(&model, &batch, 0, Task::Mt, &opts, seed).unwrap();
        let b = capture_gradients(&model, &batch, 0, Task::St, &opts, seed).unwrap();
        let direct = grad_consistency(&a, &b, &f, false, Aggregation::Concat).unwrap();
        for (r, d) in rep.rows.iter().zip(&direct) {
            assert!((r.mean - d.cosine).abs() < 1e-12);
            assert_eq!(r.std, 0.0);
        }
    }
}
