use std::fs;

use imtl::data::CorpusConfig;
use imtl::model::ModelConfig;
use imtl::train::{run, Checkpoint, RunConfig, Trainer};

fn tiny(steps: u64) -> RunConfig {
    let mut c = RunConfig {
        corpus: CorpusConfig {
            vocab_size: 6,
            max_src_len: 4,
            frame_dim: 6,
            ..CorpusConfig::default()
        },
        model: ModelConfig {
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            a_enc_layers: 1,
            t_enc_layers: 2,
            dec_layers: 1,
            l2g_base_kernel: 3,
            l2g_stride: 2,
            vocab_size: 6,
            frame_dim: 6,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    c.training.steps = steps;
    c.training.batch_size = 4;
    c.training.checkpoint_every = 5;
    c.training.eval_every = 5;
    c.training.eval_samples = 8;
    c.scheduler.k = 2;
    c.scheduler.update_every = 3;
    c
}

#[test]
fn smoke_run_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run(tiny(10), dir.path(), None).unwrap();
    assert_eq!(summary.steps, 10);
    let rows: Vec<serde_json::Value> = fs::read_to_string(dir.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r["total"].as_f64().unwrap().is_finite()));
    assert!(rows[4]["st_accuracy"].is_f64() && rows[3]["st_accuracy"].is_null());
    assert_eq!(summary.dir.list_checkpoints().unwrap().len(), 2);
    assert!((0.0..=1.0).contains(&summary.eval.accuracy));
    assert!(!summary.weights.history.is_empty());
}

#[test]
fn plain_st_has_no_auxiliary_terms() {
    let mut cfg = tiny(6);
    cfg.toggles.use_asr = false;
    cfg.toggles.use_mt = false;
    cfg.toggles.use_shrink = false;
    cfg.toggles.use_lbm = false;
    cfg.toggles.use_l2g = false;
    cfg.toggles.use_cl = false;
    let dir = tempfile::tempdir().unwrap();
    let summary = run(cfg, dir.path(), None).unwrap();
    assert!(summary.weights.history.is_empty());
    for line in fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap().lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["l_asr", "l_mt", "l_cl", "l_consistency", "length_ratio"] {
            assert!(r[k].is_null(), "{k} in {line}");
        }
        assert_eq!(r["total"], r["l_st"]);
    }
}

#[test]
fn trainer_resumes_bit_for_bit() {
    let mut a = Trainer::new(tiny(8)).unwrap();
    let mut straight = Vec::new();
    while !a.is_done() {
        straight.push(a.train_step().unwrap());
        if a.step() == 4 {
            let ckpt = a.checkpoint();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("mid.ckpt");
            ckpt.save(&p).unwrap();
            let mut b = Trainer::from_checkpoint(Checkpoint::load(&p).unwrap()).unwrap();
            let mut tail = Vec::new();
            while !b.is_done() {
                tail.push(b.train_step().unwrap());
            }
            while !a.is_done() {
                straight.push(a.train_step().unwrap());
            }
            assert_eq!(tail, straight[4..].to_vec());
            assert_eq!(b.checkpoint(), a.checkpoint());
        }
    }
}
