//! Training objectives.

use crate::data::BLANK;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Temperature of the contrastive loss.
pub const DEFAULT_TAU: f64 = 0.1;
/// Weight of the contrastive term in the total.
pub const DEFAULT_W_C: f64 = 0.3;

/// Mean negative log-likelihood over non-pad positions.
///
/// `logits[..., V]` with `targets` flattened to match the leading axes.
pub fn ce_loss(g: &mut Graph, logits: NodeId, targets: &[usize], pad_id: usize) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let v = *shape.last().unwrap_or(&0);
    let rows: usize = shape[..shape.len().saturating_sub(1)].iter().product();
    if v == 0 || rows != targets.len() {
        return Err(Error::shape("ce_loss", format!("logits {shape:?} for {} targets", targets.len())));
    }
    let idx: Vec<Option<usize>> = targets.iter().map(|&t| (t != pad_id).then_some(t)).collect();
    let count = idx.iter().flatten().count();
    if count == 0 {
        return Err(Error::invalid("ce_loss over an all-pad batch"));
    }
    if let Some(bad) = idx.iter().flatten().find(|&&t| t >= v) {
        return Err(Error::shape("ce_loss", format!("target {bad} outside {v} classes")));
    }
    let flat = g.reshape(logits, &[rows, v])?;
    let lp = g.log_softmax(flat)?;
    let picked = g.pick(lp, &idx)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / count as f64))
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames a target needs: one per label plus a separator between repeats.
pub fn ctc_required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `−log p(target | log_probs)` for one sequence `log_probs[T, C]` together
/// with its gradient with respect to every entry of `log_probs`.
pub fn ctc_nll(log_probs: &[f64], classes: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if classes < 2 || log_probs.len() % classes != 0 {
        return Err(Error::shape("ctc_loss", format!("{} values for {classes} classes", log_probs.len())));
    }
    let t_len = log_probs.len() / classes;
    if let Some(bad) = target.iter().find(|&&k| k == BLANK || k >= classes) {
        return Err(Error::invalid(format!("CTC target label {bad} outside 1..{classes}")));
    }
    let required = ctc_required_frames(target);
    if t_len < required || t_len == 0 {
        return Err(Error::CtcInfeasible {
            frames: t_len,
            required: required.max(1),
        });
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { BLANK } else { target[s / 2] };
    let skip_ok = |s: usize| s >= 2 && s % 2 == 1 && target[s / 2] != target[s / 2 - 1];
    let lp = |t: usize, k: usize| log_probs[t * classes + k];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp(0, label(0));
    if s_len > 1 {
        alpha[1] = lp(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = lse2(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = lse2(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = a + lp(t, label(s));
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Err(Error::invalid("CTC path probability underflowed to zero"));
    }

    let mut beta = vec![ninf; t_len * s_len];
    let tl = t_len - 1;
    beta[tl * s_len + s_len - 1] = lp(tl, label(s_len - 1));
    if s_len > 1 {
        beta[tl * s_len + s_len - 2] = lp(tl, label(s_len - 2));
    }
    for t in (0..tl).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = lse2(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = lse2(b, next[s + 2]);
            }
            beta[t * s_len + s] = b + lp(t, label(s));
        }
    }

    let mut grad = vec![0.0; log_probs.len()];
    let mut acc = vec![ninf; classes];
    for t in 0..t_len {
        acc.iter_mut().for_each(|a| *a = ninf);
        for s in 0..s_len {
            let k = label(s);
            acc[k] = lse2(acc[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        for k in 0..classes {
            if acc[k] > ninf {
                grad[t * classes + k] = -(acc[k] - lp(t, k) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// Batched CTC over `log_probs[B, T, C]`: each sequence's loss is divided by
/// its target length (at least 1) and the batch mean is returned.
pub fn ctc_loss(g: &mut Graph, log_probs: NodeId, lens: &[usize], targets: &[Vec<usize>]) -> Result<NodeId> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 3 || lens.len() != shape[0] || targets.len() != shape[0] || shape[0] == 0 {
        return Err(Error::shape(
            "ctc_loss",
            format!("log-probs {shape:?}, {} lengths, {} targets", lens.len(), targets.len()),
        ));
    }
    let (bsz, t_max, c) = (shape[0], shape[1], shape[2]);
    let mut values = Vec::with_capacity(bsz);
    let mut grads = Vec::with_capacity(bsz);
    {
        let lp = g.value(log_probs);
        for b in 0..bsz {
            if lens[b] > t_max {
                return Err(Error::shape("ctc_loss", format!("length {} for {t_max} frames", lens[b])));
            }
            let off = b * t_max * c;
            let (nll, grad) = ctc_nll(&lp[off..off + lens[b] * c], c, &targets[b])?;
            values.push(nll);
            grads.push((off, grad));
        }
    }
    let per = g.custom(log_probs, values, grads)?;
    let weights: Vec<f64> = targets
        .iter()
        .map(|t| 1.0 / (t.len().max(1) * bsz) as f64)
        .collect();
    let w = g.constant(Tensor::new(vec![bsz], weights)?);
    let weighted = g.mul(per, w)?;
    Ok(g.sum(weighted))
}

/// Contrastive alignment between mean-pooled speech and text sequences.
///
/// Row `i` scores `−log(exp(s_ii) / Σ_{j≠i} exp(s_ij))` with `s` the cosine
/// similarity over `tau`; the positive pair is not in the denominator.
pub fn contrastive_loss(
    g: &mut Graph,
    speech: NodeId,
    speech_lens: &[usize],
    text: NodeId,
    text_lens: &[usize],
    tau: f64,
) -> Result<NodeId> {
    let bsz = g.shape(speech)[0];
    if g.shape(text)[0] != bsz {
        return Err(Error::shape(
            "contrastive_loss",
            format!("speech {:?} vs text {:?}", g.shape(speech), g.shape(text)),
        ));
    }
    if bsz < 2 {
        return Err(Error::invalid("contrastive loss undefined without negatives"));
    }
    if tau <= 0.0 {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let u = g.mean_pool(speech, speech_lens)?;
    let u = g.l2_normalize_rows(u)?;
    let v = g.mean_pool(text, text_lens)?;
    let v = g.l2_normalize_rows(v)?;
    let vt = g.permute(v, &[1, 0])?;
    let sim = g.matmul(u, vt)?;
    let sim = g.scale(sim, 1.0 / tau);
    let diag: Vec<Option<usize>> = (0..bsz).map(Some).collect();
    let pos = g.pick(sim, &diag)?;
    let off_diag: Vec<bool> = (0..bsz * bsz).map(|k| k / bsz != k % bsz).collect();
    let neg = g.log_sum_exp(sim, Some(&off_diag))?;
    let per = g.sub(neg, pos)?;
    g.mean(per)
}

/// Mean squared distance between parameter-free layer norms of each
/// extractor output and the matching attention-sublayer output, over valid
/// positions and channels, averaged across layers.
pub fn consistency_loss(g: &mut Graph, extractor_outs: &[NodeId], attention_outs: &[NodeId], lens: &[usize]) -> Result<NodeId> {
    if extractor_outs.len() != attention_outs.len() || extractor_outs.is_empty() {
        return Err(Error::invalid(format!(
            "consistency loss needs matching layers, got {} extractor and {} attention outputs",
            extractor_outs.len(),
            attention_outs.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&e, &a) in extractor_outs.iter().zip(attention_outs) {
        let shape = g.shape(e).to_vec();
        if g.shape(a) != shape.as_slice() || shape.len() != 3 || shape[0] != lens.len() {
            return Err(Error::shape(
                "consistency_loss",
                format!("{shape:?} vs {:?} with {} lengths", g.shape(a), lens.len()),
            ));
        }
        let (l_max, d) = (shape[1], shape[2]);
        let valid: usize = lens.iter().sum::<usize>() * d;
        if valid == 0 || lens.iter().any(|&l| l > l_max) {
            return Err(Error::shape("consistency_loss", format!("lengths {lens:?} for {l_max} positions")));
        }
        let mask = Tensor::from_fn(&shape, |i| {
            let (b, t) = (i / (l_max * d), (i / d) % l_max);
            if t < lens[b] {
                1.0
            } else {
                0.0
            }
        });
        let ne = g.layer_norm(e, None, None)?;
        let na = g.layer_norm(a, None, None)?;
        let diff = g.sub(ne, na)?;
        let m = g.constant(mask);
        let diff = g.mul(diff, m)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq);
        let term = g.scale(s, 1.0 / (valid * extractor_outs.len()) as f64);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Loss components as graph nodes; absent terms were not computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub st: Option<NodeId>,
    pub asr: Option<NodeId>,
    pub mt: Option<NodeId>,
    pub cl: Option<NodeId>,
    pub consistency: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub asr: f64,
    pub mt: f64,
    pub cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            asr: 1.0,
            mt: 1.0,
            cl: DEFAULT_W_C,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossBundle {
    pub total: NodeId,
    pub weights: LossWeights,
    pub l_st: f64,
    pub l_asr: Option<f64>,
    pub l_mt: Option<f64>,
    pub l_cl: Option<f64>,
    pub l_consistency: Option<f64>,
    pub l_total: f64,
}

/// `l_st + w_a·l_asr + w_m·l_mt + w_c·l_cl + l_consistency`.
pub fn total_loss(g: &mut Graph, parts: &LossComponents, weights: LossWeights) -> Result<LossBundle> {
    for (name, w) in [("ASR", weights.asr), ("MT", weights.mt), ("contrastive", weights.cl)] {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::invalid(format!("{name} weight {w} must be finite and non-negative")));
        }
    }
    let st = parts.st.ok_or_else(|| Error::invalid("total loss needs the ST term"))?;
    let mut total = st;
    for (node, w) in [
        (parts.asr, weights.asr),
        (parts.mt, weights.mt),
        (parts.cl, weights.cl),
        (parts.consistency, 1.0),
    ] {
        if let Some(n) = node {
            let scaled = g.scale(n, w);
            total = g.add(total, scaled)?;
        }
    }
    let val = |g: &Graph, n: Option<NodeId>| n.map(|n| g.scalar(n));
    Ok(LossBundle {
        total,
        weights,
        l_st: g.scalar(st),
        l_asr: val(g, parts.asr),
        l_mt: val(g, parts.mt),
        l_cl: val(g, parts.cl),
        l_consistency: val(g, parts.consistency),
        l_total: g.scalar(total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStoreBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty_store() -> crate::tensor::ParamStore {
        ParamStoreBuilder::new().build().unwrap()
    }

    fn log_softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
        x.chunks(c)
            .flat_map(|r| {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                r.iter().map(move |v| v - z).collect::<Vec<_>>()
            })
            .collect()
    }

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in path {
            if Some(k) != prev && k != BLANK {
                out.push(k);
            }
            prev = Some(k);
        }
        out
    }

    /// Sums the probability of every length-T path that collapses to `target`.
    fn brute_force(lp: &[f64], c: usize, target: &[usize]) -> (f64, usize) {
        let t_len = lp.len() / c;
        let mut total = 0.0;
        let mut hits = 0;
        let mut path = vec![0usize; t_len];
        for code in 0..c.pow(t_len as u32) {
            let mut r = code;
            for p in path.iter_mut() {
                *p = r % c;
                r /= c;
            }
            if collapse(&path) == target {
                hits += 1;
                total += path.iter().enumerate().map(|(t, &k)| lp[t * c + k]).sum::<f64>().exp();
            }
        }
        (-total.ln(), hits)
    }

    #[test]
    fn ctc_single_frame() {
        let lp = log_softmax_rows(&[0.3, 1.2, -0.4], 3);
        let (nll, _) = ctc_nll(&lp, 3, &[1]).unwrap();
        assert!((nll + lp[1]).abs() < 1e-14);
    }

    #[test]
    fn ctc_three_frames_one_label_has_six_paths() {
        let lp = log_softmax_rows(&[0.1, 0.5, -0.2, 0.9, 0.0, 0.3, -0.7, 0.4, 0.2], 3);
        let (oracle, hits) = brute_force(&lp, 3, &[2]);
        assert_eq!(hits, 6);
        let (nll, _) = ctc_nll(&lp, 3, &[2]).unwrap();
        assert!((nll - oracle).abs() < 1e-10);
    }

    #[test]
    fn ctc_repeat_needs_separator() {
        let lp = log_softmax_rows(&[0.0; 6], 3);
        match ctc_nll(&lp, 3, &[1, 1]) {
            Err(Error::CtcInfeasible { frames: 2, required: 3 }) => {}
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn ctc_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut done = 0;
        while done < 200 {
            let t_len = rng.random_range(1..=6);
            let c = rng.random_range(2..=5);
            let l = rng.random_range(0..=3);
            let target: Vec<usize> = (0..l).map(|_| rng.random_range(1..c)).collect();
            if ctc_required_frames(&target) > t_len {
                continue;
            }
            let raw: Vec<f64> = (0..t_len * c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lp = log_softmax_rows(&raw, c);
            let (oracle, _) = brute_force(&lp, c, &target);
            let (nll, _) = ctc_nll(&lp, c, &target).unwrap();
            assert!((nll - oracle).abs() < 1e-10, "{nll} vs {oracle} for {target:?}");
            done += 1;
        }
    }

    #[test]
    fn ctc_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let target = [1, 3, 3];
        let lp: Vec<f64> = (0..7 * c).map(|_| rng.random_range(-2.0..0.0)).collect();
        let (_, grad) = ctc_nll(&lp, c, &target).unwrap();
        let h = 1e-6;
        for i in 0..lp.len() {
            let mut p = lp.clone();
            p[i] += h;
            let plus = ctc_nll(&p, c, &target).unwrap().0;
            p[i] -= 2.0 * h;
            let minus = ctc_nll(&p, c, &target).unwrap().0;
            let num = (plus - minus) / (2.0 * h);
            assert!((num - grad[i]).abs() < 1e-6, "coord {i}: {} vs {num}", grad[i]);
        }
    }

    #[test]
    fn ce_uniform_is_log_v() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[2, 3, 7]));
        let l = ce_loss(&mut g, x, &[1, 2, 9, 0, 6, 9], 9).unwrap();
        assert!((g.scalar(l) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_hand_two_class_case() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 0.0]).unwrap());
        let l = ce_loss(&mut g, x, &[1, 1], 5).unwrap();
        let a = (1.0 + (-1f64).exp()).ln();
        let b = (1.0 + 2f64.exp()).ln();
        assert!((g.scalar(l) - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ce_large_margin_goes_to_zero() {
        let store = empty_store();
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut g = Graph::new(&store);
            let x = g.constant(Tensor::new(vec![1, 3], vec![0.0, margin, 0.0]).unwrap());
            let l = ce_loss(&mut g, x, &[1], 9).unwrap();
            let l = g.scalar(l);
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn ce_rejects_all_pad() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(ce_loss(&mut g, x, &[4, 4], 4).is_err());
    }

    #[test]
    fn ce_is_batch_permutation_equivariant() {
        let store = empty_store();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..3 * 2 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tgt = [1, 4, 0, 2, 3, 5];
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![3, 2, 5], data.clone()).unwrap());
        let a = ce_loss(&mut g, x, &tgt, 5).unwrap();
        let a = g.scalar(a);
        let order = [2, 0, 1];
        let pdata: Vec<f64> = order.iter().flat_map(|&b| data[b * 10..(b + 1) * 10].to_vec()).collect();
        let ptgt: Vec<usize> = order.iter().flat_map(|&b| tgt[b * 2..(b + 1) * 2].to_vec()).collect();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![3, 2, 5], pdata).unwrap());
        let b = ce_loss(&mut g, x, &ptgt, 5).unwrap();
        let b = g.scalar(b);
        assert!((a - b).abs() < 1e-12);
    }

    fn cl_value(speech: Tensor, text: Tensor) -> Result<f64> {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let (b, ls, lt) = (speech.shape()[0], speech.shape()[1], text.shape()[1]);
        let s = g.constant(speech);
        let t = g.constant(text);
        let l = contrastive_loss(&mut g, s, &vec![ls; b], t, &vec![lt; b], DEFAULT_TAU)?;
        Ok(g.scalar(l))
    }

    #[test]
    fn contrastive_identical_vectors_give_zero_for_pairs() {
        let x = Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(cl_value(x.clone(), x).unwrap().abs() < 1e-12);
    }

    #[test]
    fn contrastive_extreme_similarities() {
        // positives aligned, negatives opposite: −(10 − (−10))
        let s = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let v = cl_value(s.clone(), s).unwrap();
        assert!((v + 20.0).abs() < 1e-8, "{v}");
    }

    #[test]
    fn contrastive_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::from_fn(&[3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[3, 2, 5], |_| rng.random_range(-1.0..1.0));
        let scaled = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v * 3.7).collect()).unwrap();
        let x = cl_value(a, b.clone()).unwrap();
        let y = cl_value(scaled, b).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn contrastive_needs_negatives() {
        let x = Tensor::zeros(&[1, 2, 3]);
        let err = cl_value(x.clone(), x).unwrap_err();
        assert!(err.to_string().contains("without negatives"));
    }

    fn cons_value(a: Tensor, b: Tensor, lens: &[usize]) -> f64 {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let a = g.constant(a);
        let b = g.constant(b);
        let l = consistency_loss(&mut g, &[a], &[b], lens).unwrap();
        g.scalar(l)
    }

    #[test]
    fn consistency_hand_two_vector_case() {
        // LN([1,-1]) = [1,-1]·(1/sqrt(1+eps)), LN([-1,1]) its negative; squared gap 4 per channel
        let a = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let expect = 4.0 / (1.0 + 1e-5);
        assert!((cons_value(a.clone(), b.clone(), &[1]) - expect).abs() < 1e-12);
        assert!((cons_value(b, a.clone(), &[1]) - expect).abs() < 1e-12);
        assert_eq!(cons_value(a.clone(), a, &[1]), 0.0);
    }

    #[test]
    fn consistency_ignores_padding_and_checks_layers() {
        let a = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 5.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 0.0, 5.0]).unwrap();
        assert_eq!(cons_value(a, b, &[1]), 0.0);
        let store = empty_store();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[1, 1, 2]));
        assert!(consistency_loss(&mut g, &[x, x], &[x], &[1]).is_err());
    }

    fn scalars(g: &mut Graph, v: [f64; 4]) -> LossComponents {
        let n = v.map(|x| g.constant(Tensor::scalar(x)));
        LossComponents {
            st: Some(n[0]),
            asr: Some(n[1]),
            mt: Some(n[2]),
            cl: Some(n[3]),
            consistency: None,
        }
    }

    #[test]
    fn total_weights_components() {
        let store = empty_store();
        let mut g = Graph::new(&store);
        let parts = scalars(&mut g, [1.0, 2.0, 3.0, 4.0]);
        let b = total_loss(&mut g, &parts, LossWeights::default()).unwrap();
        assert!((b.l_total - 7.2).abs() < 1e-12);
        let b = total_loss(&mut g, &parts, LossWeights { asr: 0.0, mt: 0.0, cl: 0.3 }).unwrap();
        assert!((b.l_total - 2.2).abs() < 1e-12);
        assert!(total_loss(&mut g, &parts, LossWeights { asr: -0.1, mt: 1.0, cl: 0.3 }).is_err());
    }
}
