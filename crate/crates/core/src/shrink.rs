//! CTC-driven length compression with look-back attention.
//!
//! The greedy CTC path splits the acoustic frames into runs of equal labels
//! (blank runs included). Each run is represented by its most confident
//! frame; the look-back step then lets that representative attend over the
//! original frames around it so no frame is cut out of the gradient path.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, ParamId};

/// Per-frame argmax decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPath {
    pub tokens: Vec<usize>,
    /// Probability of the chosen label at each frame.
    pub confidences: Vec<f64>,
}

impl CtcPath {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Greedy path from `log_probs[n, classes]`; ties go to the lower class id.
pub fn ctc_greedy_path(log_probs: &[f64], classes: usize) -> Result<CtcPath> {
    if classes == 0 || log_probs.len() % classes != 0 {
        return Err(Error::shape(
            "ctc_greedy_path",
            format!("{} values for {classes} classes", log_probs.len()),
        ));
    }
    let mut tokens = Vec::with_capacity(log_probs.len() / classes);
    let mut confidences = Vec::with_capacity(tokens.capacity());
    for row in log_probs.chunks(classes) {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        tokens.push(best);
        confidences.push(row[best].exp());
    }
    Ok(CtcPath { tokens, confidences })
}

/// Structural result of merging one sequence: where each kept position came
/// from and which original frames it may look back over.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkSequence {
    /// Run-length compressed labels, blanks kept.
    pub tokens: Vec<usize>,
    /// Frame chosen to represent each run.
    pub origin: Vec<usize>,
    pub seg_start: Vec<usize>,
    /// Inclusive.
    pub seg_end: Vec<usize>,
    pub boundary: Vec<usize>,
    /// Number of original frames.
    pub frames: usize,
}

impl ShrunkSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Original frames searched by position `i`: `[j-b, j+b]` clipped to the
    /// sequence, without `j` itself.
    pub fn window(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let j = self.origin[i];
        let b = self.boundary[i];
        let lo = j.saturating_sub(b);
        let hi = (j + b).min(self.frames - 1);
        (lo..=hi).filter(move |&f| f != j)
    }

    /// Expands the compressed labels back over their segments.
    pub fn decompress(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.frames);
        for i in 0..self.len() {
            out.extend(std::iter::repeat(self.tokens[i]).take(self.seg_end[i] - self.seg_start[i] + 1));
        }
        out
    }
}

/// One position per maximal run of equal labels, represented by the run's
/// highest-confidence frame (leftmost on ties). The look-back boundary is the
/// smallest `b` with `[j-b, j+b]` covering the run.
pub fn merge_repeats(path: &CtcPath) -> Result<ShrunkSequence> {
    if path.is_empty() {
        return Err(Error::invalid("cannot merge an empty CTC path"));
    }
    let mut s = ShrunkSequence {
        tokens: Vec::new(),
        origin: Vec::new(),
        seg_start: Vec::new(),
        seg_end: Vec::new(),
        boundary: Vec::new(),
        frames: path.len(),
    };
    let mut start = 0;
    for f in 1..=path.len() {
        if f < path.len() && path.tokens[f] == path.tokens[start] {
            continue;
        }
        let end = f - 1;
        let mut j = start;
        for k in start + 1..=end {
            if path.confidences[k] > path.confidences[j] {
                j = k;
            }
        }
        s.tokens.push(path.tokens[start]);
        s.origin.push(j);
        s.seg_start.push(start);
        s.seg_end.push(end);
        s.boundary.push((j - start).max(end - j));
        start = f;
    }
    Ok(s)
}

/// Parameters of the look-back step: a shared linear map for the
/// correlation and a normalized two-layer fusion network.
#[derive(Debug, Clone)]
pub struct LbmParams {
    pub r_w: ParamId,
    pub r_b: ParamId,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

/// Look-back for a padded batch of shrunk positions.
///
/// `frames` is the flattened `[N, d]` original feature matrix, `reps` the
/// `[M, d]` representatives, and `windows[i]` the frame rows position `i`
/// searches. Returns `(s̃ [M, d], weights [M, 1, W])`; an empty window
/// yields a zero vector.
pub fn lbm_lookback(
    g: &mut Graph,
    p: &LbmParams,
    frames: NodeId,
    reps: NodeId,
    windows: &[Vec<usize>],
) -> Result<(NodeId, Option<NodeId>)> {
    let d = *g.shape(reps).last().unwrap_or(&0);
    let m = windows.len();
    if g.shape(reps) != [m, d] {
        return Err(Error::shape(
            "lbm_lookback",
            format!("representatives {:?} for {m} windows", g.shape(reps)),
        ));
    }
    let width = windows.iter().map(Vec::len).max().unwrap_or(0);
    if width == 0 {
        let zeros = g.scale(reps, 0.0);
        return Ok((zeros, None));
    }
    let mut idx = Vec::with_capacity(m * width);
    let mut mask = Vec::with_capacity(m * width);
    for w in windows {
        for k in 0..width {
            idx.push(w.get(k).copied());
            mask.push(k < w.len());
        }
    }
    let rw = g.param(p.r_w);
    let rb = g.param(p.r_b);
    let a = g.gather_rows(frames, &idx)?;
    let ra = g.linear(a, rw, Some(rb))?;
    let ra = g.reshape(ra, &[m, width, d])?;
    let a = g.reshape(a, &[m, width, d])?;
    let rq = g.linear(reps, rw, Some(rb))?;
    let rq = g.reshape(rq, &[m, 1, d])?;
    let scores = g.bmm(rq, ra, true)?;
    let weights = g.softmax(scores, Some(&mask))?;
    let agg = g.bmm(weights, a, false)?;
    let agg = g.reshape(agg, &[m, d])?;
    Ok((agg, Some(weights)))
}

/// `FFN(Norm(s' + s̃))` with no residual around the FFN.
pub fn lbm_fuse(g: &mut Graph, p: &LbmParams, reps: NodeId, looked_back: NodeId) -> Result<NodeId> {
    let x = g.add(reps, looked_back)?;
    let ng = g.param(p.norm_g);
    let nb = g.param(p.norm_b);
    let x = g.layer_norm(x, Some(ng), Some(nb))?;
    let w1 = g.param(p.ffn_w1);
    let b1 = g.param(p.ffn_b1);
    let w2 = g.param(p.ffn_w2);
    let b2 = g.param(p.ffn_b2);
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.gelu(h);
    g.linear(h, w2, Some(b2))
}

/// Shrunk batch ready for the textual encoder.
#[derive(Debug, Clone)]
pub struct ShrinkOutput {
    pub sequences: Vec<ShrunkSequence>,
    /// `[B, m_max, d]`.
    pub features: NodeId,
    pub lens: Vec<usize>,
    /// Σm / Σn over the batch.
    pub length_ratio: f64,
    pub lookback_weights: Option<NodeId>,
}

/// Full pipeline over a padded batch: greedy path from `log_probs[B, T, C]`,
/// merge, gather representatives from `features[B, T, d]`, and (when `lbm`
/// is given) look back and fuse.
pub fn shrink_sequence(
    g: &mut Graph,
    features: NodeId,
    log_probs: NodeId,
    lens: &[usize],
    lbm: Option<&LbmParams>,
) -> Result<ShrinkOutput> {
    let sf = g.shape(features).to_vec();
    let sl = g.shape(log_probs).to_vec();
    if sf.len() != 3 || sl.len() != 3 || sf[..2] != sl[..2] || lens.len() != sf[0] {
        return Err(Error::shape(
            "shrink_sequence",
            format!("features {sf:?}, log-probs {sl:?}, {} lengths", lens.len()),
        ));
    }
    let (bsz, t_max, d) = (sf[0], sf[1], sf[2]);
    let classes = sl[2];
    let mut sequences = Vec::with_capacity(bsz);
    {
        let lp = g.value(log_probs);
        for (b, &n) in lens.iter().enumerate() {
            if n == 0 || n > t_max {
                return Err(Error::shape("shrink_sequence", format!("length {n} for {t_max} frames")));
            }
            let rows = &lp[b * t_max * classes..(b * t_max + n) * classes];
            sequences.push(merge_repeats(&ctc_greedy_path(rows, classes)?)?);
        }
    }
    let m_lens: Vec<usize> = sequences.iter().map(ShrunkSequence::len).collect();
    let m_max = *m_lens.iter().max().unwrap_or(&0);
    let flat = g.reshape(features, &[bsz * t_max, d])?;
    let mut rep_idx = Vec::with_capacity(bsz * m_max);
    let mut windows = Vec::with_capacity(bsz * m_max);
    for (b, s) in sequences.iter().enumerate() {
        for i in 0..m_max {
            if i < s.len() {
                rep_idx.push(Some(b * t_max + s.origin[i]));
                windows.push(s.window(i).map(|f| b * t_max + f).collect());
            } else {
                rep_idx.push(None);
                windows.push(Vec::new());
            }
        }
    }
    let reps = g.gather_rows(flat, &rep_idx)?;
    let (fused, weights) = match lbm {
        Some(p) => {
            let (looked, weights) = lbm_lookback(g, p, flat, reps, &windows)?;
            (lbm_fuse(g, p, reps, looked)?, weights)
        }
        None => (reps, None),
    };
    let features = g.reshape(fused, &[bsz, m_max, d])?;
    let total_n: usize = lens.iter().sum();
    let total_m: usize = m_lens.iter().sum();
    Ok(ShrinkOutput {
        sequences,
        features,
        lens: m_lens,
        length_ratio: total_m as f64 / total_n as f64,
        lookback_weights: weights,
    })
}
