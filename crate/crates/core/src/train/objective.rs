use crate::error::{Error, Result};
use crate::losses::{ce_loss, consistency_loss, contrastive_loss, ctc_loss, total_loss, LossBundle, LossComponents, LossWeights, DEFAULT_TAU};
use crate::model::{Model, Task, TaskOutputs};
use crate::tensor::{Graph, NodeId};

fn missing(task: Task) -> Error {
    Error::invalid(format!("{} outputs were not computed", task.as_str()))
}

/// Unweighted loss of one task on outputs that include it.
pub fn task_loss(g: &mut Graph, model: &Model, out: &TaskOutputs, task: Task) -> Result<NodeId> {
    let pad = model.vocab().pad();
    match task {
        Task::St => {
            let st = out.st.as_ref().ok_or_else(|| missing(task))?;
            ce_loss(g, st.logits, &st.teacher.targets, pad)
        }
        Task::Mt => {
            let mt = out.mt.as_ref().ok_or_else(|| missing(task))?;
            ce_loss(g, mt.logits, &mt.teacher.targets, pad)
        }
        Task::Asr => {
            let asr = out.asr.as_ref().ok_or_else(|| missing(task))?;
            let ctc = match asr.ctc_log_probs {
                Some(lp) => Some(ctc_loss(g, lp, &asr.ctc_lens, &asr.ctc_targets)?),
                None => None,
            };
            let ce = match &asr.ce {
                Some(ce) => Some(ce_loss(g, ce.logits, &ce.teacher.targets, pad)?),
                None => None,
            };
            match (ctc, ce) {
                (Some(a), Some(b)) => g.add(a, b),
                (Some(a), None) | (None, Some(a)) => Ok(a),
                (None, None) => Err(missing(task)),
            }
        }
    }
}

/// Weighted training objective over whatever `out` contains.
pub fn objective(
    g: &mut Graph,
    model: &Model,
    out: &TaskOutputs,
    src_lens: &[usize],
    weights: LossWeights,
    use_cl: bool,
) -> Result<LossBundle> {
    let mut parts = LossComponents {
        st: Some(task_loss(g, model, out, Task::St)?),
        ..LossComponents::default()
    };
    if out.asr.is_some() {
        parts.asr = Some(task_loss(g, model, out, Task::Asr)?);
    }
    if out.mt.is_some() {
        parts.mt = Some(task_loss(g, model, out, Task::Mt)?);
    }
    if use_cl {
        let text = out.clean_text.ok_or_else(|| Error::invalid("contrastive loss needs clean text embeddings"))?;
        let enc = out.speech_enc.as_ref().ok_or_else(|| missing(Task::St))?;
        let (speech, lens) = match &out.shrink {
            Some(sh) => (sh.features, sh.lens.as_slice()),
            None => (out.acoustic.ok_or_else(|| missing(Task::St))?, enc.lens.as_slice()),
        };
        parts.cl = Some(contrastive_loss(g, speech, lens, text, src_lens, DEFAULT_TAU)?);
    }
    let mut cons = None;
    for enc in out.speech_enc.iter().chain(out.mt.as_ref().map(|m| &m.t_enc)) {
        if enc.extractor_outs.is_empty() {
            continue;
        }
        let c = consistency_loss(g, &enc.extractor_outs, &enc.attention_outs, &enc.lens)?;
        cons = Some(match cons {
            Some(prev) => g.add(prev, c)?,
            None => c,
        });
    }
    parts.consistency = cons;
    total_loss(g, &parts, weights)
}
