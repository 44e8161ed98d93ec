use std::fmt;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Partition {
    #[serde(rename = "A-Enc")]
    AEnc,
    #[serde(rename = "T-Enc")]
    TEnc,
    #[serde(rename = "Decoder")]
    Decoder,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::AEnc, Partition::TEnc, Partition::Decoder];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::AEnc => "A-Enc",
            Partition::TEnc => "T-Enc",
            Partition::Decoder => "Decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    #[serde(rename = "ATTEN")]
    Atten,
    #[serde(rename = "FFN")]
    Ffn,
    #[serde(rename = "OTHER")]
    Other,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Atten => "ATTEN",
            ParamKind::Ffn => "FFN",
            ParamKind::Other => "OTHER",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ParamKind::Atten, ParamKind::Ffn, ParamKind::Other]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// Identifies a parameter group. `layer` is `None` for partition-level
/// parameters (embeddings, input/output projections, final norms).
///
/// The derived ordering is the canonical registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub partition: Partition,
    pub layer: Option<usize>,
    pub kind: ParamKind,
}

impl GroupKey {
    pub fn new(partition: Partition, layer: Option<usize>, kind: ParamKind) -> Self {
        GroupKey {
            partition,
            layer,
            kind,
        }
    }

    pub fn layer(partition: Partition, layer: usize, kind: ParamKind) -> Self {
        Self::new(partition, Some(layer), kind)
    }

    pub fn global(partition: Partition) -> Self {
        Self::new(partition, None, ParamKind::Other)
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{}/{}/{}", self.partition.as_str(), l, self.kind.as_str()),
            None => write!(f, "{}/-/{}", self.partition.as_str(), self.kind.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub key: GroupKey,
    pub params: Vec<ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, key: GroupKey) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.key == key)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Folds a backward pass into the gradient slots. Parameters the pass
    /// did not reach receive an explicit zero gradient.
    pub fn apply_grads(&mut self, grads: &super::Gradients) -> Result<()> {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            match grads.param(ParamId(i)) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.ensure_grad(),
            }
        }
        Ok(())
    }

    /// Concatenated gradients of every group whose key passes `filter`, in
    /// canonical group order.
    pub fn flatten_grads(&self, filter: impl Fn(&GroupKey) -> bool) -> Result<Vec<(GroupKey, Vec<f64>)>> {
        let mut out = Vec::new();
        for group in self.groups.iter().filter(|g| filter(&g.key)) {
            let mut flat = Vec::new();
            for &id in &group.params {
                let g = self.tensors[id.0].grad().ok_or_else(|| Error::MissingGrad {
                    group: group.key.to_string(),
                })?;
                flat.extend_from_slice(g);
            }
            out.push((group.key, flat));
        }
        Ok(out)
    }

    /// Every parameter value, concatenated in group order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for group in &self.groups {
            for &id in &group.params {
                out.extend_from_slice(self.tensors[id.0].data());
            }
        }
        out
    }

    /// Overwrites every parameter from a buffer laid out as [`flat_values`](Self::flat_values).
    pub fn load_flat_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::invalid(format!(
                "parameter buffer has {} values, store holds {}",
                values.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        for group in &self.groups {
            for &id in &group.params {
                let t = &mut self.tensors[id.0];
                let n = t.numel();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }
}

/// Collects parameters group by group. Groups must be opened in canonical
/// [`GroupKey`] order so that flattening and checkpoint layout never depend on
/// construction accidents.
#[derive(Debug, Default)]
pub struct ParamStoreBuilder {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
}

impl ParamStoreBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open_group(&mut self, key: GroupKey) {
        self.groups.push(ParamGroup {
            key,
            params: Vec::new(),
        });
    }

    /// Registers a parameter in the most recently opened group.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let group = self
            .groups
            .last_mut()
            .expect("open_group must be called before add");
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor.with_requires_grad(true));
        self.names.push(name.into());
        group.params.push(id);
        id
    }

    pub fn build(self) -> Result<ParamStore> {
        for pair in self.groups.windows(2) {
            if pair[0].key >= pair[1].key {
                return Err(Error::GroupOrder {
                    prev: pair[0].key.to_string(),
                    next: pair[1].key.to_string(),
                });
            }
        }
        Ok(ParamStore {
            tensors: self.tensors,
            names: self.names,
            groups: self.groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(p: Partition, l: usize, k: ParamKind) -> GroupKey {
        GroupKey::layer(p, l, k)
    }

    #[test]
    fn single_matrix_group_flattens_to_six() {
        let mut b = ParamStoreBuilder::new();
        b.open_group(key(Partition::AEnc, 0, ParamKind::Atten));
        let id = b.add("w", Tensor::zeros(&[2, 3]));
        let mut store = b.build().unwrap();
        store.get_mut(id).accumulate_grad(&[1.0; 6]).unwrap();
        let flat = store.flatten_grads(|_| true).unwrap();
        assert_eq!(flat.len(), 1);
        assert_eq!(flat[0].1.len(), 6);
    }

    #[test]
    fn permuted_group_order_is_rejected() {
        let mut b = ParamStoreBuilder::new();
        b.open_group(key(Partition::TEnc, 0, ParamKind::Ffn));
        b.add("a", Tensor::zeros(&[1]));
        b.open_group(key(Partition::TEnc, 0, ParamKind::Atten));
        b.add("b", Tensor::zeros(&[1]));
        assert!(matches!(b.build(), Err(Error::GroupOrder { .. })));
    }

    #[test]
    fn missing_grads_name_the_group() {
        let mut b = ParamStoreBuilder::new();
        b.open_group(key(Partition::Decoder, 1, ParamKind::Ffn));
        b.add("w", Tensor::zeros(&[2]));
        let store = b.build().unwrap();
        let err = store.flatten_grads(|_| true).unwrap_err();
        assert!(err.to_string().contains("Decoder/1/FFN"), "{err}");
    }

    #[test]
    fn global_groups_sort_before_layers() {
        assert!(GroupKey::global(Partition::TEnc) < key(Partition::TEnc, 0, ParamKind::Atten));
        assert!(key(Partition::AEnc, 5, ParamKind::Other) < GroupKey::global(Partition::TEnc));
    }
}
