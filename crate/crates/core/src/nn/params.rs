use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Learned weights of a model, one optional group per layer index, each
/// with its own frozen flag. Training never touches a frozen group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    groups: Vec<Option<LayerParams>>,
    frozen: Vec<bool>,
}

impl ParameterStore {
    pub fn new(groups: Vec<Option<LayerParams>>) -> Self {
        let frozen = alloc::vec![false; groups.len()];
        ParameterStore { groups, frozen }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&LayerParams> {
        self.groups.get(layer).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut LayerParams> {
        self.groups.get_mut(layer).and_then(Option::as_mut)
    }

    /// `(layer index, params)` for every parameterised layer.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &LayerParams)> {
        self.groups.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|p| (i, p)))
    }

    pub fn is_frozen(&self, layer: usize) -> bool {
        self.frozen.get(layer).copied().unwrap_or(false)
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        if let Some(f) = self.frozen.get_mut(layer) {
            *f = frozen;
        }
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = false);
    }

    /// True when every parameterised group is frozen.
    pub fn all_frozen(&self) -> bool {
        self.iter().all(|(i, _)| self.frozen[i])
    }

    pub fn frozen_flags(&self) -> &[bool] {
        &self.frozen
    }

    pub fn count(&self) -> usize {
        self.iter().map(|(_, p)| p.weight.len() + p.bias.len()).sum()
    }

    /// Bit patterns of every parameter, in layer order (weight then bias).
    /// Used for byte-equality checks of frozen groups.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.iter()
            .flat_map(|(_, p)| p.weight.data().iter().chain(p.bias.data()))
            .map(|v| v.to_bits())
            .collect()
    }
}
