use super::ModelConfig;

/// Per-layer rotated keys and values of committed tokens.
///
/// Entries are only ever appended; the stored position ids are the ones the
/// keys were rotated with.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_model: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    positions: Vec<usize>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            positions: Vec::new(),
        }
    }

    /// Number of committed tokens.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    pub fn num_layers(&self) -> usize {
        self.keys.len()
    }

    pub(crate) fn d_model(&self) -> usize {
        self.d_model
    }

    pub(crate) fn append(&mut self, layer_kv: Vec<(Vec<f64>, Vec<f64>)>, positions: &[usize]) {
        debug_assert_eq!(layer_kv.len(), self.keys.len());
        for (l, (k, v)) in layer_kv.into_iter().enumerate() {
            debug_assert_eq!(k.len(), positions.len() * self.d_model);
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
        }
        self.positions.extend_from_slice(positions);
    }
}
