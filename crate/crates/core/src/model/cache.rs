use crate::error::{Error, Result};
use crate::numerics::{Element, Tensor};

/// Keys and values of the tokens a single layer has processed.
#[derive(Debug, Clone, Default)]
pub struct LayerCache<T: Element> {
    pub keys: Option<Tensor<T>>,
    pub values: Option<Tensor<T>>,
    /// Original sequence position of each entry, strictly increasing.
    pub positions: Vec<usize>,
}

impl<T: Element> LayerCache<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn last_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    pub fn append(&mut self, keys: Tensor<T>, values: Tensor<T>, positions: &[usize]) -> Result<()> {
        if keys.rows() != positions.len() || values.shape() != keys.shape() {
            return Err(Error::Cache("key/value/position counts disagree".into()));
        }
        if let (Some(last), Some(&first)) = (self.last_position(), positions.first()) {
            if first <= last {
                return Err(Error::Cache(format!("position {first} does not follow {last}")));
            }
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Cache("positions must increase".into()));
        }
        match (&mut self.keys, &mut self.values) {
            (Some(k), Some(v)) => {
                k.append_rows(&keys)?;
                v.append_rows(&values)?;
            }
            _ => {
                self.keys = Some(keys);
                self.values = Some(values);
            }
        }
        self.positions.extend_from_slice(positions);
        Ok(())
    }
}

/// Per-layer key/value store for incremental decoding. A layer holds an entry
/// for a token iff that layer processed it.
#[derive(Debug, Clone)]
pub struct KvCache<T: Element> {
    pub layers: Vec<LayerCache<T>>,
}

impl<T: Element> KvCache<T> {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerCache::default()).collect(),
        }
    }

    pub fn entries_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    pub fn total_entries(&self) -> usize {
        self.layers.iter().map(LayerCache::len).sum()
    }

    /// Bytes held by keys and values.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.keys.as_ref().map_or(0, |k| 2 * k.len() * T::DTYPE.size_of()))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_enforces_increasing_positions() {
        let mut c = LayerCache::<f32>::default();
        c.append(Tensor::zeros(2, 4), Tensor::zeros(2, 4), &[0, 3]).unwrap();
        assert!(c.append(Tensor::zeros(1, 4), Tensor::zeros(1, 4), &[3]).is_err());
        c.append(Tensor::zeros(1, 4), Tensor::zeros(1, 4), &[5]).unwrap();
        assert_eq!(c.positions, vec![0, 3, 5]);
        assert_eq!(c.keys.as_ref().unwrap().rows(), 3);
    }
}
