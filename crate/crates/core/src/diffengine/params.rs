use super::{Array, EngineError};

/// Ordered, uniquely named collection of parameter arrays.
///
/// Insertion order is the canonical order: it drives tape registration,
/// optimizer state layout and checkpoint serialization.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    arrays: Vec<Array>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) -> Result<usize, EngineError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(EngineError::DuplicateParameter(name));
        }
        self.names.push(name);
        self.arrays.push(array);
        Ok(self.arrays.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.index_of(name).map(|i| &self.arrays[i])
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn array(&self, index: usize) -> &Array {
        &self.arrays[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    /// Overwrites the values of one parameter. Shapes are fixed after
    /// construction.
    pub fn set_data(&mut self, index: usize, data: &[f64]) -> Result<(), EngineError> {
        let target = &mut self.arrays[index];
        if target.len() != data.len() {
            return Err(EngineError::ShapeMismatch {
                shape: target.shape().to_vec(),
                expected: target.len(),
                actual: data.len(),
            });
        }
        target.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn data_mut(&mut self, index: usize) -> &mut [f64] {
        self.arrays[index].data_mut()
    }

    /// A set with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(|a| Array::zeros(a.shape())).collect(),
        }
    }

    /// Flat view of the scalar at `coord` in the concatenation of all arrays.
    pub fn flat_get(&self, coord: usize) -> f64 {
        let (i, j) = self.locate(coord);
        self.arrays[i].data()[j]
    }

    pub fn flat_set(&mut self, coord: usize, value: f64) {
        let (i, j) = self.locate(coord);
        self.arrays[i].data_mut()[j] = value;
    }

    fn locate(&self, mut coord: usize) -> (usize, usize) {
        for (i, a) in self.arrays.iter().enumerate() {
            if coord < a.len() {
                return (i, coord);
            }
            coord -= a.len();
        }
        panic!("flat coordinate out of range");
    }
}
