use super::tensor::{Scalar, Tensor};

/// Named parameter tensors.
///
/// The generation counter advances on every mutable access, which lets a
/// [`Tape`](super::Tape) recorded against older values be rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    generation: u64,
}

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            generation: 0,
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<T>) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.generation += 1;
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.index_of(name)?;
        self.generation += 1;
        Some(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// FNV-1a digest of every parameter's bit pattern, used to compare
    /// training trajectories.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            generation: 0,
        }
    }
}
