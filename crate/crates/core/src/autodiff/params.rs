use super::Tensor;

/// A flat parameter vector with the shapes needed to split it back into
/// per-layer tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, shapes: Vec<(usize, usize)>) -> Self {
        let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
        assert_eq!(n, values.len(), "parameter count does not match shapes");
        Self { values, shapes }
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Self {
        let mut values = Vec::with_capacity(tensors.iter().map(Tensor::len).sum());
        let mut shapes = Vec::with_capacity(tensors.len());
        for t in tensors {
            values.extend_from_slice(t.data());
            shapes.push(t.shape());
        }
        Self { values, shapes }
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut offset = 0;
        for &(r, c) in &self.shapes {
            out.push(Tensor::from_vec(r, c, self.values[offset..offset + r * c].to_vec()));
            offset += r * c;
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            shapes: self.shapes.clone(),
        }
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        assert_eq!(self.shapes, other.shapes, "axpy shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|x| *x *= k);
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "dot length mismatch");
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "distance length mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_unflatten_identity(
            shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5),
            seed in any::<u64>(),
        ) {
            let mut x = seed;
            let tensors: Vec<Tensor> = shapes
                .iter()
                .map(|&(r, c)| {
                    let data = (0..r * c)
                        .map(|_| {
                            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
                        })
                        .collect();
                    Tensor::from_vec(r, c, data)
                })
                .collect();
            let p = ParamVector::from_tensors(&tensors);
            prop_assert_eq!(p.to_tensors(), tensors);
            let q = ParamVector::new(p.as_slice().to_vec(), p.shapes().to_vec());
            prop_assert_eq!(q, p);
        }
    }
}
