//! Flat, named parameter storage shared by networks, optimizers and
//! checkpoints.

use ndarray::{ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, ArrayViewMut2, ArrayViewMut4};

use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of named tensors. Order is declaration order and is
/// what checkpoints serialize.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> TensorId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data does not match its shape"
        );
        self.tensors.push(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        TensorId(self.tensors.len() - 1)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: TensorId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn data_mut(&mut self, id: TensorId) -> &mut [T] {
        &mut self.tensors[id.0].data
    }

    pub fn find(&self, name: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.name == name).map(TensorId)
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar at a global flat index (declaration order).
    pub fn scalar(&self, mut index: usize) -> T {
        for t in &self.tensors {
            if index < t.data.len() {
                return t.data[index];
            }
            index -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn scalar_mut(&mut self, mut index: usize) -> &mut T {
        for t in &mut self.tensors {
            if index < t.data.len() {
                return &mut t.data[index];
            }
            index -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn all_finite(&self) -> bool {
        self.iter_scalars().all(|v| v.is_finite())
    }

    /// `self += other` elementwise; layouts must match.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn view1(&self, id: TensorId) -> ArrayView1<'_, T> {
        let t = self.get(id);
        ArrayView1::from_shape(t.shape[0], &t.data).expect("rank-1 tensor")
    }

    pub fn view2(&self, id: TensorId) -> ArrayView2<'_, T> {
        let t = self.get(id);
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("rank-2 tensor")
    }

    pub fn view4(&self, id: TensorId) -> ArrayView4<'_, T> {
        let t = self.get(id);
        ArrayView4::from_shape((t.shape[0], t.shape[1], t.shape[2], t.shape[3]), &t.data).expect("rank-4 tensor")
    }

    pub fn view1_mut(&mut self, id: TensorId) -> ArrayViewMut1<'_, T> {
        let t = &mut self.tensors[id.0];
        ArrayViewMut1::from_shape(t.shape[0], &mut t.data).expect("rank-1 tensor")
    }

    pub fn view2_mut(&mut self, id: TensorId) -> ArrayViewMut2<'_, T> {
        let t = &mut self.tensors[id.0];
        ArrayViewMut2::from_shape((t.shape[0], t.shape[1]), &mut t.data).expect("rank-2 tensor")
    }

    pub fn view4_mut(&mut self, id: TensorId) -> ArrayViewMut4<'_, T> {
        let t = &mut self.tensors[id.0];
        ArrayViewMut4::from_shape((t.shape[0], t.shape[1], t.shape[2], t.shape[3]), &mut t.data).expect("rank-4 tensor")
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                })
                .collect(),
        }
    }
}
