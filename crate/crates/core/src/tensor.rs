use crate::scalar::Scalar;

/// Dense row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut() -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| f()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `r` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, r: usize) -> &[T] {
        let w = self.row_width();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let w = self.row_width();
        &mut self.data[r * w..(r + 1) * w]
    }

    fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }
}

/// A fixed, ordered collection of named tensors (model or adapter weights,
/// their gradients, optimizer moments).
pub trait ParamSet<T: Scalar> {
    fn tensors(&self) -> Vec<&Tensor<T>>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn names(&self) -> Vec<String>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn zero_all(&mut self) {
        for t in self.tensors_mut() {
            t.fill_zero();
        }
    }

    /// `self += alpha * other`, tensor by tensor.
    fn axpy(&mut self, alpha: T, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            debug_assert_eq!(dst.shape, src.shape);
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d = *d + alpha * s;
            }
        }
    }

    /// `self - other` as a fresh set with the same layout.
    fn difference(&self, other: &Self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut out = self.clone();
        out.axpy(-T::one(), other);
        out
    }

    fn flat_values(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}
