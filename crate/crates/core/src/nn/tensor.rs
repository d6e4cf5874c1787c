use super::scalar::Scalar;

/// Channel-major `(channels, height, width)` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            shape: [channels, height, width],
            data: vec![T::zero(); channels * height * width],
        }
    }

    /// # Panics
    /// If `data.len()` differs from the product of the shape.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "tensor data does not match shape"
        );
        Self {
            shape: [channels, height, width],
            data,
        }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            shape: [channels, height, width],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = (c * self.shape[1] + y) * self.shape[2] + x;
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Channels `start..end` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Self {
        assert!(start < end && end <= self.channels());
        let n = self.plane_len();
        Self {
            shape: [end - start, self.shape[1], self.shape[2]],
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Stacks tensors with equal spatial size along the channel axis.
    pub fn concat(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let [_, h, w] = parts[0].shape;
        assert!(parts.iter().all(|p| p.shape[1] == h && p.shape[2] == w));
        let channels = parts.iter().map(|p| p.shape[0]).sum();
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self {
            shape: [channels, h, w],
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.channels(), self.height(), self.width(), |c, y, x| {
            self.get(c, y, self.width() - 1 - x)
        })
    }
}
