/// Dense f64 tensor laid out as `[batch, channel, z, y, x]`, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Spatial extent as (nx, ny, nz).
    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.shape[4], self.shape[3], self.shape[2]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The `(n, c)` spatial plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.shape[1] * self.voxels();
        &self.data[n * len..(n + 1) * len]
    }

    /// Stacks equally shaped single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        let first = items.first().expect("stack of zero tensors").shape;
        let mut data = Vec::with_capacity(items.len() * first.iter().product::<usize>());
        for t in items {
            assert_eq!(t.shape[1..], first[1..], "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = first;
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        Tensor { shape, data }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape[0], b.shape[0]);
        assert_eq!(a.shape[2..], b.shape[2..]);
        let (ca, cb, v) = (a.shape[1], b.shape[1], a.voxels());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.shape[0] {
            data.extend_from_slice(&a.data[n * ca * v..(n + 1) * ca * v]);
            data.extend_from_slice(&b.data[n * cb * v..(n + 1) * cb * v]);
        }
        let mut shape = a.shape;
        shape[1] = ca + cb;
        Tensor { shape, data }
    }

    /// Inverse of [`Tensor::concat_channels`]: first `ca` channels, rest.
    pub fn split_channels(&self, ca: usize) -> (Tensor, Tensor) {
        let (c, v) = (self.shape[1], self.voxels());
        let cb = c - ca;
        let mut a = Vec::with_capacity(self.shape[0] * ca * v);
        let mut b = Vec::with_capacity(self.shape[0] * cb * v);
        for n in 0..self.shape[0] {
            let item = self.item(n);
            a.extend_from_slice(&item[..ca * v]);
            b.extend_from_slice(&item[ca * v..]);
        }
        let mut sa = self.shape;
        sa[1] = ca;
        let mut sb = self.shape;
        sb[1] = cb;
        (Tensor::from_vec(sa, a), Tensor::from_vec(sb, b))
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
