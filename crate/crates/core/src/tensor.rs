/// Dense NCHW `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Tensor { n, c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn channel(&self, i: usize, c: usize) -> &[f32] {
        let p = self.plane();
        let off = i * self.sample_len() + c * p;
        &self.data[off..off + p]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape mismatch");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        for i in 0..a.n {
            let dst = out.sample_mut(i);
            let (left, right) = dst.split_at_mut(a.sample_len());
            left.copy_from_slice(a.sample(i));
            right.copy_from_slice(b.sample(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: split off the first `c_first` channels.
    pub fn split_channels(&self, c_first: usize) -> (Tensor, Tensor) {
        let p = self.plane();
        let mut a = Tensor::zeros(self.n, c_first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - c_first, self.h, self.w);
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..c_first * p]);
            b.sample_mut(i).copy_from_slice(&src[c_first * p..]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other));
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += *s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::from_vec(2, 1, 2, 2, (0..8).map(|v| v as f32).collect());
        let b = Tensor::from_vec(2, 2, 2, 2, (0..16).map(|v| -(v as f32)).collect());
        let cat = Tensor::concat_channels(&a, &b);
        assert_eq!(cat.shape(), [2, 3, 2, 2]);
        assert_eq!(cat.channel(1, 0), a.channel(1, 0));
        let (a2, b2) = cat.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }
}
