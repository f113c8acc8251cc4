//! Dense row-major tensors and the PTNSR on-disk format.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::iter::Sum;
use std::path::Path;

use num_traits::Float;

use crate::error::{bail, Error, Result};

/// Floating-point element type. Training runs in `f32`; gradient checks
/// re-execute the same code in `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    /// `c = alpha * a * b + beta * c` with arbitrary strides (matrixmultiply convention).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn cast_from(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices whose extents cover the strided m×k, k×n
        // and m×n views; checked by the assertions in `gemm`.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn cast_from(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f32 impl.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn cast_from(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Bounds-checked wrapper around [`Scalar::gemm`] for non-negative strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    let (rsa, csa, rsb, csb, rsc, csc) = (
        rsa as isize,
        csa as isize,
        rsb as isize,
        csb as isize,
        rsc as isize,
        csc as isize,
    );
    assert!(a.len() >= extent(m, k, rsa, csa));
    assert!(b.len() >= extent(k, n, rsb, csb));
    assert!(c.len() >= extent(m, n, rsc, csc));
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

/// Dense n-dimensional array with an optional same-shape gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            bail!(
                Shape,
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            bail!(
                Shape,
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            );
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            bail!(Shape, "gradient length {} vs {}", g.len(), self.data.len());
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interprets the tensor as (N, C, H, W).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => bail!(Shape, "expected a 4-d tensor, got shape {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            bail!(Shape, "cannot reshape {:?} to {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::cast_from(v.as_f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One (C, H, W) item of a 4-d tensor as a slice.
    pub fn item(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0].max(1);
        &self.data[n * per..(n + 1) * per]
    }
}

const PTNSR_MAGIC: &[u8; 6] = b"PTNSR1";

impl Tensor<f32> {
    /// Serializes to PTNSR: magic, u32 ndim, u64 dims, raw little-endian f32.
    pub fn write_ptnsr<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(PTNSR_MAGIC)?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ptnsr<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != PTNSR_MAGIC {
            return Err(Error::Format("bad PTNSR magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let ndim = u32::from_le_bytes(b4) as usize;
        if ndim > 16 {
            return Err(Error::Format(format!("implausible PTNSR rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut b8 = [0u8; 8];
        for _ in 0..ndim {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after PTNSR payload".into()));
        }
        Tensor::new(&shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ptnsr(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_ptnsr(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.accumulate_grad(&[1.0; 4]).unwrap();
        t.accumulate_grad(&[1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0; 4]);
    }

    #[test]
    fn ptnsr_layout_is_pinned() {
        let t = Tensor::new(&[1, 2], vec![1.0f32, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_ptnsr(&mut buf).unwrap();
        let mut expected = b"PTNSR1".to_vec();
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn ptnsr_rejects_garbage() {
        assert!(Tensor::read_ptnsr(&b"PTNSR2\0\0\0\0"[..]).is_err());
        let t = Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_ptnsr(&mut buf).unwrap();
        buf.push(0);
        assert!(Tensor::read_ptnsr(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn ptnsr_round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let mut rng = crate::rng::Rng::new(seed);
            let n: usize = dims.iter().product();
            let t = Tensor::new(&dims, (0..n).map(|_| rng.normal() as f32).collect()).unwrap();
            let mut buf = Vec::new();
            t.write_ptnsr(&mut buf).unwrap();
            let back = Tensor::read_ptnsr(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
