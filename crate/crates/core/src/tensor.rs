//! Floating point abstraction and tensor digests.
//!
//! Models are generic over [`Scalar`] so training can run in `f32` while the
//! gradient check runs the exact same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayBase, Data, Dimension, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use sha2::{Digest, Sha256};

pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $bytes:literal) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = $bytes;
            fn lit(v: f64) -> Self {
                v as $t
            }
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar width"))
            }
        }
    };
}

impl_scalar!(f32, "f32", 4);
impl_scalar!(f64, "f64", 8);

/// Little-endian raw bytes of an array in logical (row-major) order.
pub fn to_le_bytes<T: Scalar, S: Data<Elem = T>, D: Dimension>(a: &ArrayBase<S, D>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * T::BYTES);
    for &v in a.iter() {
        v.write_le(&mut out);
    }
    out
}

/// SHA-256 over shape and little-endian contents, hex encoded.
pub fn digest<T: Scalar, S: Data<Elem = T>, D: Dimension>(a: &ArrayBase<S, D>) -> String {
    let mut h = Sha256::new();
    for d in a.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update(to_le_bytes(a));
    hex::encode(h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn cast2<A: Scalar, B: Scalar>(a: &Array2<A>) -> Array2<B> {
    a.mapv(|v| B::lit(v.as_f64()))
}

pub fn cast1<A: Scalar, B: Scalar>(a: &Array1<A>) -> Array1<B> {
    a.mapv(|v| B::lit(v.as_f64()))
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Unit-normalize in place; zero vectors are left untouched.
pub fn normalize_in_place<T: Scalar>(v: &mut [T]) {
    let n = l2_norm(v);
    if n > T::zero() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}
