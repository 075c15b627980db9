//! Integer activation tensors and their test-vector file format.
//!
//! File layout: one line of JSON header terminated by `\n`, followed by the
//! codes as little-endian two's complement (1, 2 or 4 bytes per code, from the
//! spec's bit-width). The header is `{"dims": [c, h, w], "spec": {...}, "count": n}`.

use crate::ir::QuantSpec;
use crate::model::{read_codes, write_codes};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Activation tensor, channel-innermost (`(h, w, c)` row-major), matching stream order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tensor {
    /// `[channels, height, width]`.
    pub dims: [usize; 3],
    pub codes: Vec<i32>,
    pub spec: QuantSpec,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor header: {0}")]
    Header(String),
    #[error("tensor holds {got} codes, dims {dims:?} need {want}")]
    Length { dims: [usize; 3], want: usize, got: usize },
    #[error("code {code} at {index} outside {spec} range")]
    Range { index: usize, code: i64, spec: QuantSpec },
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spec: QuantSpec,
    count: usize,
}

impl Tensor {
    pub fn new(dims: [usize; 3], codes: Vec<i32>, spec: QuantSpec) -> Result<Self, TensorError> {
        let t = Self { dims, codes, spec };
        t.check()?;
        Ok(t)
    }

    pub fn zeros(dims: [usize; 3], spec: QuantSpec) -> Self {
        Self { dims, codes: vec![0; dims.iter().product()], spec }
    }

    pub fn check(&self) -> Result<(), TensorError> {
        let want = self.dims.iter().product();
        if self.codes.len() != want {
            return Err(TensorError::Length { dims: self.dims, want, got: self.codes.len() });
        }
        if let Some(index) = self.codes.iter().position(|&c| !self.spec.contains(c as i64)) {
            return Err(TensorError::Range { index, code: self.codes[index] as i64, spec: self.spec });
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    /// Index of `(c, y, x)` in channel-innermost order.
    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (y * self.dims[2] + x) * self.dims[0] + c
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> i32 {
        self.codes[self.idx(c, y, x)]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header { dims: self.dims, spec: self.spec, count: self.codes.len() };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        write_codes(&mut out, &self.codes, self.spec);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| TensorError::Header("missing newline".into()))?;
        let h: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| TensorError::Header(e.to_string()))?;
        if !h.spec.is_valid() {
            return Err(TensorError::Header(format!("bit-width {} not supported", h.spec.bw)));
        }
        let codes = read_codes(&bytes[nl + 1..], 0, h.count, h.spec.code_bytes(), h.spec.signed)
            .ok_or_else(|| TensorError::Header(format!("payload shorter than {} codes", h.count)))?;
        Self::new(h.dims, codes, h.spec)
    }

    /// Order-sensitive FNV-1a digest of the codes, handy for stable comparisons.
    pub fn digest(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &c in &self.codes {
            for b in c.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn file_round_trip(c in 1usize..4, h in 1usize..5, w in 1usize..5, bw in prop::sample::select(vec![8u32, 16, 32]), seed: u64) {
            let spec = QuantSpec::signed(bw, 3);
            let n = c * h * w;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<i32> = (0..n).map(|_| rng.gen_range(spec.q_min()..=spec.q_max()) as i32).collect();
            let t = Tensor::new([c, h, w], codes, spec).unwrap();
            prop_assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }

    #[test]
    fn rejects_bad_length_and_range() {
        let s = QuantSpec::signed(8, 0);
        assert!(matches!(Tensor::new([1, 1, 2], vec![1], s), Err(TensorError::Length { .. })));
        assert!(matches!(Tensor::new([1, 1, 1], vec![300], s), Err(TensorError::Range { .. })));
    }
}
