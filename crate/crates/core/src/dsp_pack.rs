//! Bit-exact emulation of the double-MAC DSP packing.
//!
//! Two signed 8-bit activations `a` and `d` that share the parameter `b` are
//! packed into the 27-bit multiplier port as `(a << 18) + d`; the parameter is
//! sign-extended into the 18-bit port. One multiplication then yields
//! `a*b << 18` plus `d*b`, and a chain of DSPs sums these packed products in
//! the 48-bit post-adder. The low 18-bit field holds `sum(d*b)`; its sign
//! borrows from the high field, which the restore stage compensates.
//!
//! With 8-bit operands every product fits in 16 bits, leaving two guard bits in
//! the 18-bit low field: at most [`MAX_CHAIN`] products can be summed before the
//! low field may overflow.

use thiserror::Error;

pub const LANE_SHIFT: u32 = 18;
pub const PORT_A_BITS: u32 = 27;
pub const PORT_B_BITS: u32 = 18;
pub const PRODUCT_BITS: u32 = 36;
pub const ACC_BITS: u32 = 48;
/// Longest chain whose low field cannot overflow.
pub const MAX_CHAIN: usize = 7;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PackError {
    #[error("chain already holds {0} taps (limit {MAX_CHAIN})")]
    ChainFull(usize),
    #[error("{what} value {value} does not fit in {bits} bits")]
    Width { what: &'static str, value: i64, bits: u32 },
    #[error("operand rows differ in length: {0}, {1}, {2}")]
    LengthMismatch(usize, usize, usize),
}

#[inline]
fn fits(value: i64, bits: u32) -> bool {
    let lim = 1i64 << (bits - 1);
    (-lim..lim).contains(&value)
}

#[inline]
fn check(what: &'static str, value: i64, bits: u32) -> Result<i64, PackError> {
    if fits(value, bits) {
        Ok(value)
    } else {
        Err(PackError::Width { what, value, bits })
    }
}

/// Sign-extends the low `bits` bits of `v`.
#[inline]
fn sign_extend(v: i64, bits: u32) -> i64 {
    let s = 64 - bits;
    (v << s) >> s
}

/// Operands presented to one packed DSP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackedOperand {
    pub word27: i64,
    pub word18: i64,
}

impl PackedOperand {
    pub fn new(a: i8, d: i8, b: i8) -> Self {
        Self { word27: pack_activations(a, d), word18: b as i64 }
    }
}

/// `(a << 18) + sign_extend(d)`; always fits the 27-bit port for 8-bit inputs.
pub fn pack_activations(a: i8, d: i8) -> i64 {
    ((a as i64) << LANE_SHIFT) + d as i64
}

/// Partial accumulation travelling down a DSP chain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChainState {
    pub p: i64,
    pub taps_done: usize,
}

/// One DSP stage: `p + word27 * word18`, with every port width checked.
pub fn packed_mac(op: PackedOperand, prev: ChainState) -> Result<ChainState, PackError> {
    if prev.taps_done >= MAX_CHAIN {
        return Err(PackError::ChainFull(prev.taps_done));
    }
    let a = check("27-bit port", op.word27, PORT_A_BITS)?;
    let b = check("18-bit port", op.word18, PORT_B_BITS)?;
    let m = check("product", a * b, PRODUCT_BITS)?;
    let p = check("post-adder", prev.p + m, ACC_BITS)?;
    Ok(ChainState { p, taps_done: prev.taps_done + 1 })
}

/// Splits the 48-bit chain result into the two lane sums `(sum a*b, sum d*b)`.
pub fn restore(fin: ChainState) -> (i64, i64) {
    let low = sign_extend(fin.p, LANE_SHIFT);
    // A negative low field borrowed one unit from the high field.
    let high = (fin.p - low) >> LANE_SHIFT;
    (high, low)
}

/// Splits `n_taps` into `ceil(n / 7)` chains, as balanced as possible
/// (longer chains first).
pub fn split_chain(n_taps: usize) -> Vec<usize> {
    if n_taps == 0 {
        return Vec::new();
    }
    let parts = n_taps.div_ceil(MAX_CHAIN);
    let base = n_taps / parts;
    let extra = n_taps % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Two dot products sharing the parameter row, computed on packed DSP chains.
/// Returns `(init + a·b, init + d·b)`.
pub fn packed_dot(a_row: &[i8], d_row: &[i8], b_row: &[i8], init: i32) -> Result<(i64, i64), PackError> {
    if a_row.len() != d_row.len() || a_row.len() != b_row.len() {
        return Err(PackError::LengthMismatch(a_row.len(), d_row.len(), b_row.len()));
    }
    let mut acc_a = init as i64;
    let mut acc_d = init as i64;
    let mut start = 0;
    for len in split_chain(a_row.len()) {
        let mut st = ChainState::default();
        for j in start..start + len {
            st = packed_mac(PackedOperand::new(a_row[j], d_row[j], b_row[j]), st)?;
        }
        let (sa, sd) = restore(st);
        acc_a += sa;
        acc_d += sd;
        start += len;
    }
    Ok((acc_a, acc_d))
}

/// Unchecked fast path used by the simulator's MAC array: identical arithmetic
/// without the per-stage width checks (those are covered by the exhaustive
/// tests on [`packed_mac`]).
#[inline]
pub fn packed_dot_fast(a_row: &[i32], d_row: &[i32], b_row: &[i32]) -> (i64, i64) {
    let n = a_row.len();
    let parts = n.div_ceil(MAX_CHAIN).max(1);
    let base = n / parts;
    let extra = n % parts;
    let (mut acc_a, mut acc_d) = (0i64, 0i64);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        let mut p = 0i64;
        for j in start..start + len {
            p += (((a_row[j] as i64) << LANE_SHIFT) + d_row[j] as i64) * b_row[j] as i64;
        }
        let low = sign_extend(p, LANE_SHIFT);
        acc_a += (p - low) >> LANE_SHIFT;
        acc_d += low;
        start += len;
    }
    (acc_a, acc_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct(a: &[i8], d: &[i8], b: &[i8]) -> (i64, i64) {
        let sa = a.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum();
        let sd = d.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum();
        (sa, sd)
    }

    fn chain(a: &[i8], d: &[i8], b: &[i8]) -> ChainState {
        let mut st = ChainState::default();
        for j in 0..a.len() {
            st = packed_mac(PackedOperand::new(a[j], d[j], b[j]), st).unwrap();
        }
        st
    }

    #[test]
    fn pack_examples() {
        assert_eq!(pack_activations(0, 0), 0);
        assert_eq!(pack_activations(1, -1), 262_143);
        assert_eq!(pack_activations(-128, 127), -128 * (1 << 18) + 127);
        assert!(fits(pack_activations(-128, -128), PORT_A_BITS));
        assert!(fits(pack_activations(127, 127), PORT_A_BITS));
    }

    #[test]
    fn mac_examples() {
        let st = ChainState { p: 12345, taps_done: 2 };
        assert_eq!(packed_mac(PackedOperand::new(0, 0, 77), st).unwrap().p, 12345);
        let st = packed_mac(PackedOperand::new(1, 1, 1), ChainState::default()).unwrap();
        assert_eq!(st.p, (1 << 18) + 1);
        let full = ChainState { p: 0, taps_done: 7 };
        assert_eq!(packed_mac(PackedOperand::new(1, 1, 1), full), Err(PackError::ChainFull(7)));
    }

    #[test]
    fn restore_examples() {
        let st = packed_mac(PackedOperand::new(0, -1, 1), ChainState::default()).unwrap();
        assert_eq!(restore(st), (0, -1));
        assert_eq!(restore(ChainState::default()), (0, 0));
        let a = [127i8; 7];
        let b = [-128i8; 7];
        assert_eq!(restore(chain(&a, &a, &b)), direct(&a, &a, &b));
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_chain(9), vec![5, 4]);
        assert_eq!(split_chain(7), vec![7]);
        assert_eq!(split_chain(1), vec![1]);
        assert_eq!(split_chain(15), vec![5, 5, 5]);
        for n in 0..100 {
            let parts = split_chain(n);
            assert_eq!(parts.iter().sum::<usize>(), n);
            assert!(parts.iter().all(|&p| (1..=MAX_CHAIN).contains(&p)));
        }
    }

    #[test]
    fn eight_tap_chain_can_overflow_low_field() {
        // The reason for the 7-tap limit: 8 products of (-128)^2 exceed the low field.
        let a = [-128i8; 8];
        let mut st = ChainState::default();
        for j in 0..7 {
            st = packed_mac(PackedOperand::new(a[j], a[j], a[j]), st).unwrap();
        }
        assert!(packed_mac(PackedOperand::new(-128, -128, -128), st).is_err());
        let p = (0..8).map(|_| pack_activations(-128, -128) * -128).sum::<i64>();
        let low = sign_extend(p, LANE_SHIFT);
        assert_ne!(low, 8 * 16384);
    }

    #[test]
    fn corner_sweep_all_lengths() {
        let corners = [-128i8, -127, -1, 0, 1, 127];
        for len in 1..=MAX_CHAIN {
            for &a in &corners {
                for &d in &corners {
                    for &b in &corners {
                        let ar = vec![a; len];
                        let dr = vec![d; len];
                        let br = vec![b; len];
                        assert_eq!(restore(chain(&ar, &dr, &br)), direct(&ar, &dr, &br));
                    }
                }
            }
        }
    }

    #[test]
    fn random_chains_and_dots() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20_000 {
            let len = rng.gen_range(0..=MAX_CHAIN);
            let a: Vec<i8> = (0..len).map(|_| rng.gen()).collect();
            let d: Vec<i8> = (0..len).map(|_| rng.gen()).collect();
            let b: Vec<i8> = (0..len).map(|_| rng.gen()).collect();
            assert_eq!(restore(chain(&a, &d, &b)), direct(&a, &d, &b));
        }
        for _ in 0..20_000 {
            let len = rng.gen_range(0..=20);
            let a: Vec<i8> = (0..len).map(|_| rng.gen()).collect();
            let d: Vec<i8> = (0..len).map(|_| rng.gen()).collect();
            let b: Vec<i8> = (0..len).map(|_| rng.gen()).collect();
            let init: i32 = rng.gen_range(-1_000_000..1_000_000);
            let (sa, sd) = direct(&a, &d, &b);
            assert_eq!(packed_dot(&a, &d, &b, init).unwrap(), (sa + init as i64, sd + init as i64));
            let wide = |v: &[i8]| v.iter().map(|&x| x as i32).collect::<Vec<_>>();
            assert_eq!(packed_dot_fast(&wide(&a), &wide(&d), &wide(&b)), (sa, sd));
        }
    }

    #[test]
    fn dot_edge_cases() {
        assert_eq!(packed_dot(&[], &[], &[], 42).unwrap(), (42, 42));
        assert_eq!(packed_dot(&[1; 9], &[1; 9], &[1; 9], 0).unwrap(), (9, 9));
        assert!(matches!(packed_dot(&[1], &[1, 2], &[1], 0), Err(PackError::LengthMismatch(..))));
    }
}
