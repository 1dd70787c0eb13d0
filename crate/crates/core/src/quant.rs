//! Blockwise NF4 weight quantization with double-quantized block constants,
//! and the low-rank adapter that rides on top of a frozen quantized matrix.
//!
//! Layout of a [`QuantizedTensor`]:
//!
//! * every element gets a 4-bit index into the NF4 codebook, two per byte,
//!   low nibble first;
//! * every block of `block_size_1` consecutive elements has an absmax
//!   constant `c2` stored as an 8-bit code;
//! * every group of `block_size_2` consecutive blocks has an affine
//!   `(scale, offset)` pair `c1` that maps those 8-bit codes back to reals.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autograd::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

pub const DEFAULT_BLOCK_SIZE_1: usize = 64;
pub const DEFAULT_BLOCK_SIZE_2: usize = 256;

/// Index of the exact zero in the codebook.
pub const NF4_ZERO_INDEX: u8 = 7;

// Upper quantile used for the outermost levels (QLoRA's published offset).
const NF4_OFFSET: f64 = 0.967_708_3;

/// The 16 NF4 levels, strictly ascending in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Codebook {
    values: [f64; 16],
}

impl Nf4Codebook {
    pub fn values(&self) -> &[f64; 16] {
        &self.values
    }

    /// Index of the nearest level; ties go to the lower index.
    pub fn nearest(&self, x: f64) -> u8 {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, &v) in self.values.iter().enumerate() {
            let d = (x - v).abs();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        best as u8
    }

    /// Largest distance between neighbouring levels.
    pub fn widest_gap(&self) -> f64 {
        self.values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Builds the codebook: 8 evenly spaced standard-normal quantiles on the
/// positive side, 7 on the negative side, an exact zero, all divided by the
/// largest magnitude.
pub fn build_nf4_codebook() -> Nf4Codebook {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let spaced = |n: usize| -> Vec<f64> {
        (0..n - 1)
            .map(|i| NF4_OFFSET + (0.5 - NF4_OFFSET) * i as f64 / (n - 1) as f64)
            .collect()
    };
    let mut levels: Vec<f64> = spaced(9).into_iter().map(|p| normal.inverse_cdf(p)).collect();
    levels.push(0.0);
    levels.extend(spaced(8).into_iter().map(|p| -normal.inverse_cdf(p)));
    levels.sort_by(f64::total_cmp);
    let max = levels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut values = [0.0; 16];
    for (slot, v) in values.iter_mut().zip(&levels) {
        *slot = v / max;
    }
    // pin the endpoints against rounding in the division
    values[0] = -1.0;
    values[15] = 1.0;
    Nf4Codebook { values }
}

/// Process-wide codebook.
pub fn codebook() -> &'static Nf4Codebook {
    static CODEBOOK: OnceLock<Nf4Codebook> = OnceLock::new();
    CODEBOOK.get_or_init(build_nf4_codebook)
}

/// Second-level constants for one group of blocks: `absmax = offset + code * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConstants {
    pub scale: f64,
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<u8>,
    block_size_1: usize,
    c2_codes: Vec<u8>,
    block_size_2: usize,
    c1: Vec<GroupConstants>,
}

impl QuantizedTensor {
    /// Reassembles a tensor from stored parts, checking every structural invariant.
    pub fn from_parts(
        shape: Vec<usize>,
        codes: Vec<u8>,
        block_size_1: usize,
        c2_codes: Vec<u8>,
        block_size_2: usize,
        c1: Vec<GroupConstants>,
    ) -> Result<Self> {
        let q = Self {
            shape,
            codes,
            block_size_1,
            c2_codes,
            block_size_2,
            c1,
        };
        q.validate()?;
        Ok(q)
    }

    fn validate(&self) -> Result<()> {
        if self.block_size_1 == 0 || self.block_size_2 == 0 {
            return Err(Error::Corruption("zero block size".into()));
        }
        let n = self.numel();
        if self.codes.len() != n.div_ceil(2) {
            return Err(Error::Corruption(format!(
                "{} packed code bytes for {n} elements",
                self.codes.len()
            )));
        }
        if self.c2_codes.len() != self.num_blocks() || self.c1.len() != self.num_groups() {
            return Err(Error::Corruption(format!(
                "expected {} blocks / {} groups, found {} / {}",
                self.num_blocks(),
                self.num_groups(),
                self.c2_codes.len(),
                self.c1.len()
            )));
        }
        if self
            .c1
            .iter()
            .any(|g| !(g.scale.is_finite() && g.offset.is_finite()) || g.scale < 0.0 || g.offset < 0.0)
        {
            return Err(Error::Corruption("invalid second-level constants".into()));
        }
        // a packed odd tail must leave its high nibble empty
        if n % 2 == 1 && self.codes[n / 2] >> 4 != 0 {
            return Err(Error::Corruption("nonzero padding nibble".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn block_size_1(&self) -> usize {
        self.block_size_1
    }

    pub fn block_size_2(&self) -> usize {
        self.block_size_2
    }

    pub fn num_blocks(&self) -> usize {
        self.numel().div_ceil(self.block_size_1)
    }

    pub fn num_groups(&self) -> usize {
        self.num_blocks().div_ceil(self.block_size_2)
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn c2_codes(&self) -> &[u8] {
        &self.c2_codes
    }

    pub fn c1(&self) -> &[GroupConstants] {
        &self.c1
    }

    /// The 4-bit code of element `i`.
    pub fn code(&self, i: usize) -> u8 {
        let byte = self.codes[i / 2];
        if i.is_multiple_of(2) {
            byte & 0x0f
        } else {
            byte >> 4
        }
    }

    pub fn codes(&self) -> Vec<u8> {
        (0..self.numel()).map(|i| self.code(i)).collect()
    }

    /// Reconstructed absmax of every block.
    pub fn block_absmax(&self) -> Vec<f64> {
        self.c2_codes
            .iter()
            .enumerate()
            .map(|(b, &code)| {
                let g = self.c1[b / self.block_size_2];
                g.offset + f64::from(code) * g.scale
            })
            .collect()
    }

    /// Largest possible `|w - double_dequant(q)|` for any element of each block:
    /// half the widest codebook gap at the true absmax, plus the 8-bit
    /// absmax error, plus a rounding allowance.
    pub fn block_error_bounds(&self) -> Vec<f64> {
        let half_gap = codebook().widest_gap() / 2.0;
        self.block_absmax()
            .iter()
            .enumerate()
            .map(|(b, &a)| {
                let absmax_err = self.c1[b / self.block_size_2].scale / 2.0;
                let slack = 8.0 * f64::EPSILON * (a + absmax_err);
                (a + absmax_err) * half_gap + absmax_err + slack
            })
            .collect()
    }
}

/// Quantizes `w` blockwise to NF4 and double-quantizes the block absmax values.
pub fn quantize_nf4(w: &Tensor, block_size_1: usize, block_size_2: usize) -> Result<QuantizedTensor> {
    if block_size_1 == 0 || block_size_2 == 0 {
        return Err(Error::invalid("block sizes must be positive"));
    }
    if !w.is_finite() {
        return Err(Error::invalid("cannot quantize non-finite values"));
    }
    let book = codebook();
    let data = w.data();
    let absmax: Vec<f64> = data
        .chunks(block_size_1)
        .map(|b| b.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();

    let mut codes = vec![0u8; data.len().div_ceil(2)];
    for (b, block) in data.chunks(block_size_1).enumerate() {
        for (j, &x) in block.iter().enumerate() {
            let code = if absmax[b] == 0.0 {
                NF4_ZERO_INDEX
            } else {
                book.nearest(x / absmax[b])
            };
            let i = b * block_size_1 + j;
            if i.is_multiple_of(2) {
                codes[i / 2] |= code;
            } else {
                codes[i / 2] |= code << 4;
            }
        }
    }

    let mut c2_codes = Vec::with_capacity(absmax.len());
    let mut c1 = Vec::with_capacity(absmax.len().div_ceil(block_size_2));
    for group in absmax.chunks(block_size_2) {
        let lo = group.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = group.iter().copied().fold(0.0f64, f64::max);
        let scale = (hi - lo) / 255.0;
        for &a in group {
            let code = if scale > 0.0 {
                ((a - lo) / scale).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            c2_codes.push(code);
        }
        c1.push(GroupConstants { scale, offset: lo });
    }

    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        codes,
        block_size_1,
        c2_codes,
        block_size_2,
        c1,
    })
}

/// Restores full-precision weights: rebuild each block absmax from its 8-bit
/// code and group constants, then scale the codebook level of every element.
pub fn double_dequant(q: &QuantizedTensor) -> Result<Tensor> {
    let book = codebook().values();
    let absmax = q.block_absmax();
    let mut out = Vec::with_capacity(q.numel());
    for i in 0..q.numel() {
        let code = q.code(i) as usize;
        let level = book
            .get(code)
            .ok_or_else(|| Error::Corruption(format!("code {code} at element {i}")))?;
        out.push(level * absmax[i / q.block_size_1]);
    }
    Tensor::new(q.shape.clone(), out)
}

/// Trainable low-rank pair: `delta = down · up · (alpha / rank)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `d_in × r`
    pub down: Tensor,
    /// `r × d_out`
    pub up: Tensor,
    rank: usize,
    alpha: f64,
}

impl LoraAdapter {
    /// `down ~ U(-1/sqrt(d_in), 1/sqrt(d_in))`, `up = 0`, so the initial delta is zero.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::invalid(format!(
                "adapter rank {rank} must be in 1..={}",
                d_in.min(d_out)
            )));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let down = (0..d_in * rank).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::from_parts(
            Tensor::new(vec![d_in, rank], down)?,
            Tensor::zeros(vec![rank, d_out]),
            alpha,
        )
    }

    pub fn from_parts(down: Tensor, up: Tensor, alpha: f64) -> Result<Self> {
        if down.shape().len() != 2 || up.shape().len() != 2 || down.shape()[1] != up.shape()[0] {
            return Err(Error::Shape {
                op: "lora",
                left: down.shape().to_vec(),
                right: up.shape().to_vec(),
            });
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("adapter alpha must be positive, got {alpha}")));
        }
        let rank = down.shape()[1];
        let mut down = down;
        let mut up = up;
        down.set_requires_grad(true);
        up.set_requires_grad(true);
        Ok(Self { down, up, rank, alpha })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.up.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.down.numel() + self.up.numel()
    }

    /// Dense `d_in × d_out` delta, scaling included.
    pub fn delta(&self) -> Result<Tensor> {
        let prod = self.down.matmul(&self.up)?;
        let s = self.scaling();
        let data = prod.data().iter().map(|v| v * s).collect();
        Tensor::new(prod.shape().to_vec(), data)
    }

    /// Puts both factors on the tape as gradient-carrying leaves.
    pub fn register(&self, tape: &mut Tape) -> AdapterIds {
        AdapterIds {
            down: tape.leaf(self.down.clone()),
            up: tape.leaf(self.up.clone()),
            scaling: self.scaling(),
        }
    }
}

/// Tape handles of a registered adapter.
#[derive(Debug, Clone, Copy)]
pub struct AdapterIds {
    pub down: TensorId,
    pub up: TensorId,
    pub scaling: f64,
}

/// `x · base + (x · down · up) · scaling` on the tape. `x` may carry any
/// number of leading axes; the last one must equal the rows of `base`.
pub fn linear_on_tape(tape: &mut Tape, x: TensorId, base: TensorId, adapter: Option<AdapterIds>) -> Result<TensorId> {
    let in_shape = tape.shape(x).to_vec();
    let d_in = *in_shape.last().ok_or_else(|| Error::invalid("linear on a scalar"))?;
    let d_out = tape.shape(base).get(1).copied().unwrap_or(0);
    if tape.shape(base).len() != 2 || tape.shape(base)[0] != d_in {
        return Err(Error::Shape {
            op: "linear",
            left: in_shape,
            right: tape.shape(base).to_vec(),
        });
    }
    let flat = if in_shape.len() == 2 {
        x
    } else {
        tape.reshape(x, vec![tape.value(x).numel() / d_in, d_in])?
    };
    let mut y = tape.matmul(flat, base)?;
    if let Some(ad) = adapter {
        let h = tape.matmul(flat, ad.down)?;
        let delta = tape.matmul(h, ad.up)?;
        let delta = tape.scale(delta, ad.scaling);
        y = tape.add(y, delta)?;
    }
    if in_shape.len() == 2 {
        Ok(y)
    } else {
        let mut out_shape = in_shape;
        *out_shape.last_mut().expect("non-empty") = d_out;
        tape.reshape(y, out_shape)
    }
}

/// `X · doubleDequant(q) + X · down · up · scaling`, with the dequantized base
/// entering the tape as a frozen constant so only the adapter gets gradients.
pub fn quantized_linear_forward(
    tape: &mut Tape,
    x: TensorId,
    q: &QuantizedTensor,
    adapter: &LoraAdapter,
) -> Result<(TensorId, AdapterIds)> {
    if q.shape().len() != 2 || adapter.d_in() != q.shape()[0] || adapter.d_out() != q.shape()[1] {
        return Err(Error::Shape {
            op: "quantized_linear",
            left: q.shape().to_vec(),
            right: vec![adapter.d_in(), adapter.d_out()],
        });
    }
    let base = tape.leaf(double_dequant(q)?);
    let ids = adapter.register(tape);
    Ok((linear_on_tape(tape, x, base, Some(ids))?, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Inverse-normal-CDF construction evaluated with 50-digit arithmetic.
    const ORACLE: [f64; 16] = [
        -1.0,
        -0.696_192_890_603_720_1,
        -0.525_073_038_695_229_1,
        -0.394_917_490_699_309_9,
        -0.284_441_357_618_107_5,
        -0.184_773_435_192_888_8,
        -0.091_049_992_144_279_38,
        0.0,
        0.079_580_329_094_169_35,
        0.160_930_172_704_936_1,
        0.246_112_293_929_935_8,
        0.337_915_193_521_655,
        0.440_709_802_413_19,
        0.562_616_970_075_237_1,
        0.722_956_727_892_882_2,
        1.0,
    ];

    #[test]
    fn codebook_matches_oracle() {
        let book = build_nf4_codebook();
        let v = book.values();
        assert_eq!(v[0], -1.0);
        assert_eq!(v[15], 1.0);
        assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 1);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        for (a, b) in v.iter().zip(ORACLE) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn nearest_prefers_lower_index_on_ties() {
        let book = codebook();
        let v = book.values();
        let mid = (v[7] + v[8]) / 2.0;
        assert_eq!(book.nearest(mid), 7);
        assert_eq!(book.nearest(2.0), 15);
        assert_eq!(book.nearest(-2.0), 0);
    }

    #[test]
    fn zeros_round_trip_exactly() {
        let w = Tensor::zeros(vec![10, 13]);
        let q = quantize_nf4(&w, 64, 256).unwrap();
        assert!(q.codes().iter().all(|&c| c == NF4_ZERO_INDEX));
        assert_eq!(double_dequant(&q).unwrap().data(), w.data());
    }

    #[test]
    fn absmax_element_round_trips() {
        let w = Tensor::new(vec![4], vec![0.1, -0.3, 2.5, 0.7]).unwrap();
        let q = quantize_nf4(&w, 64, 256).unwrap();
        let back = double_dequant(&q).unwrap();
        assert_eq!(back.data()[2], 2.5);
        let w = Tensor::new(vec![3], vec![0.1, -4.0, 0.7]).unwrap();
        let back = double_dequant(&quantize_nf4(&w, 64, 256).unwrap()).unwrap();
        assert_eq!(back.data()[1], -4.0);
    }

    #[test]
    fn hand_traced_single_block() {
        // absmax 1, so each element maps to its own level and c2 is exact
        let w = Tensor::new(vec![4], vec![1.0, -1.0, 0.5, 0.0]).unwrap();
        let q = quantize_nf4(&w, 64, 256).unwrap();
        // 0.5 lies between 0.4407 (index 12) and 0.5626 (index 13); 0.4407 is closer
        assert_eq!(q.codes(), vec![15, 0, 12, 7]);
        let back = double_dequant(&q).unwrap();
        let expected = [1.0, -1.0, ORACLE[12], 0.0];
        for (a, b) in back.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn block_counts() {
        let w = Tensor::new(vec![3, 50], (0..150).map(|i| i as f64).collect()).unwrap();
        let q = quantize_nf4(&w, 64, 2).unwrap();
        assert_eq!(q.num_blocks(), 3);
        assert_eq!(q.num_groups(), 2);
        assert_eq!(q.packed_codes().len(), 75);
        assert!(q.block_absmax().iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn rejects_non_finite_and_bad_blocks() {
        let w = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(quantize_nf4(&w, 64, 256).is_err());
        let w = Tensor::zeros(vec![2]);
        assert!(quantize_nf4(&w, 0, 256).is_err());
    }

    #[test]
    fn corrupt_parts_are_refused() {
        let w = Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let q = quantize_nf4(&w, 2, 2).unwrap();
        let mut codes = q.packed_codes().to_vec();
        codes[2] |= 0xf0;
        let bad = QuantizedTensor::from_parts(q.shape().to_vec(), codes, 2, q.c2_codes().to_vec(), 2, q.c1().to_vec());
        assert!(matches!(bad, Err(Error::Corruption(_))));
        let bad = QuantizedTensor::from_parts(
            q.shape().to_vec(),
            q.packed_codes().to_vec(),
            2,
            vec![0],
            2,
            q.c1().to_vec(),
        );
        assert!(matches!(bad, Err(Error::Corruption(_))));
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ad = LoraAdapter::init(8, 6, 2, 4.0, &mut rng).unwrap();
        assert_eq!(ad.scaling(), 2.0);
        assert!(ad.delta().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(ad.down.data().iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
        assert!(LoraAdapter::init(8, 6, 7, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::init(8, 6, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn quantized_linear_zero_input_and_zero_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let q = quantize_nf4(&w, 8, 2).unwrap();
        let ad = LoraAdapter::init(6, 4, 2, 4.0, &mut rng).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 6]));
        let (y, _) = quantized_linear_forward(&mut tape, x, &q, &ad).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let xs: Vec<f64> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2 = Tensor::new(vec![3, 6], xs).unwrap();
        let base = x2.matmul(&double_dequant(&q).unwrap()).unwrap();
        let x = tape.leaf(x2);
        let (y, _) = quantized_linear_forward(&mut tape, x, &q, &ad).unwrap();
        assert_eq!(tape.value(y).data(), base.data());
    }
}
