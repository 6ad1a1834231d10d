//! Flat parameter vectors and the fixed-point ring codec used for masked
//! summation.
//!
//! All reductions run in ascending input order, so identical inputs always
//! produce bit-identical outputs.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Flat model state exchanged between the server and the silos.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_dims(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    /// Writes the `.pv` checkpoint encoding: a little-endian `u64` length
    /// followed by that many little-endian IEEE-754 doubles.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.values.len());
        self.write_to(&mut out).expect("write to Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let malformed = |detail: String| Error::Format {
            what: "parameter vector",
            detail,
        };
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|e| malformed(format!("length prefix: {e}")))?;
        let dim = u64::from_le_bytes(len) as usize;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)
            .map_err(|e| malformed(e.to_string()))?;
        if raw.len() != dim * 8 {
            return Err(malformed(format!(
                "header declares {dim} values but body holds {} bytes",
                raw.len()
            )));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingCheckpoint(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

/// `a - b`, elementwise.
pub fn vec_sub(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    check_dims(a, b)?;
    let values = a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
    ParamVector::new(values)
}

/// `Σ wᵢ·vᵢ`, accumulated in input order.
pub fn weighted_sum(vectors: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = vectors.first().ok_or(Error::NoContributions)?;
    if weights.len() != vectors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} vectors",
            weights.len(),
            vectors.len()
        )));
    }
    for v in vectors {
        check_dims(first, v)?;
    }
    let mut acc = vec![0.0; first.dim()];
    for (v, &w) in vectors.iter().zip(weights) {
        for (a, x) in acc.iter_mut().zip(&v.values) {
            *a += w * x;
        }
    }
    ParamVector::new(acc)
}

/// `alpha·local + (1 − alpha)·global`. The endpoints return their input
/// unchanged.
pub fn interpolate(global: &ParamVector, local: &ParamVector, alpha: f64) -> Result<ParamVector> {
    check_dims(global, local)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if alpha == 0.0 {
        return Ok(global.clone());
    }
    if alpha == 1.0 {
        return Ok(local.clone());
    }
    let values = global
        .values
        .iter()
        .zip(&local.values)
        .map(|(g, l)| alpha * l + (1.0 - alpha) * g)
        .collect();
    ParamVector::new(values)
}

/// Fixed-point parameters for the ring `Z / 2^modulus_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointParams {
    pub frac_bits: u32,
    pub modulus_bits: u32,
}

impl Default for FixedPointParams {
    fn default() -> Self {
        Self {
            frac_bits: 24,
            modulus_bits: 64,
        }
    }
}

impl FixedPointParams {
    pub fn validate(&self) -> Result<()> {
        if self.modulus_bits == 0
            || self.modulus_bits > 64
            || self.frac_bits + 2 >= self.modulus_bits
        {
            return Err(Error::InvalidFixedPoint {
                frac_bits: self.frac_bits,
                modulus_bits: self.modulus_bits,
            });
        }
        Ok(())
    }

    /// Bit mask selecting the low `modulus_bits` of a word.
    pub fn word_mask(&self) -> u64 {
        if self.modulus_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.modulus_bits) - 1
        }
    }

    /// Largest magnitude that may be encoded: `2^(m − f − 2)`.
    pub fn headroom(&self) -> f64 {
        2f64.powi((self.modulus_bits - self.frac_bits - 2) as i32)
    }

    pub fn resolution(&self) -> f64 {
        2f64.powi(-(self.frac_bits as i32))
    }

    pub fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.word_mask()
    }

    pub fn sub(&self, a: u64, b: u64) -> u64 {
        a.wrapping_sub(b) & self.word_mask()
    }
}

/// A vector of words in `Z / 2^modulus_bits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPointVector {
    pub words: Vec<u64>,
    pub params: FixedPointParams,
}

impl FixedPointVector {
    pub fn zeros(dim: usize, params: FixedPointParams) -> Self {
        Self {
            words: vec![0; dim],
            params,
        }
    }

    pub fn dim(&self) -> usize {
        self.words.len()
    }

    /// Wordwise `self += other (mod q)`.
    pub fn add_assign(&mut self, other: &FixedPointVector) -> Result<()> {
        self.check_compatible(other)?;
        let p = self.params;
        for (a, &b) in self.words.iter_mut().zip(&other.words) {
            *a = p.add(*a, b);
        }
        Ok(())
    }

    /// Wordwise `self -= other (mod q)`.
    pub fn sub_assign(&mut self, other: &FixedPointVector) -> Result<()> {
        self.check_compatible(other)?;
        let p = self.params;
        for (a, &b) in self.words.iter_mut().zip(&other.words) {
            *a = p.sub(*a, b);
        }
        Ok(())
    }

    fn check_compatible(&self, other: &FixedPointVector) -> Result<()> {
        if self.params != other.params {
            return Err(Error::InvalidArgument(
                "fixed-point parameters differ between operands".into(),
            ));
        }
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }
}

/// Maps each `x` to `round(x·2^f) mod 2^m`.
pub fn fp_encode(v: &ParamVector, params: FixedPointParams) -> Result<FixedPointVector> {
    params.validate()?;
    let bound = params.headroom();
    let scale = 2f64.powi(params.frac_bits as i32);
    let mask = params.word_mask();
    let words = v
        .values
        .iter()
        .map(|&x| {
            if !x.is_finite() || x.abs() >= bound {
                return Err(Error::FixedPointOverflow { value: x, bound });
            }
            Ok(((x * scale).round() as i64 as u64) & mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedPointVector { words, params })
}

/// Inverse of [`fp_encode`]; words in the upper half of the ring decode as
/// negative values.
pub fn fp_decode(w: &FixedPointVector) -> Result<ParamVector> {
    let p = w.params;
    p.validate()?;
    let scale = p.resolution();
    let shift = 64 - p.modulus_bits;
    let values = w
        .words
        .iter()
        .map(|&word| {
            // sign-extend from bit m-1
            let signed = ((word << shift) as i64) >> shift;
            signed as f64 * scale
        })
        .collect();
    ParamVector::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn sub_examples() {
        assert_eq!(
            vec_sub(&pv(&[1., 2.]), &pv(&[1., 2.])).unwrap(),
            pv(&[0., 0.])
        );
        assert_eq!(
            vec_sub(&pv(&[3., 0.]), &pv(&[1., -1.])).unwrap(),
            pv(&[2., 1.])
        );
        assert!(matches!(
            vec_sub(&pv(&[1.]), &pv(&[1., 2.])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sub_then_add_restores_input() {
        let mut rng = crate::seed::rng(11);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = vec_sub(&pv(&a), &pv(&b)).unwrap();
        // x - y + y need not round-trip exactly in floating point; the
        // error is bounded by one ulp of the operands.
        for ((d, b), a) in d.as_slice().iter().zip(&b).zip(&a) {
            assert!((d + b - a).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn weighted_sum_examples() {
        let out = weighted_sum(&[pv(&[1., 0.]), pv(&[0., 1.])], &[0.25, 0.75]).unwrap();
        assert_eq!(out, pv(&[0.25, 0.75]));
        let vs = [pv(&[3., -2., 7.]), pv(&[1., 1., 1.]), pv(&[9., 9., 9.])];
        assert_eq!(weighted_sum(&vs, &[1., 0., 0.]).unwrap(), vs[0]);
        assert!(matches!(
            weighted_sum(&[], &[]),
            Err(Error::NoContributions)
        ));
    }

    #[test]
    fn weighted_sum_uniform_matches_mean() {
        let mut rng = crate::seed::rng(3);
        let vs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..100).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let pvs: Vec<_> = vs.iter().map(|v| pv(v)).collect();
        let out = weighted_sum(&pvs, &[1. / 3.; 3]).unwrap();
        for (k, got) in out.as_slice().iter().enumerate() {
            let mean = (vs[0][k] + vs[1][k] + vs[2][k]) / 3.0;
            assert!((got - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolate_examples() {
        let g = pv(&[0.1, -3.3, 7.0]);
        let l = pv(&[1.7, 2.9, -0.2]);
        assert_eq!(interpolate(&g, &l, 0.0).unwrap(), g);
        assert_eq!(interpolate(&g, &l, 1.0).unwrap(), l);
        let out = interpolate(&pv(&[0., 0.]), &pv(&[10., -10.]), 0.9).unwrap();
        assert_eq!(out, pv(&[9., -9.]));
        assert!(matches!(
            interpolate(&g, &l, 1.5),
            Err(Error::InvalidAlpha(_))
        ));
        assert!(matches!(
            interpolate(&g, &l, -0.1),
            Err(Error::InvalidAlpha(_))
        ));
    }

    #[test]
    fn interpolate_midpoint_is_weighted_sum() {
        let g = pv(&[0.3, -1.25, 4.0, 1e-3]);
        let l = pv(&[-2.0, 0.75, 3.5, 8.0]);
        let a = interpolate(&g, &l, 0.5).unwrap();
        let b = weighted_sum(&[g, l], &[0.5, 0.5]).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-15);
    }

    #[test]
    fn encode_examples() {
        let p = FixedPointParams {
            frac_bits: 16,
            modulus_bits: 64,
        };
        assert_eq!(fp_encode(&pv(&[1.5]), p).unwrap().words, vec![98304]);
        assert_eq!(
            fp_encode(&pv(&[-1.0]), p).unwrap().words,
            vec![0u64.wrapping_sub(65536)]
        );
        assert!(matches!(
            fp_encode(&pv(&[2f64.powi(46)]), p),
            Err(Error::FixedPointOverflow { .. })
        ));
    }

    #[test]
    fn encode_round_trip_small_ring() {
        let p = FixedPointParams {
            frac_bits: 8,
            modulus_bits: 20,
        };
        let v = pv(&[-3.25, 0.0, 511.0, -511.99]);
        let w = fp_encode(&v, p).unwrap();
        assert!(w.words.iter().all(|&x| x < 1 << 20));
        let back = fp_decode(&w).unwrap();
        assert!(back.max_abs_diff(&v) <= p.resolution());
    }

    #[test]
    fn encode_round_trip_random() {
        let p = FixedPointParams {
            frac_bits: 16,
            modulus_bits: 64,
        };
        let mut rng = crate::seed::rng(5);
        let v = pv(&(0..10_000)
            .map(|_| rng.random_range(-100.0..100.0))
            .collect::<Vec<_>>());
        let back = fp_decode(&fp_encode(&v, p).unwrap()).unwrap();
        assert!(back.max_abs_diff(&v) <= 2f64.powi(-16));
    }

    #[test]
    fn rejects_degenerate_rings() {
        for (f, m) in [(24, 0), (24, 65), (62, 64), (24, 26)] {
            let p = FixedPointParams {
                frac_bits: f,
                modulus_bits: m,
            };
            assert!(fp_encode(&pv(&[0.0]), p).is_err());
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            ParamVector::new(vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        let huge = pv(&[f64::MAX]);
        assert!(weighted_sum(&[huge.clone(), huge], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn pv_file_layout() {
        let v = pv(&[1.0, -2.5]);
        let bytes = v.to_bytes();
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &1.0f64.to_le_bytes());
        assert_eq!(ParamVector::read_from(&bytes[..]).unwrap(), v);
        assert!(ParamVector::read_from(&bytes[..12]).is_err());
    }

    proptest! {
        #[test]
        fn fp_round_trip_within_resolution(
            xs in prop::collection::vec(-1000.0f64..1000.0, 1..64),
            f in 8u32..30,
        ) {
            let p = FixedPointParams { frac_bits: f, modulus_bits: 64 };
            let v = pv(&xs);
            let back = fp_decode(&fp_encode(&v, p).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&v) <= p.resolution());
        }

        #[test]
        fn modular_sum_of_encodings_tracks_real_sum(
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 16), 1..12),
        ) {
            let p = FixedPointParams::default();
            let mut acc = FixedPointVector::zeros(16, p);
            for r in &rows {
                acc.add_assign(&fp_encode(&pv(r), p).unwrap()).unwrap();
            }
            let decoded = fp_decode(&acc).unwrap();
            let pvs: Vec<_> = rows.iter().map(|r| pv(r)).collect();
            let exact = weighted_sum(&pvs, &vec![1.0; rows.len()]).unwrap();
            prop_assert!(decoded.max_abs_diff(&exact) <= rows.len() as f64 * p.resolution());
        }

        #[test]
        fn pv_bytes_round_trip(xs in prop::collection::vec(-1e300f64..1e300, 0..32)) {
            let v = pv(&xs);
            prop_assert_eq!(ParamVector::read_from(&v.to_bytes()[..]).unwrap(), v);
        }

        #[test]
        fn weighted_sum_is_reproducible(
            rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 8), 1..6),
        ) {
            let pvs: Vec<_> = rows.iter().map(|r| pv(r)).collect();
            let w: Vec<f64> = (0..rows.len()).map(|i| (i + 1) as f64 / 7.0).collect();
            let a = weighted_sum(&pvs, &w).unwrap();
            let b = weighted_sum(&pvs, &w).unwrap();
            prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
