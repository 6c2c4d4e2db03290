//! Quantization error and bin-usage diagnostics.

use super::{int4_raw_level, ChannelScale, QuantGrid, INT4_MAX_LEVEL};
use crate::error::{Result, UpqError};
use crate::tensor::Tensor;

/// `‖W − Wq‖_F`, accumulated in double precision.
pub fn quant_error_norm(w: &Tensor, wq: &Tensor) -> Result<f64> {
    if w.shape() != wq.shape() {
        return Err(UpqError::contract(format!(
            "error norm of mismatched shapes {:?} and {:?}",
            w.shape(),
            wq.shape()
        )));
    }
    Ok(w.data()
        .iter()
        .zip(wq.data())
        .map(|(a, b)| {
            let d = *a as f64 - *b as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Fraction of weights on each INT2 level, ordered `−3, −1, 1, 3`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BinUtilization {
    pub counts: [u64; 4],
}

impl BinUtilization {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn fractions(&self) -> [f64; 4] {
        let t = self.total().max(1) as f64;
        self.counts.map(|c| c as f64 / t)
    }

    /// Combined share of the large-magnitude levels `{−3, 3}`.
    pub fn outer_share(&self) -> f64 {
        let f = self.fractions();
        f[0] + f[3]
    }

    pub fn merge(&mut self, other: &BinUtilization) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

/// Counts INT2 level usage; every entry must sit exactly on its row's grid.
pub fn bin_utilization(wq: &Tensor, delta: &ChannelScale) -> Result<BinUtilization> {
    if wq.shape().len() != 2 || wq.rows() != delta.len() {
        return Err(UpqError::contract(format!(
            "bin utilization: weights {:?} vs {} scales",
            wq.shape(),
            delta.len()
        )));
    }
    let mut counts = [0u64; 4];
    let n = wq.cols();
    for (i, &d) in delta.values().iter().enumerate() {
        for (j, &v) in wq.row(i).iter().enumerate() {
            if !QuantGrid::Int2.contains(v, d) {
                return Err(UpqError::contract(format!(
                    "entry ({i}, {j}) = {v} is not on the INT2 grid of scale {d} (flat index {})",
                    i * n + j
                )));
            }
            let k = (v / (d * 0.25)).round() as i32;
            counts[((k + 3) / 2) as usize] += 1;
        }
    }
    Ok(BinUtilization { counts })
}

/// Convenience: `{−3, 3}` share of a fraction array.
pub fn pm3_share(fractions: &[f64; 4]) -> f64 {
    fractions[0] + fractions[3]
}

/// Round-to-nearest onto the balanced INT4 grid with given row steps.
pub fn int4_round_to_nearest(w: &Tensor, deltas: &[f32]) -> Result<Tensor> {
    if w.shape().len() != 2 || w.rows() != deltas.len() {
        return Err(UpqError::contract("one INT4 step per weight row required"));
    }
    ChannelScale::new(deltas.to_vec())?;
    let n = w.cols();
    let mut out = Vec::with_capacity(w.numel());
    for (i, &d) in deltas.iter().enumerate() {
        out.extend(w.data()[i * n..(i + 1) * n].iter().map(|&x| {
            d / 2.0 * int4_raw_level(x / d).clamp(-INT4_MAX_LEVEL, INT4_MAX_LEVEL)
        }));
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// INT4 step for one row minimizing the round-to-nearest squared error,
/// searched over clipping ratios of the row's absolute maximum.
pub fn search_int4_scale(row: &[f32]) -> Result<f32> {
    let max = row.iter().fold(0.0f32, |a, x| a.max(x.abs()));
    if !(max > 0.0) {
        return Err(UpqError::DegenerateRow {
            row: 0,
            reason: "all-zero row has no INT4 step".into(),
        });
    }
    let mut best = (f64::INFINITY, max / 7.5);
    for step in 0..=140 {
        let ratio = 0.30 + 0.005 * step as f32;
        let d = ratio * max / 7.5;
        let err: f64 = row
            .iter()
            .map(|&x| {
                let q = d / 2.0 * int4_raw_level(x / d).clamp(-INT4_MAX_LEVEL, INT4_MAX_LEVEL);
                let e = (x - q) as f64;
                e * e
            })
            .sum();
        if err < best.0 {
            best = (err, d);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_norm_basics() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let z = Tensor::zeros(&[1, 2]);
        assert_eq!(quant_error_norm(&a, &a).unwrap(), 0.0);
        assert_eq!(quant_error_norm(&a, &z).unwrap(), 1.0);
        assert!(quant_error_norm(&a, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn all_entries_on_plus_one() {
        let d = ChannelScale::new(vec![2.0]).unwrap();
        let wq = Tensor::full(&[1, 5], 0.5);
        let u = bin_utilization(&wq, &d).unwrap();
        assert_eq!(u.fractions(), [0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn symmetric_data_gives_symmetric_fractions() {
        let d = ChannelScale::new(vec![1.0]).unwrap();
        let wq = Tensor::new(vec![1, 6], vec![-0.75, -0.25, -0.25, 0.25, 0.25, 0.75]).unwrap();
        let f = bin_utilization(&wq, &d).unwrap().fractions();
        assert_eq!(f[0], f[3]);
        assert_eq!(f[1], f[2]);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn off_grid_entry_is_named() {
        let d = ChannelScale::new(vec![1.0]).unwrap();
        let wq = Tensor::new(vec![1, 3], vec![0.25, 0.3, 0.75]).unwrap();
        let err = bin_utilization(&wq, &d).unwrap_err().to_string();
        assert!(err.contains("(0, 1)"), "{err}");
    }

    #[test]
    fn scale_search_clips_gaussian_tails() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[1, 4096], 1.0, &mut rng);
        let max = w.data().iter().fold(0.0f32, |a, x| a.max(x.abs()));
        let d = search_int4_scale(w.data()).unwrap();
        assert!(d < 0.9 * max / 7.5);
    }
}
