use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Uniform binning of `[-1, 1]` into `bins` cells. A value exactly on an
/// interior edge goes to the lower bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionTokenizer {
    bins: usize,
}

impl ActionTokenizer {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(ModelError::Config(format!("need at least 2 bins, got {bins}")));
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin_width(&self) -> f64 {
        2.0 / self.bins as f64
    }

    pub fn tokenize_value(&self, v: f64) -> Result<usize> {
        if !(-1.0..=1.0).contains(&v) {
            return Err(ModelError::ActionRange(v));
        }
        let scaled = (v + 1.0) * self.bins as f64 / 2.0;
        let bin = (scaled.ceil() as i64 - 1).clamp(0, self.bins as i64 - 1);
        Ok(bin as usize)
    }

    pub fn center(&self, bin: usize) -> f64 {
        -1.0 + (bin as f64 + 0.5) * self.bin_width()
    }

    pub fn tokenize(&self, values: &[f64]) -> Result<Vec<usize>> {
        values.iter().map(|&v| self.tokenize_value(v)).collect()
    }

    pub fn detokenize(&self, bins: &[usize]) -> Result<Vec<f64>> {
        bins.iter()
            .map(|&b| {
                if b < self.bins {
                    Ok(self.center(b))
                } else {
                    Err(ModelError::Config(format!("bin {b} out of range")))
                }
            })
            .collect()
    }
}

/// An `h×d` block of continuous actions with its bin ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub horizon: usize,
    pub dims: usize,
    /// Row-major `horizon × dims` values in `[-1, 1]`.
    pub values: Vec<f64>,
    pub bins: Vec<usize>,
}

impl ActionChunk {
    pub fn from_values(horizon: usize, dims: usize, values: Vec<f64>, tok: &ActionTokenizer) -> Result<Self> {
        if horizon == 0 || dims == 0 || values.len() != horizon * dims {
            return Err(ModelError::Config(format!(
                "chunk {horizon}x{dims} cannot hold {} values",
                values.len()
            )));
        }
        let bins = tok.tokenize(&values)?;
        Ok(Self {
            horizon,
            dims,
            values,
            bins,
        })
    }

    pub fn from_bins(horizon: usize, dims: usize, bins: Vec<usize>, tok: &ActionTokenizer) -> Result<Self> {
        if horizon == 0 || dims == 0 || bins.len() != horizon * dims {
            return Err(ModelError::Config(format!("chunk {horizon}x{dims} cannot hold {} bins", bins.len())));
        }
        let values = tok.detokenize(&bins)?;
        Ok(Self {
            horizon,
            dims,
            values,
            bins,
        })
    }

    pub fn zeros(horizon: usize, dims: usize, tok: &ActionTokenizer) -> Self {
        Self::from_values(horizon, dims, vec![0.0; horizon * dims], tok).expect("zero chunk is valid")
    }

    pub fn step(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_bins() {
        let t = ActionTokenizer::new(2).unwrap();
        assert_eq!(t.tokenize_value(-1.0).unwrap(), 0);
        assert_eq!(t.tokenize_value(1.0).unwrap(), 1);
        assert_eq!(t.center(0), -0.5);
        assert_eq!(t.center(1), 0.5);
        // 0.0 is the interior edge: lower bin
        assert_eq!(t.tokenize_value(0.0).unwrap(), 0);
    }

    #[test]
    fn edges_break_low() {
        let t = ActionTokenizer::new(4).unwrap();
        assert_eq!(t.tokenize_value(-0.5).unwrap(), 0);
        assert_eq!(t.tokenize_value(0.5).unwrap(), 2);
        assert_eq!(t.tokenize_value(0.5000001).unwrap(), 3);
    }

    #[test]
    fn out_of_range() {
        let t = ActionTokenizer::new(256).unwrap();
        assert!(matches!(t.tokenize_value(1.01), Err(ModelError::ActionRange(_))));
        assert!(t.tokenize_value(f64::NAN).is_err());
        assert!(ActionTokenizer::new(1).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_half_bin(bins in 2usize..300, v in -1.0f64..=1.0) {
            let t = ActionTokenizer::new(bins).unwrap();
            let back = t.center(t.tokenize_value(v).unwrap());
            prop_assert!((back - v).abs() <= t.bin_width() / 2.0 + 1e-12);
        }
    }
}
