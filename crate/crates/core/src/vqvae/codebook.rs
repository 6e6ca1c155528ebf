use crate::ndauto::Tensor;

/// `k × e` table of code vectors with per-code usage counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub codes: Tensor,
    pub usage_counts: Vec<u64>,
}

/// Integer `frames × width` matrix of codebook indices (row = frame).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedGrid {
    pub n_frames: usize,
    pub width: usize,
    pub indices: Vec<usize>,
}

impl QuantizedGrid {
    pub fn new(n_frames: usize, width: usize, indices: Vec<usize>) -> Self {
        assert_eq!(indices.len(), n_frames * width);
        QuantizedGrid { n_frames, width, indices }
    }

    pub fn get(&self, t: usize, j: usize) -> usize {
        self.indices[t * self.width + j]
    }

    pub fn frame(&self, t: usize) -> &[usize] {
        &self.indices[t * self.width..(t + 1) * self.width]
    }

    /// Frames `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> QuantizedGrid {
        QuantizedGrid::new(len, self.width, self.indices[start * self.width..(start + len) * self.width].to_vec())
    }
}

impl Codebook {
    pub fn new(codes: Tensor) -> Self {
        assert_eq!(codes.rank(), 2, "codebook must be k × e");
        let k = codes.shape()[0];
        Codebook { codes, usage_counts: vec![0; k] }
    }

    pub fn len(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn code(&self, j: usize) -> &[f64] {
        self.codes.row(j)
    }

    /// Index of the nearest code in squared Euclidean distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let e = self.dim();
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in self.codes.data().chunks_exact(e).enumerate() {
            let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    /// Quantizes consecutive `e`-vectors of `z`.
    pub fn quantize(&self, z: &[f64]) -> Vec<usize> {
        z.chunks_exact(self.dim()).map(|v| self.nearest(v)).collect()
    }

    /// Concatenated code vectors for `indices`.
    pub fn lookup(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            out.extend_from_slice(self.code(i));
        }
        out
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    /// Shannon entropy (nats) of the usage distribution.
    pub fn usage_entropy(&self) -> f64 {
        usage_entropy(&self.usage_counts)
    }

    /// Smallest pairwise squared distance between codes.
    pub fn min_pairwise_distance(&self) -> f64 {
        let k = self.len();
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                let d: f64 = self.code(a).iter().zip(self.code(b)).map(|(x, y)| (x - y) * (x - y)).sum();
                best = best.min(d);
            }
        }
        best
    }
}

pub fn usage_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbor_small_case() {
        let cb = Codebook::new(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        assert_eq!(cb.nearest(&[0.1, 0.2]), 0);
        assert_eq!(cb.nearest(&[1.0, 1.0]), 1);
        // equidistant → lowest index
        assert_eq!(cb.nearest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn entropy_of_uniform_usage() {
        assert!((usage_entropy(&[3, 3, 3, 3]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(usage_entropy(&[0, 7, 0]), 0.0);
        assert_eq!(usage_entropy(&[0, 0]), 0.0);
    }
}
