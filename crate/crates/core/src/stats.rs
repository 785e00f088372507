use serde::{Deserialize, Serialize};

/// Per-coordinate running mean and variance (parallel Welford merge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f32]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let v = f64::from(v);
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.dim() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|s| s / n).collect()
    }

    /// Mean and inverse std, with the std floored at `min_std`.
    pub fn normalizer(&self, min_std: f64) -> (Vec<f32>, Vec<f32>) {
        let mean = self.mean.iter().map(|&m| m as f32).collect();
        let inv = self.variance().iter().map(|v| (1.0 / v.sqrt().max(min_std)) as f32).collect();
        (mean, inv)
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_matches_sequential() {
        let xs: Vec<[f32; 2]> = (0..50).map(|i| [i as f32 * 0.3, (i * i % 7) as f32]).collect();
        let mut all = RunningStats::new(2);
        xs.iter().for_each(|x| all.push(x));
        let (mut a, mut b) = (RunningStats::new(2), RunningStats::new(2));
        xs[..17].iter().for_each(|x| a.push(x));
        xs[17..].iter().for_each(|x| b.push(x));
        a.merge(&b);
        for i in 0..2 {
            assert!((a.mean[i] - all.mean[i]).abs() < 1e-12);
            assert!((a.m2[i] - all.m2[i]).abs() < 1e-9);
        }
        let col: Vec<f64> = xs.iter().map(|x| f64::from(x[1])).collect();
        let (_, sd) = mean_std(&col);
        assert!((all.variance()[1] - sd * sd).abs() < 1e-9);
    }
}
