use crate::error::{LabError, Result};
use crate::numerics::RngStream;

/// Trials per independently seeded chunk. Chunk boundaries, not workers,
/// determine the random streams, so results do not depend on `workers`.
pub const CHUNK: u64 = 1024;

pub const MIN_TRIALS: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct McOptions {
    pub trials: u64,
    pub workers: usize,
}

impl McOptions {
    pub fn new(trials: u64) -> Self {
        McOptions { trials, workers: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < MIN_TRIALS {
            return Err(LabError::Config(format!(
                "at least {MIN_TRIALS} trials are required, got {}",
                self.trials
            )));
        }
        if self.workers == 0 {
            return Err(LabError::Config("workers must be positive".into()));
        }
        Ok(())
    }
}

/// Runs `body(count, rng)` for each chunk and returns the results in chunk order.
pub fn run_chunks<T, F>(opts: &McOptions, rng: &RngStream, body: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &mut RngStream) -> Result<T> + Sync,
{
    opts.validate()?;
    let chunks = opts.trials.div_ceil(CHUNK);
    let count = |c: u64| CHUNK.min(opts.trials - c * CHUNK);
    let workers = (opts.workers as u64).min(chunks).max(1);
    if workers == 1 {
        return (0..chunks)
            .map(|c| body(count(c), &mut rng.substream_idx("chunk", c)))
            .collect();
    }
    let mut out: Vec<(u64, Result<T>)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let body = &body;
                s.spawn(move || {
                    (w..chunks)
                        .step_by(workers as usize)
                        .map(|c| (c, body(count(c), &mut rng.substream_idx("chunk", c))))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("monte-carlo worker panicked"))
            .collect()
    });
    out.sort_by_key(|(c, _)| *c);
    out.into_iter().map(|(_, r)| r).collect()
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Sample mean, unbiased variance and the standard error of that variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarMoments {
    pub n: u64,
    pub mean: f64,
    pub var: f64,
    pub var_std_error: f64,
}

impl ScalarMoments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = pairwise_sum(xs) / n;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let m2 = pairwise_sum(&dev) / n;
        let m4 = pairwise_sum(&dev.iter().map(|d| d * d).collect::<Vec<_>>()) / n;
        ScalarMoments {
            n: xs.len() as u64,
            mean,
            var: m2 * n / (n - 1.0),
            var_std_error: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        }
    }
}

/// Element-wise running sums of deviations from a fixed center.
#[derive(Clone, Debug)]
pub struct MatrixSums {
    pub n: u64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl MatrixSums {
    pub fn new(len: usize) -> Self {
        MatrixSums {
            n: 0,
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64], center: &[f64]) {
        self.n += 1;
        for ((s, q), (v, c)) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(x.iter().zip(center)) {
            let d = v - c;
            *s += d;
            *q += d * d;
        }
    }

    /// Merges chunk sums in the given (chunk) order.
    pub fn merge(parts: &[MatrixSums]) -> Self {
        let len = parts.first().map_or(0, |p| p.sum.len());
        let mut out = MatrixSums::new(len);
        for p in parts {
            out.n += p.n;
            for k in 0..len {
                out.sum[k] += p.sum[k];
                out.sum_sq[k] += p.sum_sq[k];
            }
        }
        out
    }

    /// Element-wise means (center added back) and standard errors of the mean.
    pub fn mean_and_se(&self, center: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().zip(center).map(|(s, c)| c + s / n).collect();
        let se = self
            .sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let var = (q - s * s / n).max(0.0) / (n - 1.0);
                (var / n).sqrt()
            })
            .collect();
        (mean, se)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_do_not_depend_on_workers() {
        let rng = RngStream::new(7);
        let run = |workers| {
            let opts = McOptions {
                trials: 5000,
                workers,
            };
            run_chunks(&opts, &rng, |n, r| Ok((0..n).map(|_| r.normal()).sum::<f64>())).unwrap()
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn too_few_trials_is_config_error() {
        let rng = RngStream::new(1);
        let r = run_chunks(&McOptions::new(10), &rng, |_, _| Ok(()));
        assert!(matches!(r, Err(LabError::Config(_))));
    }

    #[test]
    fn moments_of_known_sample() {
        let m = ScalarMoments::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.var - 5.0 / 3.0).abs() < 1e-15);
        assert!((pairwise_sum(&vec![0.1; 100_000]) - 10_000.0).abs() < 1e-9);
    }
}
