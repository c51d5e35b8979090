//! Data-parallel map over path indices with a deterministic reduction.
//!
//! Work is cut into fixed-size chunks whose boundaries depend only on the
//! number of items, never on the thread count. Chunk results come back in
//! index order, so any sequential fold over them is bit-identical whether
//! the `parallel` feature is on or off and whatever the pool size.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Paths per work item.
pub const CHUNK: usize = 512;

fn chunk_bounds(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(chunk))
        .map(|c| (c * chunk, ((c + 1) * chunk).min(n)))
        .collect()
}

/// Apply `f` to every chunk `[start, end)` of `0..n`, returning results in chunk order.
pub fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_chunks_parallel(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_chunks_sequential(n, f)
    }
}

pub fn map_chunks_sequential<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize, usize) -> T,
{
    chunk_bounds(n, CHUNK)
        .into_iter()
        .map(|(a, b)| f(a, b))
        .collect()
}

#[cfg(feature = "parallel")]
pub fn map_chunks_parallel<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    chunk_bounds(n, CHUNK)
        .into_par_iter()
        .map(|(a, b)| f(a, b))
        .collect()
}

/// Run `f` on a pool of `threads` workers (`None` keeps the global pool).
/// Results never depend on the pool size.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => return pool.install(f),
            Err(e) => log::warn!("could not build a {n}-thread pool ({e}); using the global pool"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    if threads.is_some() {
        log::debug!("built without the parallel feature; --threads ignored");
    }
    f()
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Per-coordinate first and second moments, accumulated with compensation.
#[derive(Clone, Debug)]
pub struct MomentAccumulator {
    pub count: usize,
    sums: Vec<CompensatedSum>,
    squares: Vec<CompensatedSum>,
}

impl MomentAccumulator {
    pub fn new(width: usize) -> Self {
        MomentAccumulator {
            count: 0,
            sums: vec![CompensatedSum::default(); width],
            squares: vec![CompensatedSum::default(); width],
        }
    }

    pub fn width(&self) -> usize {
        self.sums.len()
    }

    pub fn push(&mut self, xs: &[f64]) {
        debug_assert_eq!(xs.len(), self.sums.len());
        self.count += 1;
        for ((s, q), &x) in self.sums.iter_mut().zip(self.squares.iter_mut()).zip(xs) {
            s.add(x);
            q.add(x * x);
        }
    }

    pub fn merge(&mut self, other: &MomentAccumulator) {
        self.count += other.count;
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.merge(b);
        }
        for (a, b) in self.squares.iter_mut().zip(&other.squares) {
            a.merge(b);
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.sums[i].value() / self.count as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self, i: usize) -> f64 {
        let n = self.count as f64;
        if self.count < 2 {
            return 0.0;
        }
        let m = self.mean(i);
        ((self.squares[i].value() - n * m * m) / (n - 1.0)).max(0.0)
    }

    pub fn std_err(&self, i: usize) -> f64 {
        (self.variance(i) / self.count as f64).sqrt()
    }
}
