//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool; without
//! it, or inside [`sequential`], they run on the calling thread. Every helper
//! produces its outputs element by element with the same arithmetic either
//! way, so results are bit-identical across modes.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with all helpers on this thread forced onto the sequential path.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQUENTIAL.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

/// Whether helpers called from this thread will fan out.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(Cell::get)
}

/// Apply `f(row_index, row)` to every `cols`-wide row of `out`.
///
/// `work` is a rough per-row cost used to skip fan-out for tiny inputs.
pub fn for_each_row<F>(out: &mut [f64], cols: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        let rows = out.len() / cols.max(1);
        if is_parallel() && rows > 1 && rows * work >= PAR_THRESHOLD {
            use rayon::prelude::*;
            out.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    out.chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// `(0..n).map(f).collect()`, fanned out when enabled. Output order is index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let run = || {
            let mut out = vec![0.0; 4096];
            for_each_row(&mut out, 64, 1 << 12, |i, row| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = ((i * 64 + j) as f64).sqrt().sin();
                }
            });
            out
        };
        let par = run();
        let seq = sequential(run);
        assert_eq!(par, seq);
        assert_eq!(
            map_collect(100, |i| i * i),
            sequential(|| map_collect(100, |i| i * i))
        );
    }

    #[test]
    fn sequential_scope_restores() {
        sequential(|| assert!(!is_parallel()));
        assert_eq!(is_parallel(), cfg!(feature = "parallel"));
    }
}
