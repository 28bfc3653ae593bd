//! Data-parallel helpers: rayon when the `parallel` feature is on, plain
//! iterators otherwise. Output order always follows input order.

use std::cell::Cell;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with every helper called from this thread taking the sequential
/// path, as if the `parallel` feature were off.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            FORCE_SEQUENTIAL.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(FORCE_SEQUENTIAL.with(|c| c.replace(true)));
    f()
}

fn forced() -> bool {
    FORCE_SEQUENTIAL.with(Cell::get)
}

pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if forced() {
            return items.iter().map(f).collect();
        }
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Like [`map`] but consumes the items, for values that are `Send` but not `Sync`.
pub fn map_owned<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if forced() {
            return items.into_iter().map(f).collect();
        }
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

pub fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if forced() {
            return (0..n).map(f).collect();
        }
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

pub fn for_each_mut<I, F>(items: &mut [I], f: F)
where
    I: Send,
    F: Fn(&mut I) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if forced() {
            return items.iter_mut().for_each(f);
        }
        items.par_iter_mut().for_each(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter_mut().for_each(f)
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !forced()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_scope_restores_and_keeps_order() {
        let xs: Vec<u32> = (0..100).collect();
        let par = map(&xs, |x| x * 2);
        let seq = sequential(|| {
            assert!(!is_parallel());
            map(&xs, |x| x * 2)
        });
        assert_eq!(par, seq);
        assert_eq!(is_parallel(), cfg!(feature = "parallel"));
    }
}
