use pdqn_core::simulator::Executor;
use rayon::prelude::*;

/// Runs the nodes of a phase on the rayon pool; results keep node order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parallel;

impl Executor for Parallel {
    fn map_nodes<S, R, F>(&self, states: &mut [S], f: F) -> Vec<R>
    where
        S: Send,
        R: Send,
        F: Fn(usize, &mut S) -> R + Sync + Send,
    {
        states.par_iter_mut().enumerate().map(|(i, s)| f(i, s)).collect()
    }
}
