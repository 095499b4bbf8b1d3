//! Label side channel with an access counter.
//!
//! Evaluation labels travel next to each batch but are sealed: every read
//! goes through [`SealedLabels::read`], which counts. The runner asserts the
//! counter does not move across an adaptation call, making "the engine never
//! sees labels" an observable invariant rather than a convention.

use std::cell::Cell;

#[derive(Debug)]
pub struct SealedLabels {
    labels: Vec<usize>,
    reads: Cell<u64>,
}

impl SealedLabels {
    pub fn new(labels: Vec<usize>) -> Self {
        Self {
            labels,
            reads: Cell::new(0),
        }
    }

    /// Number of times the labels have been read.
    pub fn reads(&self) -> u64 {
        self.reads.get()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Metric-side access; counted.
    pub fn read(&self) -> &[usize] {
        self.reads.set(self.reads.get() + 1);
        &self.labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_are_counted() {
        let seal = SealedLabels::new(vec![0, 1, 2]);
        assert_eq!(seal.reads(), 0);
        assert_eq!(seal.read(), &[0, 1, 2]);
        let _ = seal.read();
        assert_eq!(seal.reads(), 2);
    }
}
