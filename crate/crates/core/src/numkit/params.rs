use crate::error::{check_dim, Result};

/// Anything whose trainable parameters can be viewed as one flat vector.
///
/// The flat order is fixed per type, so a gradient of the same shape flattens
/// into matching positions.
pub trait Parameterized: Sized {
    fn num_params(&self) -> usize;

    fn write_params(&self, out: &mut Vec<f64>);

    /// Reads parameters from the front of `src`; returns how many were consumed.
    fn read_params(&mut self, src: &[f64]) -> Result<usize>;

    fn zeros_like(&self) -> Self;

    fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.write_params(&mut v);
        v
    }

    fn set_flat_params(&mut self, src: &[f64]) -> Result<()> {
        let used = self.read_params(src)?;
        check_dim("flat parameter vector", used, src.len())
    }

    /// `self += scale · other` over the flat view.
    fn axpy(&mut self, scale: f64, other: &Self) -> Result<()> {
        let mut mine = self.flat_params();
        let theirs = other.flat_params();
        check_dim("axpy operand", mine.len(), theirs.len())?;
        for (a, b) in mine.iter_mut().zip(&theirs) {
            *a += scale * b;
        }
        self.set_flat_params(&mine)
    }
}
