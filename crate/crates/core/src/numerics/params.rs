use super::matrix::Real;
use crate::error::{Error, Result};

/// A fixed-layout collection of parameter slices. Parameter structs double
/// as gradient containers, so one visitor serves both.
pub trait ParamSet<T: Real> {
    fn visit(&self, f: &mut dyn FnMut(&[T]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }
}

impl<T: Real, P: ParamSet<T>> ParamSet<T> for Vec<P> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        for p in self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for p in self {
            p.visit_mut(f);
        }
    }
}

pub fn flatten<T: Real>(p: &impl ParamSet<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(p.num_params());
    p.visit(&mut |s| out.extend_from_slice(s));
    out
}

pub fn unflatten<T: Real>(p: &mut impl ParamSet<T>, values: &[T]) -> Result<()> {
    let n = p.num_params();
    if values.len() != n {
        return Err(Error::shape(
            "unflatten",
            format!("{} values for {n} parameters", values.len()),
        ));
    }
    let mut at = 0;
    p.visit_mut(&mut |s| {
        s.copy_from_slice(&values[at..at + s.len()]);
        at += s.len();
    });
    Ok(())
}
