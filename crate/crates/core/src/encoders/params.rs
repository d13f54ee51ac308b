//! Named parameter traversal shared by the optimizer, the gradient checker
//! and checkpoints. Gradients are stored in a value of the same type as the
//! parameters they belong to.

use ndarray::{Array1, Array2};

pub type Visitor<'f> = dyn FnMut(&str, &[f64], &[usize]) + 'f;
pub type VisitorMut<'f> = dyn FnMut(&str, &mut [f64], &[usize]) + 'f;

pub trait Params: Clone {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>);

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, s, _| s.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s, _| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, s, _| out.extend_from_slice(s));
        out
    }

    /// Overwrite from a flat buffer produced by [`Params::flatten`].
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut("", &mut |_, s, _| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
        assert_eq!(at, flat.len(), "flat buffer length mismatch");
    }

    /// `(name, shape, len)` in traversal order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, s, shape| out.push((n.to_string(), shape.to_vec(), s.len())));
        out
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, s, _| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit1(prefix: &str, name: &str, a: &Array1<f64>, f: &mut Visitor<'_>) {
    f(&join(prefix, name), a.as_slice().expect("contiguous"), &[a.len()]);
}

pub(crate) fn visit2(prefix: &str, name: &str, a: &Array2<f64>, f: &mut Visitor<'_>) {
    let shape = [a.nrows(), a.ncols()];
    f(&join(prefix, name), a.as_slice().expect("contiguous"), &shape);
}

pub(crate) fn visit1_mut(prefix: &str, name: &str, a: &mut Array1<f64>, f: &mut VisitorMut<'_>) {
    let n = a.len();
    f(&join(prefix, name), a.as_slice_mut().expect("contiguous"), &[n]);
}

pub(crate) fn visit2_mut(prefix: &str, name: &str, a: &mut Array2<f64>, f: &mut VisitorMut<'_>) {
    let shape = [a.nrows(), a.ncols()];
    f(&join(prefix, name), a.as_slice_mut().expect("contiguous"), &shape);
}
