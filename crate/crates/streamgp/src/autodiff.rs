//! A small reverse-mode tape for scalar graphs.
//!
//! The trainer builds its objective on this tape (kernel matrices, Cholesky,
//! predictive marginals, expected losses, the Gaussian KL) and reads all
//! parameter gradients from one backward sweep. Values on the tape mirror the
//! f64 module path; the gradient contract is checked against central finite
//! differences of that independent path.

use statrs::function::erf::erf;

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    val: f64,
    parents: [u32; 2],
    local: [f64; 2],
}

/// Handle to a tape node. Cheap to copy; only meaningful with the tape that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Append-only computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn val(&self, x: Var) -> f64 {
        self.nodes[x.0 as usize].val
    }

    fn push(&mut self, val: f64, parents: [u32; 2], local: [f64; 2]) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { val, parents, local });
        Var(idx)
    }

    /// A leaf (input or constant). Gradients are reported for every node, so
    /// inputs and constants are distinguished only by what the caller reads.
    pub fn input(&mut self, v: f64) -> Var {
        self.push(v, [NONE, NONE], [0.0, 0.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(self.val(a) + self.val(b), [a.0, b.0], [1.0, 1.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(self.val(a) - self.val(b), [a.0, b.0], [1.0, -1.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        self.push(va * vb, [a.0, b.0], [vb, va])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        self.push(va / vb, [a.0, b.0], [1.0 / vb, -va / (vb * vb)])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(-self.val(a), [a.0, NONE], [-1.0, 0.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.push(self.val(a) + c, [a.0, NONE], [1.0, 0.0])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.push(self.val(a) * c, [a.0, NONE], [c, 0.0])
    }

    /// `c - a`.
    pub fn scalar_sub(&mut self, c: f64, a: Var) -> Var {
        self.push(c - self.val(a), [a.0, NONE], [-1.0, 0.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.val(a);
        self.push(v * v, [a.0, NONE], [2.0 * v, 0.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.val(a).exp();
        self.push(v, [a.0, NONE], [v, 0.0])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.val(a);
        self.push(v.ln(), [a.0, NONE], [1.0 / v, 0.0])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.val(a).sqrt();
        self.push(v, [a.0, NONE], [0.5 / v, 0.0])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.val(a);
        self.push(1.0 / v, [a.0, NONE], [-1.0 / (v * v), 0.0])
    }

    pub fn erf(&mut self, a: Var) -> Var {
        let v = self.val(a);
        let d = 2.0 / std::f64::consts::PI.sqrt() * (-v * v).exp();
        self.push(erf(v), [a.0, NONE], [d, 0.0])
    }

    /// `max(a, c)`; the gradient vanishes on the clamped branch.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.val(a);
        if v > c {
            self.push(v, [a.0, NONE], [1.0, 0.0])
        } else {
            self.push(c, [a.0, NONE], [0.0, 0.0])
        }
    }

    /// Numerically stable `ln(1 + e^x)`; derivative is the logistic sigmoid.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.val(a);
        let s = 1.0 / (1.0 + (-v).exp());
        self.push(softplus(v), [a.0, NONE], [s, 0.0])
    }

    /// Sum of a slice of vars, accumulated left to right.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        match xs {
            [] => self.input(0.0),
            [first, rest @ ..] => {
                let mut acc = *first;
                for x in rest {
                    acc = self.add(acc, *x);
                }
                acc
            }
        }
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len());
        let mut acc = self.input(0.0);
        for (x, y) in a.iter().zip(b) {
            let p = self.mul(*x, *y);
            acc = self.add(acc, p);
        }
        acc
    }

    /// One reverse sweep from `out`; returns the adjoint of every node.
    pub fn gradient(&self, out: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.nodes.len()];
        adj[out.0 as usize] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            for side in 0..2 {
                let p = node.parents[side];
                if p != NONE {
                    adj[p as usize] += node.local[side] * a;
                }
            }
        }
        adj
    }
}

/// The f64 twin of [`Tape::softplus`]; both paths must agree bit-for-bit.
pub fn softplus(x: f64) -> f64 {
    if x > 34.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on (0, inf): `ln(e^y - 1)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 34.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], i: usize) -> f64 {
        let h = 1e-6;
        let mut hi = x.to_vec();
        let mut lo = x.to_vec();
        hi[i] += h;
        lo[i] -= h;
        (f(&hi) - f(&lo)) / (2.0 * h)
    }

    #[test]
    fn product_plus_exp_gradient() {
        let f = |x: &[f64]| x[0] * x[1] + x[0].exp();
        let x = [0.3, -1.2];
        let mut t = Tape::new();
        let a = t.input(x[0]);
        let b = t.input(x[1]);
        let prod = t.mul(a, b);
        let ea = t.exp(a);
        let out = t.add(prod, ea);
        let g = t.gradient(out);
        assert_relative_eq!(g[0], fd(f, &x, 0), max_relative = 1e-8);
        assert_relative_eq!(g[1], fd(f, &x, 1), max_relative = 1e-8);
        assert_relative_eq!(t.val(out), f(&x), epsilon = 1e-15);
    }

    #[test]
    fn fanout_accumulates() {
        // f = x^2 + x -> df/dx = 2x + 1.
        let mut t = Tape::new();
        let x = t.input(1.7);
        let sq = t.square(x);
        let out = t.add(sq, x);
        let g = t.gradient(out);
        assert_relative_eq!(g[0], 2.0 * 1.7 + 1.0, epsilon = 1e-14);
    }

    #[test]
    fn division_ln_sqrt_chain() {
        let f = |x: &[f64]| (x[0] / x[1]).ln() + x[1].sqrt();
        let x = [2.0, 3.0];
        let mut t = Tape::new();
        let a = t.input(x[0]);
        let b = t.input(x[1]);
        let q = t.div(a, b);
        let l = t.ln(q);
        let s = t.sqrt(b);
        let out = t.add(l, s);
        let g = t.gradient(out);
        for i in 0..2 {
            assert_relative_eq!(g[i], fd(f, &x, i), max_relative = 1e-7);
        }
    }

    #[test]
    fn erf_gradient() {
        let mut t = Tape::new();
        let x = t.input(0.7);
        let out = t.erf(x);
        let g = t.gradient(out);
        let expect = 2.0 / std::f64::consts::PI.sqrt() * (-0.49f64).exp();
        assert_relative_eq!(g[0], expect, epsilon = 1e-14);
    }

    #[test]
    fn softplus_round_trip_and_gradient() {
        for y in [1e-6, 0.1, 1.0, 5.0, 40.0] {
            assert_relative_eq!(softplus(softplus_inv(y)), y, max_relative = 1e-12);
        }
        let mut t = Tape::new();
        let x = t.input(-2.3);
        let out = t.softplus(x);
        let g = t.gradient(out);
        assert_relative_eq!(g[0], fd(|v| softplus(v[0]), &[-2.3], 0), max_relative = 1e-7);
    }

    #[test]
    fn dot_and_sum_gradients_are_linear() {
        let mut t = Tape::new();
        let xs: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|v| t.input(*v)).collect();
        let ws: Vec<Var> = [0.5, -1.5, 2.5].iter().map(|v| t.input(*v)).collect();
        let out = t.dot(&xs, &ws);
        let g = t.gradient(out);
        assert_eq!(&g[0..3], &[0.5, -1.5, 2.5]);
        assert_eq!(&g[3..6], &[1.0, 2.0, 3.0]);

        let mut t2 = Tape::new();
        let ys: Vec<Var> = (0..4).map(|i| t2.input(i as f64)).collect();
        let s = t2.sum(&ys);
        assert_eq!(t2.val(s), 6.0);
        let g2 = t2.gradient(s);
        assert_eq!(&g2[0..4], &[1.0; 4]);
    }

    #[test]
    fn quadratic_bowl_gradient_at_origin_is_zero() {
        let mut t = Tape::new();
        let xs: Vec<Var> = (0..3).map(|_| t.input(0.0)).collect();
        let sq: Vec<Var> = xs.iter().map(|x| t.square(*x)).collect();
        let out = t.sum(&sq);
        let g = t.gradient(out);
        assert_eq!(&g[0..3], &[0.0; 3]);
    }
}
