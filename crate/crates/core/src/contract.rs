//! Two-operand tensor contractions described by einsum-style label strings.
//!
//! `"ij,jk->ik"` is a matrix product, `"md,mde->me"` contracts a per-mode
//! vector against a per-mode matrix. Labels absent from the output are summed.
//! Every label of one operand must occur in the other operand or in the output,
//! which keeps both gradient contractions expressible in the same form.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, strides_of, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contraction {
    a: Vec<char>,
    b: Vec<char>,
    out: Vec<char>,
}

#[derive(Clone, Copy)]
enum Kernel {
    MatMul,
    MatMulBt,
    MatMulAt,
    Generic,
}

impl Contraction {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidArgument(format!("contraction {spec:?}: {why}"));
        let (lhs, out) = spec.split_once("->").ok_or_else(|| bad("missing '->'"))?;
        let (a, b) = lhs.split_once(',').ok_or_else(|| bad("expected two operands"))?;
        let a: Vec<char> = a.trim().chars().collect();
        let b: Vec<char> = b.trim().chars().collect();
        let out: Vec<char> = out.trim().chars().collect();
        for labels in [&a, &b, &out] {
            if labels.iter().any(|c| !c.is_ascii_alphabetic()) {
                return Err(bad("labels must be ASCII letters"));
            }
            for (i, c) in labels.iter().enumerate() {
                if labels[..i].contains(c) {
                    return Err(bad("repeated label within an operand"));
                }
            }
        }
        if out.iter().any(|c| !a.contains(c) && !b.contains(c)) {
            return Err(bad("output label missing from both operands"));
        }
        if a.iter().any(|c| !b.contains(c) && !out.contains(c))
            || b.iter().any(|c| !a.contains(c) && !out.contains(c))
        {
            return Err(bad("label summed within a single operand"));
        }
        Ok(Self { a, b, out })
    }

    pub fn matmul() -> Self {
        Self::parse("ij,jk->ik").expect("static spec")
    }

    /// Descriptor producing the gradient of the first operand from
    /// (output gradient, second operand).
    pub fn grad_a(&self) -> Self {
        Self {
            a: self.out.clone(),
            b: self.b.clone(),
            out: self.a.clone(),
        }
    }

    /// Descriptor producing the gradient of the second operand from
    /// (first operand, output gradient).
    pub fn grad_b(&self) -> Self {
        Self {
            a: self.a.clone(),
            b: self.out.clone(),
            out: self.b.clone(),
        }
    }

    fn extents(&self, a: &[usize], b: &[usize]) -> Result<Vec<(char, usize)>> {
        if a.len() != self.a.len() || b.len() != self.b.len() {
            return shape_err(
                "contract",
                format!("{self}: operand ranks {} and {} do not match labels", a.len(), b.len()),
            );
        }
        let mut ext: Vec<(char, usize)> = Vec::new();
        for (axis, (&c, &e)) in self.a.iter().zip(a).enumerate() {
            ext.push((c, e));
            if let Some(j) = self.b.iter().position(|&x| x == c) {
                if b[j] != e {
                    return shape_err(
                        "contract",
                        format!("{self}: label '{c}' has extent {e} at axis {axis} of a but {} at axis {j} of b", b[j]),
                    );
                }
            }
        }
        for (&c, &e) in self.b.iter().zip(b) {
            if !self.a.contains(&c) {
                ext.push((c, e));
            }
        }
        Ok(ext)
    }

    pub fn output_shape(&self, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
        let ext = self.extents(a, b)?;
        Ok(self
            .out
            .iter()
            .map(|c| ext.iter().find(|(x, _)| x == c).expect("validated").1)
            .collect())
    }

    fn kernel(&self) -> Kernel {
        if self.a.len() != 2 || self.b.len() != 2 || self.out.len() != 2 {
            return Kernel::Generic;
        }
        let (a, b, o) = (&self.a, &self.b, &self.out);
        if a[1] == b[0] && o[0] == a[0] && o[1] == b[1] && a[0] != b[1] {
            Kernel::MatMul
        } else if a[1] == b[1] && o[0] == a[0] && o[1] == b[0] && a[0] != b[0] {
            Kernel::MatMulBt
        } else if a[0] == b[0] && o[0] == a[1] && o[1] == b[1] && a[1] != b[1] {
            Kernel::MatMulAt
        } else {
            Kernel::Generic
        }
    }

    pub fn apply(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let ext = self.extents(a.shape(), b.shape())?;
        let out_shape: Vec<usize> = self
            .out
            .iter()
            .map(|c| ext.iter().find(|(x, _)| x == c).expect("validated").1)
            .collect();
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        let (sa, sb) = (a.shape(), b.shape());
        match self.kernel() {
            Kernel::MatMul => matmul_into(a.data(), b.data(), &mut out, sa[0], sa[1], sb[1]),
            Kernel::MatMulBt => matmul_bt_into(a.data(), b.data(), &mut out, sa[0], sa[1], sb[0]),
            Kernel::MatMulAt => matmul_at_into(a.data(), b.data(), &mut out, sa[0], sa[1], sb[1]),
            Kernel::Generic => self.generic(a, b, &ext, &out_shape, &mut out),
        }
        if out_shape.is_empty() {
            return Ok(Tensor::scalar(out[0]));
        }
        Tensor::new(&out_shape, out)
    }

    fn generic(&self, a: &Tensor, b: &Tensor, ext: &[(char, usize)], out_shape: &[usize], out: &mut [f64]) {
        let stride_in = |labels: &[char], shape: &[usize], c: char| {
            let st = strides_of(shape);
            labels.iter().position(|&x| x == c).map_or(0, |i| st[i])
        };
        let labels: Vec<char> = ext.iter().map(|(c, _)| *c).collect();
        let extent: Vec<usize> = ext.iter().map(|(_, e)| *e).collect();
        let st_a: Vec<usize> = labels.iter().map(|&c| stride_in(&self.a, a.shape(), c)).collect();
        let st_b: Vec<usize> = labels.iter().map(|&c| stride_in(&self.b, b.shape(), c)).collect();
        let st_o: Vec<usize> = labels.iter().map(|&c| stride_in(&self.out, out_shape, c)).collect();
        let (ad, bd) = (a.data(), b.data());
        let n = labels.len();
        let mut idx = vec![0usize; n];
        let (mut ia, mut ib, mut io) = (0usize, 0usize, 0usize);
        loop {
            out[io] += ad[ia] * bd[ib];
            // odometer increment, last label fastest
            let mut axis = n;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                idx[axis] += 1;
                ia += st_a[axis];
                ib += st_b[axis];
                io += st_o[axis];
                if idx[axis] < extent[axis] {
                    break;
                }
                ia -= st_a[axis] * extent[axis];
                ib -= st_b[axis] * extent[axis];
                io -= st_o[axis] * extent[axis];
                idx[axis] = 0;
            }
        }
    }
}

impl fmt::Display for Contraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.a), s(&self.b), s(&self.out))
    }
}
