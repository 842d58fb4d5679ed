//! Differentiable tensor operations.

use std::rc::Rc;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::util::par_chunks_mut;

use super::graph::{Graph, Var};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast of two shapes; each dimension must match or be 1.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        };
    }
    Ok(out)
}

/// Linear-index strides of `shape` viewed as `out_shape` (0 on broadcast dims).
fn operand_strides(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let mut s = vec![0usize; rank];
    for d in 0..shape.len() {
        let od = rank - shape.len() + d;
        s[od] = if shape[d] == 1 && out_shape[od] != 1 { 0 } else { own[d] };
    }
    s
}

/// Visit every output position of a broadcast binary op, yielding
/// `(out_idx, a_idx, b_idx)`.
fn bcast_for_each(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    // Fast path: identical shapes.
    if a_shape == out_shape && b_shape == out_shape {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    // Fast path: one side is an exact suffix of the output shape.
    let suffix = |sh: &[usize]| out_shape.len() >= sh.len() && &out_shape[out_shape.len() - sh.len()..] == sh;
    if a_shape == out_shape && suffix(b_shape) {
        let nb = numel(b_shape).max(1);
        for i in 0..n {
            f(i, i, i % nb);
        }
        return;
    }
    if b_shape == out_shape && suffix(a_shape) {
        let na = numel(a_shape).max(1);
        for i in 0..n {
            f(i, i % na, i);
        }
        return;
    }
    let os = strides(out_shape);
    let sa = operand_strides(out_shape, a_shape);
    let sb = operand_strides(out_shape, b_shape);
    for i in 0..n {
        let mut rem = i;
        let (mut ia, mut ib) = (0usize, 0usize);
        for d in 0..out_shape.len() {
            let c = rem / os[d];
            rem %= os[d];
            ia += c * sa[d];
            ib += c * sb[d];
        }
        f(i, ia, ib);
    }
}

impl<E: Elem> Graph<E> {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: fn(E, E) -> E,
        dfa: fn(E, E) -> E,
        dfb: fn(E, E) -> E,
        name: &'static str,
    ) -> Var {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let osh = broadcast_shapes(&ash, &bsh)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        let av = Rc::clone(&self.nodes[a.0].value);
        let bv = Rc::clone(&self.nodes[b.0].value);
        let mut out = vec![E::ZERO; numel(&osh)];
        bcast_for_each(&osh, &ash, &bsh, |i, ia, ib| out[i] = f(av[ia], bv[ib]));
        let (cash, cbsh, cosh) = (ash.clone(), bsh.clone(), osh.clone());
        let back = move |g: &[E]| {
            let mut da = vec![E::ZERO; av.len()];
            let mut db = vec![E::ZERO; bv.len()];
            bcast_for_each(&cosh, &cash, &cbsh, |i, ia, ib| {
                da[ia] += dfa(av[ia], bv[ib]) * g[i];
                db[ib] += dfb(av[ia], bv[ib]) * g[i];
            });
            vec![da, db]
        };
        self.push(out, osh, vec![a, b], Some(Box::new(back)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _| E::ONE, |_, _| E::ONE, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |_, _| E::ONE, |_, _| -E::ONE, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x / y,
            |_, y| E::ONE / y,
            |x, y| -x / (y * y),
            "div",
        )
    }

    /// Elementwise maximum; the subgradient goes to the left operand on ties.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x.max_val(y),
            |x, y| if x >= y { E::ONE } else { E::ZERO },
            |x, y| if x >= y { E::ZERO } else { E::ONE },
            "maximum",
        )
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Var {
        let av = Rc::clone(&self.nodes[a.0].value);
        let out: Vec<E> = av.iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let outc = out.clone();
        let back = move |g: &[E]| {
            vec![av
                .iter()
                .zip(outc.iter())
                .zip(g)
                .map(|((&x, &y), &gi)| df(x, y) * gi)
                .collect()]
        };
        self.push(out, shape, vec![a], Some(Box::new(back)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -E::ONE)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), |x, _| E::ONE / x)
    }

    /// `ln(1 + x)`, accurate near zero.
    pub fn ln1p(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln_1p(), |x, _| E::ONE / (E::ONE + x))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), |_, y| E::ONE / (E::from_f64(2.0) * y))
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        self.unary(a, move |x| x + c, |_, _| E::ONE)
    }

    pub fn mul_scalar(&mut self, a: Var, c: E) -> Var {
        self.unary(a, move |x| x * c, move |_, _| c)
    }

    /// Exact-erf GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let half = E::from_f64(0.5);
        let phi_cdf = move |x: E| half * (E::ONE + (x * inv_sqrt2).erf());
        self.unary(
            a,
            move |x| x * phi_cdf(x),
            move |x, _| {
                let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
                phi_cdf(x) + x * pdf
            },
        )
    }

    /// Numerically stable `ln(1 + exp(x))`; gradient is the logistic sigmoid.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max_val(E::ZERO) + (-x.abs()).exp().ln_1p(),
            |x, _| E::ONE / (E::ONE + (-x).exp()),
        )
    }

    /// Log-gamma; gradient is the digamma function.
    pub fn lgamma(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln_gamma(), |x, _| x.digamma())
    }

    /// Matrix product over the last two axes. Leading (batch) dims must match
    /// exactly, or `b` may be rank-2 and is then shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.try_matmul(a, b).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn try_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let err = || {
            Error::shape(format!(
                "matmul: incompatible shapes {ash:?} x {bsh:?}"
            ))
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(err());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let shared_b = bsh.len() == 2;
        if !shared_b && bsh[..bsh.len() - 2] != ash[..ash.len() - 2] {
            return Err(err());
        }
        let av = Rc::clone(&self.nodes[a.0].value);
        let bv = Rc::clone(&self.nodes[b.0].value);
        let mut out = vec![E::ZERO; batch * m * n];
        {
            let (av, bv): (&[E], &[E]) = (&av, &bv);
            par_chunks_mut(&mut out, m * n, |i, c| {
                let abatch = &av[i * m * k..(i + 1) * m * k];
                let bbatch = if shared_b { &bv[..] } else { &bv[i * k * n..(i + 1) * k * n] };
                E::gemm(m, k, n, E::ONE, abatch, bbatch, E::ZERO, c);
            });
        }
        let mut osh = ash[..ash.len() - 2].to_vec();
        osh.push(m);
        osh.push(n);
        let back = move |g: &[E]| {
            // dA = g . B^T per batch
            let mut da = vec![E::ZERO; batch * m * k];
            {
                let (bv, g): (&[E], &[E]) = (&bv, g);
                par_chunks_mut(&mut da, m * k, |i, c| {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let bb = if shared_b { &bv[..] } else { &bv[i * k * n..(i + 1) * k * n] };
                    // B^T is (n x k): row stride 1, col stride n over the row-major B.
                    E::gemm_strided(m, n, k, E::ONE, gb, n as isize, 1, bb, 1, n as isize, E::ZERO, c);
                });
            }
            // dB = A^T . g, accumulated over the batch when B is shared.
            let mut db = vec![E::ZERO; bv.len()];
            if shared_b {
                for i in 0..batch {
                    let ab = &av[i * m * k..(i + 1) * m * k];
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    E::gemm_strided(k, m, n, E::ONE, ab, 1, k as isize, gb, n as isize, 1, E::ONE, &mut db);
                }
            } else {
                let (av, g): (&[E], &[E]) = (&av, g);
                par_chunks_mut(&mut db, k * n, |i, c| {
                    let ab = &av[i * m * k..(i + 1) * m * k];
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    E::gemm_strided(k, m, n, E::ONE, ab, 1, k as isize, gb, n as isize, 1, E::ZERO, c);
                });
            }
            vec![da, db]
        };
        Ok(self.push(out, osh, vec![a, b], Some(Box::new(back))))
    }

    /// Permute axes. `perm[d]` gives the source axis for output axis `d`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let ash = self.shape(a).to_vec();
        assert_eq!(perm.len(), ash.len(), "permute: rank mismatch");
        let osh: Vec<usize> = perm.iter().map(|&p| ash[p]).collect();
        let in_strides = strides(&ash);
        let out_strides = strides(&osh);
        // map[d]: contribution of input coordinate d to output linear index.
        let mut map = vec![0usize; ash.len()];
        for (od, &sd) in perm.iter().enumerate() {
            map[sd] = out_strides[od];
        }
        let av = Rc::clone(&self.nodes[a.0].value);
        let n = av.len();
        let index_of = move |i: usize, in_strides: &[usize], map: &[usize]| {
            let mut rem = i;
            let mut o = 0usize;
            for d in 0..in_strides.len() {
                let c = rem / in_strides[d];
                rem %= in_strides[d];
                o += c * map[d];
            }
            o
        };
        let mut out = vec![E::ZERO; n];
        for i in 0..n {
            out[index_of(i, &in_strides, &map)] = av[i];
        }
        let (cs, cm) = (in_strides.clone(), map.clone());
        let back = move |g: &[E]| {
            let mut da = vec![E::ZERO; n];
            for (i, da_i) in da.iter_mut().enumerate() {
                *da_i = g[index_of(i, &cs, &cm)];
            }
            vec![da]
        };
        self.push(out, osh, vec![a], Some(Box::new(back)))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let rank = self.shape(a).len();
        assert!(rank >= 2);
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(a, &perm)
    }

    /// Zero-copy reshape.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            numel(&shape),
            self.numel(a),
            "reshape: {:?} -> {shape:?}",
            self.shape(a)
        );
        let value = Rc::clone(&self.nodes[a.0].value);
        let back = move |g: &[E]| vec![g.to_vec()];
        let requires = self.nodes[a.0].requires_grad;
        self.nodes.push(super::graph::Node {
            value,
            shape,
            requires_grad: requires,
            grad: None,
            parents: vec![a],
            backward: if requires { Some(Box::new(back)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let ash = self.shape(a).to_vec();
        assert!(axis < ash.len() && start + len <= ash[axis], "narrow out of range");
        let inner: usize = ash[axis + 1..].iter().product();
        let outer: usize = ash[..axis].iter().product();
        let av = Rc::clone(&self.nodes[a.0].value);
        let mut osh = ash.clone();
        osh[axis] = len;
        let mut out = vec![E::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = o * ash[axis] * inner + start * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&av[src..src + len * inner]);
        }
        let full = ash[axis];
        let back = move |g: &[E]| {
            let mut da = vec![E::ZERO; av.len()];
            for o in 0..outer {
                let dst = o * full * inner + start * inner;
                let src = o * len * inner;
                da[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            vec![da]
        };
        self.push(out, osh, vec![a], Some(Box::new(back)))
    }

    /// Concatenate along `axis`. All other dims must match.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let rank = first.len();
        assert!(axis < rank);
        let mut axis_total = 0usize;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.shape(p);
            assert_eq!(sh.len(), rank, "concat: rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(sh[d], first[d], "concat: dim {d} mismatch");
                }
            }
            sizes.push(sh[axis]);
            axis_total += sh[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut osh = first.clone();
        osh[axis] = axis_total;
        let values: Vec<Rc<Vec<E>>> = parts
            .iter()
            .map(|&p| Rc::clone(&self.nodes[p.0].value))
            .collect();
        let mut out = vec![E::ZERO; outer * axis_total * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for (pi, v) in values.iter().enumerate() {
                let rows = sizes[pi] * inner;
                let src = o * rows;
                let dst = o * axis_total * inner + off * inner;
                out[dst..dst + rows].copy_from_slice(&v[src..src + rows]);
                off += sizes[pi];
            }
        }
        let csizes = sizes.clone();
        let lens: Vec<usize> = values.iter().map(|v| v.len()).collect();
        let back = move |g: &[E]| {
            let mut grads: Vec<Vec<E>> = lens.iter().map(|&l| vec![E::ZERO; l]).collect();
            for o in 0..outer {
                let mut off = 0usize;
                for (pi, gp) in grads.iter_mut().enumerate() {
                    let rows = csizes[pi] * inner;
                    let src = o * axis_total * inner + off * inner;
                    let dst = o * rows;
                    gp[dst..dst + rows].copy_from_slice(&g[src..src + rows]);
                    off += csizes[pi];
                }
            }
            grads
        };
        self.push(out, osh, parts.to_vec(), Some(Box::new(back)))
    }

    /// Broadcast to a larger shape (right-aligned, dims equal or 1).
    pub fn broadcast_to(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ash = self.shape(a).to_vec();
        let osh = broadcast_shapes(&ash, &shape).expect("broadcast_to: incompatible");
        assert_eq!(osh, shape, "broadcast_to: {ash:?} does not broadcast to {shape:?}");
        let av = Rc::clone(&self.nodes[a.0].value);
        let mut out = vec![E::ZERO; numel(&osh)];
        bcast_for_each(&osh, &ash, &ash, |i, ia, _| out[i] = av[ia]);
        let (cash, cosh) = (ash.clone(), osh.clone());
        let alen = av.len();
        let back = move |g: &[E]| {
            let mut da = vec![E::ZERO; alen];
            bcast_for_each(&cosh, &cash, &cash, |i, ia, _| da[ia] += g[i]);
            vec![da]
        };
        self.push(out, osh, vec![a], Some(Box::new(back)))
    }

    /// Softmax along `axis`, with max subtraction for overflow safety.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let ash = self.shape(a).to_vec();
        assert!(axis < ash.len(), "softmax: bad axis");
        let n = ash[axis];
        let inner: usize = ash[axis + 1..].iter().product();
        let outer: usize = ash[..axis].iter().product();
        let av = Rc::clone(&self.nodes[a.0].value);
        let mut out = vec![E::ZERO; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = av[base];
                for j in 1..n {
                    mx = mx.max_val(av[base + j * inner]);
                }
                let mut sum = E::ZERO;
                for j in 0..n {
                    let e = (av[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let s = out.clone();
        let back = move |g: &[E]| {
            let mut da = vec![E::ZERO; s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut dot = E::ZERO;
                    for j in 0..n {
                        let idx = base + j * inner;
                        dot += g[idx] * s[idx];
                    }
                    for j in 0..n {
                        let idx = base + j * inner;
                        da[idx] = s[idx] * (g[idx] - dot);
                    }
                }
            }
            vec![da]
        };
        self.push(out, ash, vec![a], Some(Box::new(back)))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: E) -> Var {
        let xsh = self.shape(x).to_vec();
        let n = *xsh.last().expect("layer_norm: rank >= 1");
        assert_eq!(self.shape(gain), &[n], "layer_norm: gain shape");
        assert_eq!(self.shape(bias), &[n], "layer_norm: bias shape");
        let rows = numel(&xsh) / n;
        let xv = Rc::clone(&self.nodes[x.0].value);
        let gv = Rc::clone(&self.nodes[gain.0].value);
        let bv = Rc::clone(&self.nodes[bias.0].value);
        let inv_n = E::ONE / E::from_f64(n as f64);
        let mut out = vec![E::ZERO; xv.len()];
        let mut xhat = vec![E::ZERO; xv.len()];
        let mut inv_sigma = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let is = E::ONE / (var + eps).sqrt();
            inv_sigma[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * gv[j] + bv[j];
            }
        }
        let back = move |g: &[E]| {
            let mut dx = vec![E::ZERO; xv.len()];
            let mut dgain = vec![E::ZERO; n];
            let mut dbias = vec![E::ZERO; n];
            for r in 0..rows {
                let base = r * n;
                let mut mean_dxh = E::ZERO;
                let mut mean_dxh_xh = E::ZERO;
                for j in 0..n {
                    let gi = g[base + j];
                    let xh = xhat[base + j];
                    dgain[j] += gi * xh;
                    dbias[j] += gi;
                    let dxh = gi * gv[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh;
                }
                mean_dxh *= inv_n;
                mean_dxh_xh *= inv_n;
                for j in 0..n {
                    let dxh = g[base + j] * gv[j];
                    dx[base + j] = (dxh - mean_dxh - xhat[base + j] * mean_dxh_xh) * inv_sigma[r];
                }
            }
            vec![dx, dgain, dbias]
        };
        self.push(out, xsh, vec![x, gain, bias], Some(Box::new(back)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = Rc::clone(&self.nodes[a.0].value);
        let mut s = E::ZERO;
        for &v in av.iter() {
            s += v;
        }
        let n = av.len();
        let back = move |g: &[E]| vec![vec![g[0]; n]];
        self.push(vec![s], vec![1], vec![a], Some(Box::new(back)))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a);
        let s = self.sum_all(a);
        self.mul_scalar(s, E::ONE / E::from_f64(n as f64))
    }

    /// Sum over one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let ash = self.shape(a).to_vec();
        assert!(axis < ash.len());
        let n = ash[axis];
        let inner: usize = ash[axis + 1..].iter().product();
        let outer: usize = ash[..axis].iter().product();
        let av = Rc::clone(&self.nodes[a.0].value);
        let mut osh = ash.clone();
        osh.remove(axis);
        if osh.is_empty() {
            osh.push(1);
        }
        let mut out = vec![E::ZERO; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += av[o * n * inner + j * inner + i];
                }
            }
        }
        let alen = av.len();
        let back = move |g: &[E]| {
            let mut da = vec![E::ZERO; alen];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        da[o * n * inner + j * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![da]
        };
        self.push(out, osh, vec![a], Some(Box::new(back)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis);
        self.mul_scalar(s, E::ONE / E::from_f64(n as f64))
    }

    /// Inclusive cumulative sum along the last axis.
    pub fn cumsum_last(&mut self, a: Var) -> Var {
        let ash = self.shape(a).to_vec();
        let n = *ash.last().expect("cumsum: rank >= 1");
        let rows = numel(&ash) / n;
        let av = Rc::clone(&self.nodes[a.0].value);
        let mut out = vec![E::ZERO; av.len()];
        for r in 0..rows {
            let mut acc = E::ZERO;
            for j in 0..n {
                acc += av[r * n + j];
                out[r * n + j] = acc;
            }
        }
        let len = av.len();
        let back = move |g: &[E]| {
            let mut da = vec![E::ZERO; len];
            for r in 0..rows {
                let mut acc = E::ZERO;
                for j in (0..n).rev() {
                    acc += g[r * n + j];
                    da[r * n + j] = acc;
                }
            }
            vec![da]
        };
        self.push(out, ash, vec![a], Some(Box::new(back)))
    }

    /// Rotary position embedding over the last axis (`d` even): consecutive
    /// pairs are rotated by `positions[t] * base^(-2j/d)` where `t` indexes
    /// the second-to-last axis.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Var {
        let ash = self.shape(a).to_vec();
        let rank = ash.len();
        assert!(rank >= 2, "rope: rank >= 2");
        let d = ash[rank - 1];
        assert!(d % 2 == 0, "rope: head dim must be even, got {d}");
        let t_len = ash[rank - 2];
        assert_eq!(positions.len(), t_len, "rope: positions length");
        let outer = numel(&ash) / (t_len * d);
        let half = d / 2;
        // Precompute cos/sin tables per (t, j).
        let mut cos_t = vec![E::ZERO; t_len * half];
        let mut sin_t = vec![E::ZERO; t_len * half];
        for t in 0..t_len {
            for j in 0..half {
                let theta = positions[t] as f64 * base.powf(-2.0 * j as f64 / d as f64);
                cos_t[t * half + j] = E::from_f64(theta.cos());
                sin_t[t * half + j] = E::from_f64(theta.sin());
            }
        }
        let av = Rc::clone(&self.nodes[a.0].value);
        let mut out = vec![E::ZERO; av.len()];
        for o in 0..outer {
            for t in 0..t_len {
                let base_i = (o * t_len + t) * d;
                for j in 0..half {
                    let (c, s) = (cos_t[t * half + j], sin_t[t * half + j]);
                    let x0 = av[base_i + 2 * j];
                    let x1 = av[base_i + 2 * j + 1];
                    out[base_i + 2 * j] = x0 * c - x1 * s;
                    out[base_i + 2 * j + 1] = x0 * s + x1 * c;
                }
            }
        }
        let len = av.len();
        let back = move |g: &[E]| {
            let mut da = vec![E::ZERO; len];
            for o in 0..outer {
                for t in 0..t_len {
                    let base_i = (o * t_len + t) * d;
                    for j in 0..half {
                        let (c, s) = (cos_t[t * half + j], sin_t[t * half + j]);
                        let g0 = g[base_i + 2 * j];
                        let g1 = g[base_i + 2 * j + 1];
                        // Inverse rotation (rotations are orthogonal).
                        da[base_i + 2 * j] = g0 * c + g1 * s;
                        da[base_i + 2 * j + 1] = -g0 * s + g1 * c;
                    }
                }
            }
            vec![da]
        };
        self.push(out, ash, vec![a], Some(Box::new(back)))
    }
}
