//! Differentiable operations recorded on the tape.
//!
//! Tensors are row-major; most ops treat them as 2-D matrices (1-D tensors act
//! as a single row where that matters). Backward closures capture shared
//! handles to the input buffers they need.

use std::rc::Rc;

use crate::tape::Tensor;

/// Row-major matrix product into a fresh buffer. `ta`/`tb` transpose the
/// logical operands; `m`/`k`/`n` are the logical (post-transpose) dims.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

fn check2d(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => panic!("expected 1-D or 2-D tensor, got shape {s:?}"),
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64 + 'static, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let xd = x.data();
    let out: Vec<f64> = xd.iter().map(|&v| f(v)).collect();
    let shape = x.shape().to_vec();
    let xd2 = Rc::clone(&xd);
    x.tape.op(
        &[x],
        out,
        shape,
        Box::new(move |g| {
            vec![Some(
                g.iter().zip(xd2.iter()).map(|(&gi, &xi)| gi * df(xi, f(xi))).collect(),
            )]
        }),
    )
}

fn binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    da: impl Fn(f64, f64) -> f64 + 'static,
    db: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
    let ad = a.data();
    let bd = b.data();
    let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect();
    let shape = a.shape().to_vec();
    let need_a = a.requires_grad();
    let need_b = b.requires_grad();
    let (ad2, bd2) = (Rc::clone(&ad), Rc::clone(&bd));
    a.tape.op(
        &[a, b],
        out,
        shape,
        Box::new(move |g| {
            let ga = need_a.then(|| {
                g.iter()
                    .zip(ad2.iter().zip(bd2.iter()))
                    .map(|(&gi, (&x, &y))| gi * da(x, y))
                    .collect()
            });
            let gb = need_b.then(|| {
                g.iter()
                    .zip(ad2.iter().zip(bd2.iter()))
                    .map(|(&gi, (&x, &y))| gi * db(x, y))
                    .collect()
            });
            vec![ga, gb]
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Elementwise max; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Tensor {
        binary(
            self,
            other,
            f64::max,
            |x, y| if x >= y { 1.0 } else { 0.0 },
            |x, y| if x >= y { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise min; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Tensor {
        binary(
            self,
            other,
            f64::min,
            |x, y| if x <= y { 1.0 } else { 0.0 },
            |x, y| if x <= y { 0.0 } else { 1.0 },
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Elementwise x^c for x >= 0.
    pub fn powf(&self, c: f64) -> Tensor {
        unary(
            self,
            move |x| x.powf(c),
            move |x, _| {
                if x == 0.0 {
                    0.0
                } else {
                    c * x.powf(c - 1.0)
                }
            },
        )
    }

    /// Clamp to [lo, hi]; gradient passes only in the interior.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary(
            self,
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        unary(
            self,
            move |x| x.max(lo),
            move |x, _| if x > lo { 1.0 } else { 0.0 },
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = check2d(self);
        let (k2, n) = check2d(other);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let ad = self.data();
        let bd = other.data();
        let out = matmul_raw(&ad, &bd, m, k, n, false, false);
        let need_a = self.requires_grad();
        let need_b = other.requires_grad();
        self.tape.op(
            &[self, other],
            out,
            vec![m, n],
            Box::new(move |g| {
                let ga = need_a.then(|| matmul_raw(g, &bd, m, n, k, false, true));
                let gb = need_b.then(|| matmul_raw(&ad, g, k, m, n, true, false));
                vec![ga, gb]
            }),
        )
    }

    pub fn t(&self) -> Tensor {
        let (r, c) = check2d(self);
        let xd = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.tape.op(
            &[self],
            out,
            vec![c, r],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(self.len(), shape.iter().product::<usize>(), "reshape size mismatch");
        let out = self.to_vec();
        self.tape.op(&[self], out, shape, Box::new(move |g| vec![Some(g.to_vec())]))
    }

    /// Broadcast-add a row vector over every row.
    pub fn add_rowvec(&self, bias: &Tensor) -> Tensor {
        let (r, c) = check2d(self);
        assert_eq!(bias.len(), c, "bias length != columns");
        let xd = self.data();
        let bd = bias.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xd[i * c + j] + bd[j]);
            }
        }
        let need_b = bias.requires_grad();
        let need_x = self.requires_grad();
        self.tape.op(
            &[self, bias],
            out,
            self.shape().to_vec(),
            Box::new(move |g| {
                let gx = need_x.then(|| g.to_vec());
                let gb = need_b.then(|| {
                    let mut acc = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            acc[j] += g[i * c + j];
                        }
                    }
                    acc
                });
                vec![gx, gb]
            }),
        )
    }

    /// Broadcast-multiply each row by a row vector.
    pub fn mul_rowvec(&self, w: &Tensor) -> Tensor {
        let (r, c) = check2d(self);
        assert_eq!(w.len(), c, "row vector length != columns");
        let xd = self.data();
        let wd = w.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xd[i * c + j] * wd[j]);
            }
        }
        let need_w = w.requires_grad();
        let need_x = self.requires_grad();
        let (xd2, wd2) = (Rc::clone(&xd), Rc::clone(&wd));
        self.tape.op(
            &[self, w],
            out,
            self.shape().to_vec(),
            Box::new(move |g| {
                let gx = need_x.then(|| {
                    let mut v = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            v.push(g[i * c + j] * wd2[j]);
                        }
                    }
                    v
                });
                let gw = need_w.then(|| {
                    let mut acc = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            acc[j] += g[i * c + j] * xd2[i * c + j];
                        }
                    }
                    acc
                });
                vec![gx, gw]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.len();
        self.tape
            .op(&[self], vec![s], vec![1], Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Numerically-stable softmax along the last dimension (per row).
    pub fn softmax_rows(&self) -> Tensor {
        let (r, c) = check2d(self);
        let xd = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let sd = Rc::new(out.clone());
        self.tape.op(
            &[self],
            out,
            self.shape().to_vec(),
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let s = &sd[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(gr).map(|(&si, &gi)| si * gi).sum();
                    for j in 0..c {
                        gx[i * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn log_softmax_rows(&self) -> Tensor {
        let (r, c) = check2d(self);
        let xd = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let od = Rc::new(out.clone());
        self.tape.op(
            &[self],
            out,
            self.shape().to_vec(),
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let lsm = &od[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        gx[i * c + j] = gr[j] - lsm[j].exp() * gsum;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Per-row normalization to zero mean / unit variance (no affine).
    pub fn layer_norm_rows(&self, eps: f64) -> Tensor {
        let (r, c) = check2d(self);
        let xd = self.data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * istd;
            }
        }
        let yd = Rc::new(out.clone());
        self.tape.op(
            &[self],
            out,
            self.shape().to_vec(),
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = &yd[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let gmean: f64 = gr.iter().sum::<f64>() / c as f64;
                    let gydot: f64 = gr.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (gr[j] - gmean - y[j] * gydot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let (r, c) = check2d(self);
        assert!(start + len <= r, "row slice out of range");
        let xd = self.data();
        let out = xd[start * c..(start + len) * c].to_vec();
        self.tape.op(
            &[self],
            out,
            vec![len, c],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                gx[start * c..(start + len) * c].copy_from_slice(g);
                vec![Some(gx)]
            }),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (r, c) = check2d(self);
        assert!(start + len <= c, "col slice out of range");
        let xd = self.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        self.tape.op(
            &[self],
            out,
            vec![r, len],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Select rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let (r, c) = check2d(self);
        let xd = self.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            assert!(ix < r, "gather_rows index {ix} out of range {r}");
            out.extend_from_slice(&xd[ix * c..(ix + 1) * c]);
        }
        let idx = indices.to_vec();
        let k = indices.len();
        self.tape.op(
            &[self],
            out,
            vec![k, c],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for (pos, &ix) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[ix * c + j] += g[pos * c + j];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Select individual (row, col) entries; result is a vector.
    pub fn gather_elems(&self, coords: &[(usize, usize)]) -> Tensor {
        let (r, c) = check2d(self);
        let xd = self.data();
        let out: Vec<f64> = coords
            .iter()
            .map(|&(i, j)| {
                assert!(i < r && j < c, "gather_elems ({i},{j}) out of range");
                xd[i * c + j]
            })
            .collect();
        let coords = coords.to_vec();
        let k = out.len();
        self.tape.op(
            &[self],
            out,
            vec![k],
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for (pos, &(i, j)) in coords.iter().enumerate() {
                    gx[i * c + j] += g[pos];
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Stack tensors with equal column counts on top of each other.
pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let c = check2d(parts[0]).1;
    let mut out = Vec::new();
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, pc) = check2d(p);
        assert_eq!(pc, c, "concat_rows column mismatch");
        out.extend_from_slice(&p.data());
        row_counts.push(r);
    }
    let total: usize = row_counts.iter().sum();
    parts[0].tape().op(
        parts,
        out,
        vec![total, c],
        Box::new(move |g| {
            let mut res = Vec::with_capacity(row_counts.len());
            let mut off = 0;
            for &r in &row_counts {
                res.push(Some(g[off * c..(off + r) * c].to_vec()));
                off += r;
            }
            res
        }),
    )
}

/// Place tensors with equal row counts side by side.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let r = check2d(parts[0]).0;
    let col_counts: Vec<usize> = parts
        .iter()
        .map(|p| {
            let (pr, pc) = check2d(p);
            assert_eq!(pr, r, "concat_cols row mismatch");
            pc
        })
        .collect();
    let total: usize = col_counts.iter().sum();
    let datas: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| p.data()).collect();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for (p, &pc) in datas.iter().zip(&col_counts) {
            out.extend_from_slice(&p[i * pc..(i + 1) * pc]);
        }
    }
    parts[0].tape().op(
        parts,
        out,
        vec![r, total],
        Box::new(move |g| {
            let mut res: Vec<Option<Vec<f64>>> =
                col_counts.iter().map(|&pc| Some(Vec::with_capacity(r * pc))).collect();
            for i in 0..r {
                let mut off = 0;
                for (slot, &pc) in res.iter_mut().zip(&col_counts) {
                    slot.as_mut()
                        .unwrap()
                        .extend_from_slice(&g[i * total + off..i * total + off + pc]);
                    off += pc;
                }
            }
            res
        }),
    )
}
