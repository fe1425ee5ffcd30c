//! Differentiable primitive operations.
//!
//! Every op validates shapes, computes the forward result, and registers a
//! backward closure returning one gradient contribution per parent. Raw
//! (graph-free) kernels used by both directions live at the bottom and are
//! reused by inference-only paths.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::{Elem, Tensor, BLOCK_SENTINEL};

fn same_shape<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn is_scalar<E: Elem>(t: &Tensor<E>) -> bool {
    t.numel() == 1
}

// ── elementwise binary ──────────────────────────────────────────────

/// Elementwise binary op; the right-hand side may be a scalar tensor.
macro_rules! binary_op {
    ($name:ident, $fwd:expr, $bwd_a:expr, $bwd_b:expr) => {
        pub fn $name<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
            let scalar_rhs = is_scalar(b) && !is_scalar(a);
            if !scalar_rhs {
                same_shape(a, b, stringify!($name))?;
            }
            let (av, bv) = (a.to_vec(), b.to_vec());
            let out: Vec<E> = if scalar_rhs {
                let s = bv[0];
                av.iter().map(|&x| $fwd(x, s)).collect()
            } else {
                av.iter().zip(bv.iter()).map(|(&x, &y)| $fwd(x, y)).collect()
            };
            let shape = a.shape().to_vec();
            Ok(Tensor::from_op(
                out,
                shape,
                vec![a.clone(), b.clone()],
                Box::new(move |parents, g| {
                    let (pa, pb) = (&parents[0], &parents[1]);
                    let av = pa.to_vec();
                    let bv = pb.to_vec();
                    let ga = if pa.requires_grad() {
                        let mut buf = vec![E::ZERO; av.len()];
                        if scalar_rhs {
                            let s = bv[0];
                            for i in 0..av.len() {
                                buf[i] = $bwd_a(g[i], av[i], s);
                            }
                        } else {
                            for i in 0..av.len() {
                                buf[i] = $bwd_a(g[i], av[i], bv[i]);
                            }
                        }
                        Some(buf)
                    } else {
                        None
                    };
                    let gb = if pb.requires_grad() {
                        if scalar_rhs {
                            let s = bv[0];
                            let mut acc = E::ZERO;
                            for i in 0..av.len() {
                                acc += $bwd_b(g[i], av[i], s);
                            }
                            Some(vec![acc])
                        } else {
                            let mut buf = vec![E::ZERO; bv.len()];
                            for i in 0..bv.len() {
                                buf[i] = $bwd_b(g[i], av[i], bv[i]);
                            }
                            Some(buf)
                        }
                    } else {
                        None
                    };
                    vec![ga, gb]
                }),
            ))
        }
    };
}

binary_op!(add, |x, y| x + y, |g, _x, _y| g, |g, _x, _y| g);
binary_op!(sub, |x, y| x - y, |g, _x, _y| g, |g: E, _x, _y| -g);
binary_op!(mul, |x, y| x * y, |g: E, _x, y: E| g * y, |g: E, x: E, _y| g * x);
binary_op!(
    div,
    |x, y| x / y,
    |g: E, _x, y: E| g / y,
    |g: E, x: E, y: E| -g * x / (y * y)
);

pub fn add_scalar<E: Elem>(x: &Tensor<E>, c: E) -> Tensor<E> {
    let out: Vec<E> = x.to_vec().iter().map(|&v| v + c).collect();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|_, g| vec![Some(g.to_vec())]),
    )
}

pub fn mul_scalar<E: Elem>(x: &Tensor<E>, c: E) -> Tensor<E> {
    let out: Vec<E> = x.to_vec().iter().map(|&v| v * c).collect();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |_, g| vec![Some(g.iter().map(|&v| v * c).collect())]),
    )
}

// ── elementwise unary ───────────────────────────────────────────────

pub fn relu<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let out: Vec<E> = x
        .to_vec()
        .iter()
        .map(|&v| if v > E::ZERO { v } else { E::ZERO })
        .collect();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|parents, g| {
            let xv = parents[0].to_vec();
            vec![Some(
                g.iter()
                    .zip(xv.iter())
                    .map(|(&gv, &xv)| if xv > E::ZERO { gv } else { E::ZERO })
                    .collect(),
            )]
        }),
    )
}

fn sigmoid_scalar<E: Elem>(x: E) -> E {
    // Stable in both tails.
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

/// SiLU (`x * sigmoid(x)`): the crate's model activation. Smooth
/// everywhere, which keeps finite-difference gradient checks clean where
/// ReLU's kink would trip them.
pub fn silu<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let xv = x.to_vec();
    let out: Vec<E> = xv.iter().map(|&v| v * sigmoid_scalar(v)).collect();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(|parents, g| {
            let xv = parents[0].to_vec();
            vec![Some(
                g.iter()
                    .zip(xv.iter())
                    .map(|(&gv, &v)| {
                        let s = sigmoid_scalar(v);
                        gv * (s + v * s * (E::ONE - s))
                    })
                    .collect(),
            )]
        }),
    )
}

pub fn sigmoid<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let out: Vec<E> = x.to_vec().iter().map(|&v| sigmoid_scalar(v)).collect();
    let out_c = out.clone();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |_, g| {
            vec![Some(
                g.iter()
                    .zip(out_c.iter())
                    .map(|(&gv, &y)| gv * y * (E::ONE - y))
                    .collect(),
            )]
        }),
    )
}

// ── reductions ──────────────────────────────────────────────────────

pub fn sum_all<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let mut acc = E::ZERO;
    x.with_data(|d| {
        for &v in d {
            acc += v;
        }
    });
    Ok(Tensor::from_op(
        vec![acc],
        vec![1],
        vec![x.clone()],
        Box::new(|parents, g| {
            let n = parents[0].numel();
            vec![Some(vec![g[0]; n])]
        }),
    ))
}

pub fn mean_all<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = x.numel();
    let s = sum_all(x)?;
    Ok(mul_scalar(&s, E::ONE / E::from_f64(n as f64)))
}

// ── matrix products ─────────────────────────────────────────────────

fn dims2<E: Elem>(t: &Tensor<E>, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{op}: expected 2-d tensor, got {s:?}"))),
    }
}

/// `a (m,k) @ b (k,n) -> (m,n)`
pub fn matmul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape(format!("matmul: inner dims {k} vs {k2}")));
    }
    let mut out = vec![E::ZERO; m * n];
    a.with_data(|av| b.with_data(|bv| matmul_raw(av, bv, m, k, n, &mut out)));
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |parents, g| {
            let (pa, pb) = (&parents[0], &parents[1]);
            let ga = pa.requires_grad().then(|| {
                let mut buf = vec![E::ZERO; m * k];
                pb.with_data(|bv| matmul_nt_raw(g, bv, m, n, k, &mut buf));
                buf
            });
            let gb = pb.requires_grad().then(|| {
                let mut buf = vec![E::ZERO; k * n];
                pa.with_data(|av| matmul_tn_raw(av, g, m, k, n, &mut buf));
                buf
            });
            vec![ga, gb]
        }),
    ))
}

/// `a (m,k) @ b(n,k)^T -> (m,n)`
pub fn matmul_nt<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = dims2(a, "matmul_nt")?;
    let (n, k2) = dims2(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::shape(format!("matmul_nt: inner dims {k} vs {k2}")));
    }
    let mut out = vec![E::ZERO; m * n];
    a.with_data(|av| b.with_data(|bv| matmul_nt_raw(av, bv, m, k, n, &mut out)));
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |parents, g| {
            let (pa, pb) = (&parents[0], &parents[1]);
            let ga = pa.requires_grad().then(|| {
                let mut buf = vec![E::ZERO; m * k];
                pb.with_data(|bv| matmul_raw(g, bv, m, n, k, &mut buf));
                buf
            });
            let gb = pb.requires_grad().then(|| {
                let mut buf = vec![E::ZERO; n * k];
                pa.with_data(|av| matmul_tn_raw(g, av, m, n, k, &mut buf));
                buf
            });
            vec![ga, gb]
        }),
    ))
}

pub fn add_row_bias<E: Elem>(x: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (r, c) = dims2(x, "add_row_bias")?;
    if b.shape() != [c] {
        return Err(Error::shape(format!(
            "add_row_bias: bias {:?} vs {c} columns",
            b.shape()
        )));
    }
    let bv = b.to_vec();
    let mut out = x.to_vec();
    for row in 0..r {
        for col in 0..c {
            out[row * c + col] += bv[col];
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![r, c],
        vec![x.clone(), b.clone()],
        Box::new(move |parents, g| {
            let gx = parents[0].requires_grad().then(|| g.to_vec());
            let gb = parents[1].requires_grad().then(|| {
                let mut buf = vec![E::ZERO; c];
                for row in 0..r {
                    for col in 0..c {
                        buf[col] += g[row * c + col];
                    }
                }
                buf
            });
            vec![gx, gb]
        }),
    ))
}

// ── convolution ─────────────────────────────────────────────────────

fn dims3<E: Elem>(t: &Tensor<E>, op: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(format!("{op}: expected 3-d tensor, got {s:?}"))),
    }
}

/// Cross-correlation of `x (Cin,H,W)` with `w (Cout,Cin,k,k)`, optional
/// per-channel bias, square kernel k in {1,3}.
pub fn conv2d<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (cin, h, win) = dims3(x, "conv2d")?;
    let (cout, cin_w, kh, kw) = match w.shape() {
        [co, ci, kh, kw] => (*co, *ci, *kh, *kw),
        s => Err(Error::shape(format!("conv2d: weight shape {s:?}")))?,
    };
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::invalid(format!("conv2d: kernel {kh}x{kw} not in {{1,3}}")));
    }
    if cin != cin_w {
        return Err(Error::shape(format!(
            "conv2d: input channels {cin} vs weight {cin_w}"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride 0"));
    }
    let k = kh;
    if h + 2 * pad < k || win + 2 * pad < k {
        return Err(Error::shape(format!(
            "conv2d: input {h}x{win} too small for kernel {k} pad {pad}"
        )));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (win + 2 * pad - k) / stride + 1;
    if let Some(bias) = b {
        if bias.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d: bias {:?} vs {cout} output channels",
                bias.shape()
            )));
        }
    }

    let mut out = vec![E::ZERO; cout * ho * wo];
    x.with_data(|xv| {
        w.with_data(|wv| {
            conv2d_raw(xv, wv, cin, h, win, cout, k, stride, pad, ho, wo, &mut out);
        })
    });
    if let Some(bias) = b {
        bias.with_data(|bv| {
            for co in 0..cout {
                let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
                for v in plane.iter_mut() {
                    *v += bv[co];
                }
            }
        });
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(bias) = b {
        parents.push(bias.clone());
    }
    let has_bias = b.is_some();
    Ok(Tensor::from_op(
        out,
        vec![cout, ho, wo],
        parents,
        Box::new(move |parents, g| {
            let (px, pw) = (&parents[0], &parents[1]);
            let gx = px.requires_grad().then(|| {
                let mut buf = vec![E::ZERO; cin * h * win];
                pw.with_data(|wv| {
                    conv2d_input_grad_raw(
                        g, wv, cin, h, win, cout, k, stride, pad, ho, wo, &mut buf,
                    );
                });
                buf
            });
            let gw = pw.requires_grad().then(|| {
                let mut buf = vec![E::ZERO; cout * cin * k * k];
                px.with_data(|xv| {
                    conv2d_weight_grad_raw(
                        g, xv, cin, h, win, cout, k, stride, pad, ho, wo, &mut buf,
                    );
                });
                buf
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let gb = parents[2].requires_grad().then(|| {
                    let mut buf = vec![E::ZERO; cout];
                    for co in 0..cout {
                        let mut acc = E::ZERO;
                        for v in &g[co * ho * wo..(co + 1) * ho * wo] {
                            acc += *v;
                        }
                        buf[co] = acc;
                    }
                    buf
                });
                grads.push(gb);
            }
            grads
        }),
    ))
}

// ── resampling ──────────────────────────────────────────────────────

/// Bilinear interpolation with half-pixel centers (align-corners=false).
/// Identity when the sizes already match.
pub fn bilinear_resize<E: Elem>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let (c, h, w) = dims3(x, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize: zero output extent"));
    }
    let taps_y = bilinear_taps(h, out_h);
    let taps_x = bilinear_taps(w, out_w);
    let mut out = vec![E::ZERO; c * out_h * out_w];
    x.with_data(|xv| {
        bilinear_apply(xv, c, h, w, out_h, out_w, &taps_y, &taps_x, &mut out);
    });
    let taps_y = Rc::new(taps_y);
    let taps_x = Rc::new(taps_x);
    Ok(Tensor::from_op(
        out,
        vec![c, out_h, out_w],
        vec![x.clone()],
        Box::new(move |_parents, g| {
            let mut buf = vec![E::ZERO; c * h * w];
            for ch in 0..c {
                let gp = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                let ip = &mut buf[ch * h * w..(ch + 1) * h * w];
                for oy in 0..out_h {
                    let (y0, y1, fy) = taps_y[oy];
                    for ox in 0..out_w {
                        let (x0, x1, fx) = taps_x[ox];
                        let gv = gp[oy * out_w + ox].to_f64();
                        ip[y0 * w + x0] += E::from_f64(gv * (1.0 - fy) * (1.0 - fx));
                        ip[y0 * w + x1] += E::from_f64(gv * (1.0 - fy) * fx);
                        ip[y1 * w + x0] += E::from_f64(gv * fy * (1.0 - fx));
                        ip[y1 * w + x1] += E::from_f64(gv * fy * fx);
                    }
                }
            }
            vec![Some(buf)]
        }),
    ))
}

/// Adaptive average pooling to `(out_h, out_w)` bins (PPM).
pub fn adaptive_avg_pool<E: Elem>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let (c, h, w) = dims3(x, "adaptive_avg_pool")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("adaptive_avg_pool: zero output extent"));
    }
    let ranges_y = pool_ranges(h, out_h);
    let ranges_x = pool_ranges(w, out_w);
    let mut out = vec![E::ZERO; c * out_h * out_w];
    x.with_data(|xv| {
        for ch in 0..c {
            let ip = &xv[ch * h * w..(ch + 1) * h * w];
            let op = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(ys, ye)) in ranges_y.iter().enumerate() {
                for (ox, &(xs, xe)) in ranges_x.iter().enumerate() {
                    let mut acc = E::ZERO;
                    for y in ys..ye {
                        for xx in xs..xe {
                            acc += ip[y * w + xx];
                        }
                    }
                    let cnt = ((ye - ys) * (xe - xs)) as f64;
                    op[oy * out_w + ox] = acc * E::from_f64(1.0 / cnt);
                }
            }
        }
    });
    let ranges_y = Rc::new(ranges_y);
    let ranges_x = Rc::new(ranges_x);
    Ok(Tensor::from_op(
        out,
        vec![c, out_h, out_w],
        vec![x.clone()],
        Box::new(move |_parents, g| {
            let mut buf = vec![E::ZERO; c * h * w];
            for ch in 0..c {
                let gp = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                let ip = &mut buf[ch * h * w..(ch + 1) * h * w];
                for (oy, &(ys, ye)) in ranges_y.iter().enumerate() {
                    for (ox, &(xs, xe)) in ranges_x.iter().enumerate() {
                        let cnt = ((ye - ys) * (xe - xs)) as f64;
                        let gv = gp[oy * out_w + ox] * E::from_f64(1.0 / cnt);
                        for y in ys..ye {
                            for xx in xs..xe {
                                ip[y * w + xx] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(buf)]
        }),
    ))
}

// ── normalization and softmax ───────────────────────────────────────

/// Softmax over the last axis. Rejects NaN inputs; the blocked sentinel
/// (-1e9) is a valid entry.
pub fn softmax_lastdim<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let shape = x.shape().to_vec();
    let cols = *shape.last().ok_or_else(|| Error::shape("softmax: rank 0"))?;
    if cols == 0 {
        return Err(Error::shape("softmax: empty last axis"));
    }
    let rows = x.numel() / cols;
    let xv = x.to_vec();
    let mut out = vec![E::ZERO; xv.len()];
    for r in 0..rows {
        let row = &xv[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row {
            if v.is_nan() {
                return Err(Error::NonFinite(format!("softmax: NaN input in row {r}")));
            }
            mx = mx.max(v);
        }
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut z = E::ZERO;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            z += e;
        }
        let inv = E::ONE / z;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    let out_c = out.clone();
    Ok(Tensor::from_op(
        out,
        shape,
        vec![x.clone()],
        Box::new(move |_parents, g| {
            let mut buf = vec![E::ZERO; out_c.len()];
            for r in 0..rows {
                let y = &out_c[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let mut dot = E::ZERO;
                for i in 0..cols {
                    dot += gr[i] * y[i];
                }
                let br = &mut buf[r * cols..(r + 1) * cols];
                for i in 0..cols {
                    br[i] = y[i] * (gr[i] - dot);
                }
            }
            vec![Some(buf)]
        }),
    ))
}

/// Row-wise layer normalization with learnable scale and shift;
/// eps is added to the variance.
pub fn layer_norm_rows<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let (r, c) = dims2(x, "layer_norm_rows")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "layer_norm_rows: gamma {:?} beta {:?} vs {c} columns",
            gamma.shape(),
            beta.shape()
        )));
    }
    let xv = x.to_vec();
    let gv = gamma.to_vec();
    let bv = beta.to_vec();
    let mut out = vec![E::ZERO; xv.len()];
    let mut xhat = vec![E::ZERO; xv.len()];
    let mut inv_std = vec![E::ZERO; r];
    let inv_c = 1.0 / c as f64;
    for row in 0..r {
        let xr = &xv[row * c..(row + 1) * c];
        let mut mean = E::ZERO;
        for &v in xr {
            mean += v;
        }
        mean *= E::from_f64(inv_c);
        let mut var = E::ZERO;
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= E::from_f64(inv_c);
        let istd = E::ONE / (var + E::from_f64(eps)).sqrt();
        inv_std[row] = istd;
        for i in 0..c {
            let xh = (xr[i] - mean) * istd;
            xhat[row * c + i] = xh;
            out[row * c + i] = xh * gv[i] + bv[i];
        }
    }
    let xhat = Rc::new(xhat);
    let inv_std = Rc::new(inv_std);
    Ok(Tensor::from_op(
        out,
        vec![r, c],
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |parents, g| {
            let gamma_v = parents[1].to_vec();
            let gx = parents[0].requires_grad().then(|| {
                let mut buf = vec![E::ZERO; r * c];
                for row in 0..r {
                    let xh = &xhat[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let mut mean_gy = E::ZERO;
                    let mut mean_gy_xh = E::ZERO;
                    for i in 0..c {
                        let gy = gr[i] * gamma_v[i];
                        mean_gy += gy;
                        mean_gy_xh += gy * xh[i];
                    }
                    mean_gy *= E::from_f64(inv_c);
                    mean_gy_xh *= E::from_f64(inv_c);
                    let br = &mut buf[row * c..(row + 1) * c];
                    for i in 0..c {
                        let gy = gr[i] * gamma_v[i];
                        br[i] = (gy - mean_gy - xh[i] * mean_gy_xh) * inv_std[row];
                    }
                }
                buf
            });
            let gg = parents[1].requires_grad().then(|| {
                let mut buf = vec![E::ZERO; c];
                for row in 0..r {
                    for i in 0..c {
                        buf[i] += g[row * c + i] * xhat[row * c + i];
                    }
                }
                buf
            });
            let gb = parents[2].requires_grad().then(|| {
                let mut buf = vec![E::ZERO; c];
                for row in 0..r {
                    for i in 0..c {
                        buf[i] += g[row * c + i];
                    }
                }
                buf
            });
            vec![gx, gg, gb]
        }),
    ))
}

// ── layout and indexing ─────────────────────────────────────────────

/// `(C,H,W) -> (H*W, C)` — channels-last rows for per-position work.
pub fn chw_to_lc<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (c, h, w) = dims3(x, "chw_to_lc")?;
    let l = h * w;
    let xv = x.to_vec();
    let mut out = vec![E::ZERO; l * c];
    for ch in 0..c {
        for p in 0..l {
            out[p * c + ch] = xv[ch * l + p];
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![l, c],
        vec![x.clone()],
        Box::new(move |_parents, g| {
            let mut buf = vec![E::ZERO; c * l];
            for ch in 0..c {
                for p in 0..l {
                    buf[ch * l + p] = g[p * c + ch];
                }
            }
            vec![Some(buf)]
        }),
    ))
}

/// `(H*W, C) -> (C,H,W)` — inverse of [`chw_to_lc`].
pub fn lc_to_chw<E: Elem>(x: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let (l, c) = dims2(x, "lc_to_chw")?;
    if l != h * w {
        return Err(Error::shape(format!("lc_to_chw: {l} rows vs {h}x{w}")));
    }
    let xv = x.to_vec();
    let mut out = vec![E::ZERO; c * l];
    for ch in 0..c {
        for p in 0..l {
            out[ch * l + p] = xv[p * c + ch];
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![c, h, w],
        vec![x.clone()],
        Box::new(move |_parents, g| {
            let mut buf = vec![E::ZERO; l * c];
            for ch in 0..c {
                for p in 0..l {
                    buf[p * c + ch] = g[ch * l + p];
                }
            }
            vec![Some(buf)]
        }),
    ))
}

/// Gather rows by index. Indices are routing, not differentiable; gradients
/// scatter-add into the source rows.
pub fn select_rows<E: Elem>(x: &Tensor<E>, idx: &[usize]) -> Result<Tensor<E>> {
    let (r, c) = dims2(x, "select_rows")?;
    for &i in idx {
        if i >= r {
            return Err(Error::invalid(format!("select_rows: index {i} out of {r}")));
        }
    }
    let xv = x.to_vec();
    let mut out = vec![E::ZERO; idx.len() * c];
    for (o, &i) in idx.iter().enumerate() {
        out[o * c..(o + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
    }
    let idx = Rc::new(idx.to_vec());
    Ok(Tensor::from_op(
        out,
        vec![idx.len(), c],
        vec![x.clone()],
        Box::new(move |_parents, g| {
            let mut buf = vec![E::ZERO; r * c];
            for (o, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    buf[i * c + j] += g[o * c + j];
                }
            }
            vec![Some(buf)]
        }),
    ))
}

pub fn concat_rows<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ra, ca) = dims2(a, "concat_rows")?;
    let (rb, cb) = dims2(b, "concat_rows")?;
    if ca != cb {
        return Err(Error::shape(format!("concat_rows: {ca} vs {cb} columns")));
    }
    let mut out = a.to_vec();
    out.extend_from_slice(&b.to_vec());
    Ok(Tensor::from_op(
        out,
        vec![ra + rb, ca],
        vec![a.clone(), b.clone()],
        Box::new(move |parents, g| {
            let ga = parents[0]
                .requires_grad()
                .then(|| g[..ra * ca].to_vec());
            let gb = parents[1]
                .requires_grad()
                .then(|| g[ra * ca..].to_vec());
            vec![ga, gb]
        }),
    ))
}

pub fn narrow_rows<E: Elem>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let (r, c) = dims2(x, "narrow_rows")?;
    if start + len > r {
        return Err(Error::shape(format!(
            "narrow_rows: {start}+{len} out of {r} rows"
        )));
    }
    let out = x.to_vec()[start * c..(start + len) * c].to_vec();
    Ok(Tensor::from_op(
        out,
        vec![len, c],
        vec![x.clone()],
        Box::new(move |_parents, g| {
            let mut buf = vec![E::ZERO; r * c];
            buf[start * c..(start + len) * c].copy_from_slice(g);
            vec![Some(buf)]
        }),
    ))
}

pub fn concat_cols<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ra, ca) = dims2(a, "concat_cols")?;
    let (rb, cb) = dims2(b, "concat_cols")?;
    if ra != rb {
        return Err(Error::shape(format!("concat_cols: {ra} vs {rb} rows")));
    }
    let (av, bv) = (a.to_vec(), b.to_vec());
    let c = ca + cb;
    let mut out = vec![E::ZERO; ra * c];
    for row in 0..ra {
        out[row * c..row * c + ca].copy_from_slice(&av[row * ca..(row + 1) * ca]);
        out[row * c + ca..(row + 1) * c].copy_from_slice(&bv[row * cb..(row + 1) * cb]);
    }
    Ok(Tensor::from_op(
        out,
        vec![ra, c],
        vec![a.clone(), b.clone()],
        Box::new(move |parents, g| {
            let ga = parents[0].requires_grad().then(|| {
                let mut buf = vec![E::ZERO; ra * ca];
                for row in 0..ra {
                    buf[row * ca..(row + 1) * ca].copy_from_slice(&g[row * c..row * c + ca]);
                }
                buf
            });
            let gb = parents[1].requires_grad().then(|| {
                let mut buf = vec![E::ZERO; ra * cb];
                for row in 0..ra {
                    buf[row * cb..(row + 1) * cb]
                        .copy_from_slice(&g[row * c + ca..(row + 1) * c]);
                }
                buf
            });
            vec![ga, gb]
        }),
    ))
}

pub fn narrow_cols<E: Elem>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let (r, c) = dims2(x, "narrow_cols")?;
    if start + len > c {
        return Err(Error::shape(format!(
            "narrow_cols: {start}+{len} out of {c} columns"
        )));
    }
    let xv = x.to_vec();
    let mut out = vec![E::ZERO; r * len];
    for row in 0..r {
        out[row * len..(row + 1) * len]
            .copy_from_slice(&xv[row * c + start..row * c + start + len]);
    }
    Ok(Tensor::from_op(
        out,
        vec![r, len],
        vec![x.clone()],
        Box::new(move |_parents, g| {
            let mut buf = vec![E::ZERO; r * c];
            for row in 0..r {
                buf[row * c + start..row * c + start + len]
                    .copy_from_slice(&g[row * len..(row + 1) * len]);
            }
            vec![Some(buf)]
        }),
    ))
}

/// Set blocked positions to the sentinel; gradients flow only through
/// unblocked positions.
pub fn masked_fill<E: Elem>(x: &Tensor<E>, blocked: Rc<Vec<bool>>) -> Result<Tensor<E>> {
    if blocked.len() != x.numel() {
        return Err(Error::shape(format!(
            "masked_fill: mask length {} vs {} elements",
            blocked.len(),
            x.numel()
        )));
    }
    let sentinel = E::from_f64(BLOCK_SENTINEL);
    let mut out = x.to_vec();
    for (v, &b) in out.iter_mut().zip(blocked.iter()) {
        if b {
            *v = sentinel;
        }
    }
    let blocked_c = Rc::clone(&blocked);
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |_parents, g| {
            vec![Some(
                g.iter()
                    .zip(blocked_c.iter())
                    .map(|(&gv, &b)| if b { E::ZERO } else { gv })
                    .collect(),
            )]
        }),
    ))
}

// ── loss kernels ────────────────────────────────────────────────────

/// Weighted-mean cross entropy over logit rows:
/// `sum_r w_r * (-log softmax(row_r)[t_r]) / sum_r w_r`.
pub fn cross_entropy_rows<E: Elem>(
    logits: &Tensor<E>,
    targets: &[usize],
    weights: &[E],
) -> Result<Tensor<E>> {
    let (r, c) = dims2(logits, "cross_entropy_rows")?;
    if targets.len() != r || weights.len() != r {
        return Err(Error::shape(format!(
            "cross_entropy_rows: {r} rows vs {} targets / {} weights",
            targets.len(),
            weights.len()
        )));
    }
    for (&t, _) in targets.iter().zip(weights) {
        if t >= c {
            return Err(Error::invalid(format!(
                "cross_entropy_rows: target {t} out of {c} classes"
            )));
        }
    }
    let xv = logits.to_vec();
    let mut wsum = E::ZERO;
    for &w in weights {
        wsum += w;
    }
    if wsum.to_f64() <= 0.0 {
        return Err(Error::invalid("cross_entropy_rows: non-positive weight sum"));
    }
    let mut loss = E::ZERO;
    let mut probs = vec![E::ZERO; r * c];
    for row in 0..r {
        let xr = &xv[row * c..(row + 1) * c];
        let mut mx = xr[0];
        for &v in xr {
            if v.is_nan() {
                return Err(Error::NonFinite(format!(
                    "cross_entropy_rows: NaN logit in row {row}"
                )));
            }
            mx = mx.max(v);
        }
        let mut z = E::ZERO;
        for i in 0..c {
            let e = (xr[i] - mx).exp();
            probs[row * c + i] = e;
            z += e;
        }
        let inv = E::ONE / z;
        for i in 0..c {
            probs[row * c + i] *= inv;
        }
        let log_z = z.ln() + mx;
        loss += weights[row] * (log_z - xr[targets[row]]);
    }
    loss = loss / wsum;

    let targets = Rc::new(targets.to_vec());
    let weights = Rc::new(weights.to_vec());
    let probs = Rc::new(probs);
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Box::new(move |_parents, g| {
            let scale = g[0] / wsum;
            let mut buf = vec![E::ZERO; r * c];
            for row in 0..r {
                let w = weights[row] * scale;
                for i in 0..c {
                    let indicator = if i == targets[row] { E::ONE } else { E::ZERO };
                    buf[row * c + i] = w * (probs[row * c + i] - indicator);
                }
            }
            vec![Some(buf)]
        }),
    ))
}

/// Mean binary cross entropy from logits against a constant target in
/// [0,1], computed in the standard numerically stable form.
pub fn bce_with_logits_mean<E: Elem>(logits: &Tensor<E>, targets: &[E]) -> Result<Tensor<E>> {
    if targets.len() != logits.numel() {
        return Err(Error::shape(format!(
            "bce_with_logits_mean: {} logits vs {} targets",
            logits.numel(),
            targets.len()
        )));
    }
    let xv = logits.to_vec();
    let n = xv.len();
    let inv_n = E::from_f64(1.0 / n as f64);
    let mut acc = E::ZERO;
    for (&x, &z) in xv.iter().zip(targets.iter()) {
        if x.is_nan() {
            return Err(Error::NonFinite("bce_with_logits_mean: NaN logit".into()));
        }
        // max(x,0) - x*z + ln(1 + exp(-|x|))
        acc += x.max(E::ZERO) - x * z + (E::ONE + (-x.abs()).exp()).ln();
    }
    let loss = acc * inv_n;
    let targets = Rc::new(targets.to_vec());
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Box::new(move |parents, g| {
            let xv = parents[0].to_vec();
            let scale = g[0] * inv_n;
            vec![Some(
                xv.iter()
                    .zip(targets.iter())
                    .map(|(&x, &z)| scale * (sigmoid_scalar(x) - z))
                    .collect(),
            )]
        }),
    ))
}

// ── attention ───────────────────────────────────────────────────────

/// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v` with an
/// optional boolean allow-mask (`true` = may attend). Blocked logits are
/// set to the large-negative sentinel so their weight is below 1e-6.
/// Rows with no allowed position are rejected; callers apply the
/// full-attention fallback first.
pub fn attention<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    allow: Option<&Rc<Vec<bool>>>,
) -> Result<Tensor<E>> {
    attention_with_weights(q, k, v, allow).map(|(out, _)| out)
}

/// Like [`attention`] but also returns the post-softmax weights `(Nq,Nk)`.
pub fn attention_with_weights<E: Elem>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    allow: Option<&Rc<Vec<bool>>>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (nq, d) = dims2(q, "attention")?;
    let (nk, dk) = dims2(k, "attention")?;
    let (nv, _dv) = dims2(v, "attention")?;
    if d != dk || nk != nv {
        return Err(Error::shape(format!(
            "attention: q {:?} k {:?} v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(mask) = allow {
        if mask.len() != nq * nk {
            return Err(Error::shape(format!(
                "attention: mask length {} vs {nq}x{nk}",
                mask.len()
            )));
        }
        for row in 0..nq {
            if !mask[row * nk..(row + 1) * nk].iter().any(|&b| b) {
                return Err(Error::invalid(format!(
                    "attention: query row {row} has no allowed positions (fallback not applied)"
                )));
            }
        }
    }
    let scale = E::from_f64(1.0 / (d as f64).sqrt());
    let mut scores = mul_scalar(&matmul_nt(q, k)?, scale);
    if let Some(mask) = allow {
        let blocked: Rc<Vec<bool>> = Rc::new(mask.iter().map(|&b| !b).collect());
        scores = masked_fill(&scores, blocked)?;
    }
    let weights = softmax_lastdim(&scores)?;
    let out = matmul(&weights, v)?;
    Ok((out, weights))
}

// ── raw kernels (graph-free) ────────────────────────────────────────

/// `out += a (m,k) @ b (k,n)`
pub fn matmul_raw<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a (m,k) @ b (n,k)^T`
pub fn matmul_nt_raw<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for (j, o) in or.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (x, y) in ar.iter().zip(br.iter()) {
                acc += *x * *y;
            }
            *o += acc;
        }
    }
}

/// `out (k,n) += a (m,k)^T @ b (m,n)`
pub fn matmul_tn_raw<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let or = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in or.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw<E: Elem>(
    x: &[E],
    w: &[E],
    cin: usize,
    h: usize,
    win: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [E],
) {
    for co in 0..cout {
        let op = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let ip = &x[ci * h * win..(ci + 1) * h * win];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &ip[iy as usize * win..(iy as usize + 1) * win];
                        let orow = &mut op[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            *o += wv * irow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_input_grad_raw<E: Elem>(
    g: &[E],
    w: &[E],
    cin: usize,
    h: usize,
    win: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [E],
) {
    for co in 0..cout {
        let gp = &g[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let dp = &mut dx[ci * h * win..(ci + 1) * h * win];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            dp[iy as usize * win + ix as usize] += wv * gp[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_weight_grad_raw<E: Elem>(
    g: &[E],
    x: &[E],
    cin: usize,
    h: usize,
    win: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dw: &mut [E],
) {
    for co in 0..cout {
        let gp = &g[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let ip = &x[ci * h * win..(ci + 1) * h * win];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = E::ZERO;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            acc += gp[oy * wo + ox] * ip[iy as usize * win + ix as usize];
                        }
                    }
                    dw[((co * cin + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

/// Source taps for one axis of a half-pixel-center bilinear resize:
/// `(lo, hi, frac)` per output index.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_apply<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    taps_y: &[(usize, usize, f64)],
    taps_x: &[(usize, usize, f64)],
    out: &mut [E],
) {
    for ch in 0..c {
        let ip = &x[ch * h * w..(ch + 1) * h * w];
        let op = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                let v00 = ip[y0 * w + x0].to_f64();
                let v01 = ip[y0 * w + x1].to_f64();
                let v10 = ip[y1 * w + x0].to_f64();
                let v11 = ip[y1 * w + x1].to_f64();
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                op[oy * out_w + ox] = E::from_f64(top * (1.0 - fy) + bot * fy);
            }
        }
    }
}

/// Graph-free bilinear resize of a single-channel plane.
pub fn bilinear_resize_plane<E: Elem>(
    x: &[E],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<E> {
    let taps_y = bilinear_taps(h, out_h);
    let taps_x = bilinear_taps(w, out_w);
    let mut out = vec![E::ZERO; out_h * out_w];
    bilinear_apply(x, 1, h, w, out_h, out_w, &taps_y, &taps_x, &mut out);
    out
}

/// Pooling windows `[start, end)` for one axis of adaptive average pooling.
fn pool_ranges(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|o| {
            let start = o * input / output;
            let end = ((o + 1) * input).div_ceil(output);
            (start, end.max(start + 1).min(input))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    fn randv(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rng_for(seed, "ops-test", 0);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn softmax_symmetry_and_known_values() {
        let x = Tensor::from_vec(vec![0.0f64, 0.0, 0.0], &[1, 3]).unwrap();
        let y = softmax_lastdim(&x).unwrap().to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = Tensor::from_vec(vec![0.0f64, (2.0f64).ln()], &[1, 2]).unwrap();
        let y = softmax_lastdim(&x).unwrap().to_vec();
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_naive_oracle() {
        for seed in 0..20 {
            let xv = randv(seed, 4);
            let x = Tensor::from_vec(xv.clone(), &[1, 4]).unwrap();
            let y = softmax_lastdim(&x).unwrap().to_vec();
            // naive exp/sum
            let z: f64 = xv.iter().map(|v| v.exp()).sum();
            for (a, v) in y.iter().zip(xv.iter()) {
                assert!((a - v.exp() / z).abs() < 1e-6);
            }
            let s: f64 = y.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::from_vec(vec![0.0f64, f64::NAN], &[1, 2]).unwrap();
        assert!(softmax_lastdim(&x).is_err());
    }

    #[test]
    fn softmax_row_sums_with_large_magnitude() {
        for seed in 0..50 {
            let mut rng = rng_for(seed, "softmax-mag", 1);
            let xv: Vec<f64> = (0..6).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let x = Tensor::from_vec(xv, &[2, 3]).unwrap();
            let y = softmax_lastdim(&x).unwrap().to_vec();
            for r in 0..2 {
                let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_identity_1x1() {
        let xv = randv(3, 2 * 4 * 4);
        let x = Tensor::from_vec(xv.clone(), &[2, 4, 4]).unwrap();
        // identity 1x1: w[co][ci] = delta(co,ci)
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
        for (a, b) in y.to_vec().iter().zip(xv.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_all_ones_3x3_on_constant() {
        let c = 0.37f64;
        let cin = 2;
        let x = Tensor::from_vec(vec![c; cin * 5 * 5], &[cin, 5, 5]).unwrap();
        let w = Tensor::from_vec(vec![1.0; cin * 9], &[1, cin, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        let yv = y.to_vec();
        // interior pixel: 9 * c * cin
        let interior = yv[2 * 5 + 2];
        assert!((interior - 9.0 * c * cin as f64).abs() < 1e-9);
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let xv = randv(11, 2 * 5 * 5);
        let wv = randv(12, 3 * 2 * 3 * 3);
        let x = Tensor::from_vec(xv.clone(), &[2, 5, 5]).unwrap();
        let w = Tensor::from_vec(wv.clone(), &[3, 2, 3, 3]).unwrap();
        let y = conv2d(&x, &w, None, 1, 1).unwrap().to_vec();
        // naive quadruple loop
        for co in 0..3 {
            for oy in 0..5i32 {
                for ox in 0..5i32 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let iy = oy + ky - 1;
                                let ix = ox + kx - 1;
                                if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                    continue;
                                }
                                acc += xv[ci * 25 + (iy * 5 + ix) as usize]
                                    * wv[((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize];
                            }
                        }
                    }
                    let got = y[co * 25 + (oy * 5 + ox) as usize];
                    assert!((got - acc).abs() < 1e-6, "mismatch at {co},{oy},{ox}");
                }
            }
        }
    }

    #[test]
    fn conv_rejects_shape_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let xv = randv(5, 3 * 4 * 4);
        let x = Tensor::from_vec(xv.clone(), &[3, 4, 4]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap().to_vec();
        for (a, b) in y.iter().zip(xv.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let one = Tensor::from_vec(vec![0.7f64], &[1, 1, 1]).unwrap();
        let up = bilinear_resize(&one, 3, 5).unwrap().to_vec();
        for v in up {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_2x2_to_3x3_center_is_corner_mean() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        let y = bilinear_resize(&x, 3, 3).unwrap().to_vec();
        assert!((y[4] - 2.5).abs() < 1e-12);
        // corners map to corners under half-pixel centers with 2->3
        assert!((y[0] - 1.0).abs() < 1e-12);
        assert!((y[8] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn resize_down_up_constant_exact() {
        let x = Tensor::from_vec(vec![0.25f64; 2 * 6 * 6], &[2, 6, 6]).unwrap();
        let up = bilinear_resize(&x, 12, 12).unwrap();
        let back = bilinear_resize(&up, 6, 6).unwrap().to_vec();
        for v in back {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn attention_degenerate_single_key() {
        let q = Tensor::from_vec(randv(7, 2 * 4), &[2, 4]).unwrap();
        let k = Tensor::from_vec(randv(8, 4), &[1, 4]).unwrap();
        let v = Tensor::from_vec(randv(9, 4), &[1, 4]).unwrap();
        let out = attention(&q, &k, &v, None).unwrap().to_vec();
        let vv = v.to_vec();
        for r in 0..2 {
            for c in 0..4 {
                assert!((out[r * 4 + c] - vv[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_one_hot_mask_selects_value_row() {
        let q = Tensor::from_vec(randv(20, 3 * 4), &[3, 4]).unwrap();
        let k = Tensor::from_vec(randv(21, 5 * 4), &[5, 4]).unwrap();
        let v = Tensor::from_vec(randv(22, 5 * 4), &[5, 4]).unwrap();
        // allow only column 2 for every query
        let mut allow = vec![false; 3 * 5];
        for r in 0..3 {
            allow[r * 5 + 2] = true;
        }
        let out = attention(&q, &k, &v, Some(&Rc::new(allow))).unwrap().to_vec();
        let vv = v.to_vec();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out[r * 4 + c] - vv[2 * 4 + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_matches_naive_oracle() {
        // random Nq=3, Nk=4, d=8 against an explicit softmax over the
        // unblocked set
        let mut rng = rng_for(30, "attn-oracle", 0);
        let qv: Vec<f64> = (0..3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vv: Vec<f64> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let allow: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
        // ensure every row keeps at least one allowed slot
        let q = Tensor::from_vec(qv.clone(), &[3, 8]).unwrap();
        let k = Tensor::from_vec(kv.clone(), &[4, 8]).unwrap();
        let v = Tensor::from_vec(vv.clone(), &[4, 8]).unwrap();
        let (out, w) =
            attention_with_weights(&q, &k, &v, Some(&Rc::new(allow.clone()))).unwrap();
        let out = out.to_vec();
        let wv = w.to_vec();
        for r in 0..3 {
            let mut logits = vec![];
            for c in 0..4 {
                if allow[r * 4 + c] {
                    let dot: f64 = (0..8).map(|i| qv[r * 8 + i] * kv[c * 8 + i]).sum();
                    logits.push((c, dot / (8f64).sqrt()));
                }
            }
            let mx = logits.iter().map(|x| x.1).fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|x| (x.1 - mx).exp()).sum();
            let mut expect = vec![0.0; 8];
            for (c, l) in &logits {
                let weight = (l - mx).exp() / z;
                assert!((wv[r * 4 + c] - weight).abs() < 1e-6);
                for i in 0..8 {
                    expect[i] += weight * vv[c * 8 + i];
                }
            }
            for i in 0..8 {
                assert!((out[r * 8 + i] - expect[i]).abs() < 1e-6);
            }
            // blocked positions get ~zero weight, rows sum to one
            let sum: f64 = (0..4).map(|c| wv[r * 4 + c]).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for c in 0..4 {
                if !allow[r * 4 + c] {
                    assert!(wv[r * 4 + c] <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn attention_rejects_all_blocked_row() {
        let q = Tensor::<f64>::zeros(&[2, 4]);
        let k = Tensor::<f64>::zeros(&[3, 4]);
        let v = Tensor::<f64>::zeros(&[3, 4]);
        let mut allow = vec![true; 6];
        allow[3] = false;
        allow[4] = false;
        allow[5] = false;
        assert!(attention(&q, &k, &v, Some(&Rc::new(allow))).is_err());
    }

    #[test]
    fn matmul_matches_oracle() {
        let av = randv(40, 3 * 4);
        let bv = randv(41, 4 * 2);
        let a = Tensor::from_vec(av.clone(), &[3, 4]).unwrap();
        let b = Tensor::from_vec(bv.clone(), &[4, 2]).unwrap();
        let c = matmul(&a, &b).unwrap().to_vec();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += av[i * 4 + p] * bv[p * 2 + j];
                }
                assert!((c[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_pool_of_constant_is_constant() {
        let x = Tensor::from_vec(vec![0.9f64; 2 * 3 * 3], &[2, 3, 3]).unwrap();
        for bins in [1usize, 2, 3, 6] {
            let y = adaptive_avg_pool(&x, bins, bins).unwrap().to_vec();
            for v in y {
                assert!((v - 0.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn select_concat_narrow_roundtrip() {
        let x = Tensor::from_vec(randv(50, 4 * 3), &[4, 3]).unwrap();
        let sel = select_rows(&x, &[2, 0]).unwrap();
        let xv = x.to_vec();
        let sv = sel.to_vec();
        assert_eq!(&sv[0..3], &xv[6..9]);
        assert_eq!(&sv[3..6], &xv[0..3]);

        let a = narrow_rows(&x, 0, 2).unwrap();
        let b = narrow_rows(&x, 2, 2).unwrap();
        let cat = concat_rows(&a, &b).unwrap();
        assert_eq!(cat.to_vec(), xv);

        let l = narrow_cols(&x, 0, 1).unwrap();
        let r = narrow_cols(&x, 1, 2).unwrap();
        let cat2 = concat_cols(&l, &r).unwrap();
        assert_eq!(cat2.to_vec(), xv);
    }
}
