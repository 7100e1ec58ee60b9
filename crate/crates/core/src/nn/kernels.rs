//! Forward and backward kernels behind the graph ops.

use super::array::{Array4, Real};
use crate::error::{Error, Result};

fn mismatch(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

/// Unfolds one `(c, h, w)` image into a `(c·9, h·w)` patch matrix.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let src = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let s = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&s[..w - 1]);
                        }
                        1 => dst.copy_from_slice(s),
                        _ => {
                            dst[..w - 1].copy_from_slice(&s[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let dst = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                d[x - 1] = d[x - 1] + src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                d[x] = d[x] + src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                d[x + 1] = d[x + 1] + src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv2d<T: Real>(x: &Array4<T>, w: &Array4<T>, b: &Array4<T>) -> Result<()> {
    let [_, cin, h, wd] = x.shape();
    let [cout, wcin, kh, kw] = w.shape();
    if kh != 3 || kw != 3 || wcin != cin || b.len() != cout || h == 0 || wd == 0 {
        return Err(mismatch(format!("conv2d x {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn conv2d_forward<T: Real>(x: &Array4<T>, w: &Array4<T>, b: &Array4<T>) -> Result<Array4<T>> {
    check_conv2d(x, w, b)?;
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let (hw, k) = (h * wd, cin * 9);
    let mut col = vec![T::zero(); k * hw];
    let mut out = Array4::zeros([n, cout, h, wd]);
    for i in 0..n {
        im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut col);
        let o = &mut out.data_mut()[i * cout * hw..(i + 1) * cout * hw];
        for co in 0..cout {
            o[co * hw..(co + 1) * hw].fill(b.data()[co]);
        }
        T::gemm(cout, k, hw, T::one(), w.data(), k as isize, 1, &col, hw as isize, 1, T::one(), o, hw as isize, 1);
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`; `dx` only when `need_dx`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Array4<T>,
    w: &Array4<T>,
    g: &Array4<T>,
    need_dx: bool,
) -> (Option<Array4<T>>, Array4<T>, Array4<T>) {
    let [n, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let (hw, k) = (h * wd, cin * 9);
    let mut col = vec![T::zero(); k * hw];
    let mut dcol = vec![T::zero(); k * hw];
    let mut dw = Array4::zeros(w.shape());
    let mut db = Array4::zeros([1, 1, 1, cout]);
    let mut dx = need_dx.then(|| Array4::zeros(x.shape()));
    for i in 0..n {
        let gi = &g.data()[i * cout * hw..(i + 1) * cout * hw];
        for co in 0..cout {
            let s = gi[co * hw..(co + 1) * hw].iter().fold(T::zero(), |a, &v| a + v);
            db.data_mut()[co] = db.data()[co] + s;
        }
        im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, &mut col);
        // dW (cout×k) += g_i (cout×hw) · colᵀ (hw×k)
        T::gemm(
            cout,
            hw,
            k,
            T::one(),
            gi,
            hw as isize,
            1,
            &col,
            1,
            hw as isize,
            T::one(),
            dw.data_mut(),
            k as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcol (k×hw) = Wᵀ (k×cout) · g_i (cout×hw)
            T::gemm(
                k,
                cout,
                hw,
                T::one(),
                w.data(),
                1,
                k as isize,
                gi,
                hw as isize,
                1,
                T::zero(),
                &mut dcol,
                hw as isize,
                1,
            );
            col2im(&dcol, cin, h, wd, &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw]);
        }
    }
    (dx, dw, db)
}

pub(crate) fn maxpool2_forward<T: Real>(x: &Array4<T>) -> Result<(Array4<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddSpatialDims { h, w, factor: 2 });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                od[o] = xd[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn upsample2_forward<T: Real>(x: &Array4<T>) -> Array4<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Array4::zeros([n, c, 2 * h, 2 * w]);
    let (xd, od) = (x.data(), out.data_mut());
    for plane in 0..n * c {
        for y in 0..2 * h {
            let src = &xd[(plane * h + y / 2) * w..][..w];
            let dst = &mut od[(plane * 2 * h + y) * 2 * w..][..2 * w];
            for (xx, v) in src.iter().enumerate() {
                dst[2 * xx] = *v;
                dst[2 * xx + 1] = *v;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(g: &Array4<T>, shape: [usize; 4]) -> Array4<T> {
    let [n, c, h, w] = shape;
    let mut dx = Array4::zeros(shape);
    let (gd, dd) = (g.data(), dx.data_mut());
    for plane in 0..n * c {
        for y in 0..2 * h {
            let src = &gd[(plane * 2 * h + y) * 2 * w..][..2 * w];
            let dst = &mut dd[(plane * h + y / 2) * w..][..w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = *d + src[2 * xx] + src[2 * xx + 1];
            }
        }
    }
    dx
}

fn outer_inner(shape: [usize; 4], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub(crate) fn concat_forward<T: Real>(xs: &[&Array4<T>], axis: usize) -> Result<Array4<T>> {
    let first = xs.first().ok_or_else(|| mismatch("concat of nothing".into()))?.shape();
    if axis > 3 {
        return Err(mismatch(format!("concat axis {axis}")));
    }
    let mut shape = first;
    shape[axis] = 0;
    for x in xs {
        let s = x.shape();
        if (0..4).any(|d| d != axis && s[d] != first[d]) {
            return Err(mismatch(format!("concat {first:?} with {s:?} on axis {axis}")));
        }
        shape[axis] += s[axis];
    }
    let (outer, _) = outer_inner(shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for x in xs {
            let chunk = x.len() / outer;
            data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Array4::from_vec(shape, data)
}

pub(crate) fn concat_backward<T: Real>(g: &Array4<T>, shapes: &[[usize; 4]], axis: usize) -> Vec<Array4<T>> {
    let (outer, _) = outer_inner(g.shape(), axis);
    let mut outs: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(s.iter().product())).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (s, out) in shapes.iter().zip(outs.iter_mut()) {
            let chunk = s.iter().product::<usize>() / outer;
            out.extend_from_slice(&g.data()[pos..pos + chunk]);
            pos += chunk;
        }
    }
    outs.into_iter().zip(shapes).map(|(d, s)| Array4::from_vec(*s, d).expect("sizes add up")).collect()
}

/// Row range of band `k` out of `bands` over `h` rows.
pub fn band_rows(h: usize, bands: usize, k: usize) -> std::ops::Range<usize> {
    (k * h / bands)..((k + 1) * h / bands)
}

pub(crate) fn band_gap_forward<T: Real>(x: &Array4<T>, bands: usize) -> Result<Array4<T>> {
    let [n, c, h, w] = x.shape();
    if c != 1 {
        return Err(mismatch(format!("band_gap expects one channel, got {c}")));
    }
    if bands == 0 || h < bands {
        return Err(Error::ImageTooSmall { h, bands });
    }
    let mut out = Array4::zeros([n, 1, 1, bands]);
    for i in 0..n {
        for k in 0..bands {
            let rows = band_rows(h, bands, k);
            let count = (rows.len() * w) as f64;
            let s = x.data()[(i * h + rows.start) * w..(i * h + rows.end) * w].iter().fold(T::zero(), |a, &v| a + v);
            out.data_mut()[i * bands + k] = s / T::from_f64(count);
        }
    }
    Ok(out)
}

pub(crate) fn band_gap_backward<T: Real>(g: &Array4<T>, shape: [usize; 4], bands: usize) -> Array4<T> {
    let [n, _, h, w] = shape;
    let mut dx = Array4::zeros(shape);
    for i in 0..n {
        for k in 0..bands {
            let rows = band_rows(h, bands, k);
            let v = g.data()[i * bands + k] / T::from_f64((rows.len() * w) as f64);
            dx.data_mut()[(i * h + rows.start) * w..(i * h + rows.end) * w].fill(v);
        }
    }
    dx
}

pub(crate) fn dense_forward<T: Real>(x: &Array4<T>, w: &Array4<T>, b: &Array4<T>) -> Result<Array4<T>> {
    let n = x.shape()[0];
    let [_, _, out, inp] = w.shape();
    if n == 0 || x.len() != n * inp || b.len() != out || w.len() != out * inp {
        return Err(mismatch(format!("dense x {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape())));
    }
    let mut y = Array4::zeros([n, 1, 1, out]);
    for i in 0..n {
        y.data_mut()[i * out..(i + 1) * out].copy_from_slice(b.data());
    }
    T::gemm(
        n,
        inp,
        out,
        T::one(),
        x.data(),
        inp as isize,
        1,
        w.data(),
        1,
        inp as isize,
        T::one(),
        y.data_mut(),
        out as isize,
        1,
    );
    Ok(y)
}

pub(crate) fn dense_backward<T: Real>(
    x: &Array4<T>,
    w: &Array4<T>,
    g: &Array4<T>,
) -> (Array4<T>, Array4<T>, Array4<T>) {
    let n = x.shape()[0];
    let [_, _, out, inp] = w.shape();
    let mut dx = Array4::zeros(x.shape());
    let mut dw = Array4::zeros(w.shape());
    let mut db = Array4::zeros([1, 1, 1, out]);
    T::gemm(
        n,
        out,
        inp,
        T::one(),
        g.data(),
        out as isize,
        1,
        w.data(),
        inp as isize,
        1,
        T::zero(),
        dx.data_mut(),
        inp as isize,
        1,
    );
    T::gemm(
        out,
        n,
        inp,
        T::one(),
        g.data(),
        1,
        out as isize,
        x.data(),
        inp as isize,
        1,
        T::zero(),
        dw.data_mut(),
        inp as isize,
        1,
    );
    for i in 0..n {
        for o in 0..out {
            db.data_mut()[o] = db.data()[o] + g.data()[i * out + o];
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv1d_forward<T: Real>(x: &Array4<T>, w: &Array4<T>, b: &Array4<T>) -> Result<Array4<T>> {
    let [n, cin, one, len] = x.shape();
    let [cout, wcin, wone, k] = w.shape();
    if one != 1 || wone != 1 || k != 3 || wcin != cin || b.len() != cout {
        return Err(mismatch(format!("conv1d x {:?} w {:?} b {:?}", x.shape(), w.shape(), b.shape())));
    }
    let mut y = Array4::zeros([n, cout, 1, len]);
    let (xd, wd) = (x.data(), w.data());
    for i in 0..n {
        for co in 0..cout {
            for p in 0..len {
                let mut s = b.data()[co];
                for ci in 0..cin {
                    for t in 0..3 {
                        let q = p as isize + t as isize - 1;
                        if q >= 0 && (q as usize) < len {
                            s = s + wd[(co * cin + ci) * 3 + t] * xd[(i * cin + ci) * len + q as usize];
                        }
                    }
                }
                y.data_mut()[(i * cout + co) * len + p] = s;
            }
        }
    }
    Ok(y)
}

pub(crate) fn conv1d_backward<T: Real>(
    x: &Array4<T>,
    w: &Array4<T>,
    g: &Array4<T>,
) -> (Array4<T>, Array4<T>, Array4<T>) {
    let [n, cin, _, len] = x.shape();
    let cout = w.shape()[0];
    let mut dx = Array4::zeros(x.shape());
    let mut dw = Array4::zeros(w.shape());
    let mut db = Array4::zeros([1, 1, 1, cout]);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for i in 0..n {
        for co in 0..cout {
            for p in 0..len {
                let gv = gd[(i * cout + co) * len + p];
                db.data_mut()[co] = db.data()[co] + gv;
                for ci in 0..cin {
                    for t in 0..3 {
                        let q = p as isize + t as isize - 1;
                        if q >= 0 && (q as usize) < len {
                            let xi = (i * cin + ci) * len + q as usize;
                            let wi = (co * cin + ci) * 3 + t;
                            dw.data_mut()[wi] = dw.data()[wi] + gv * xd[xi];
                            dx.data_mut()[xi] = dx.data()[xi] + gv * wd[wi];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
