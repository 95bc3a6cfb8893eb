//! Forward and adjoint kernels on raw NCHW buffers.
//!
//! Convolutions lower to im2col + GEMM one batch item at a time; the batch
//! loop is sequential so gradient reductions happen in a fixed order.

use super::{Real, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cout: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_shape(&self, input: Shape) -> Option<Shape> {
        let ph = input.h + 2 * self.pad;
        let pw = input.w + 2 * self.pad;
        if ph < self.kh || pw < self.kw || self.stride == 0 {
            return None;
        }
        Some(Shape::new(
            input.n,
            self.cout,
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one batch item into a `(cin*kh*kw) x (ho*wo)` matrix.
fn im2col<T: Real>(x: &[T], ins: Shape, g: &ConvGeometry, outs: Shape, col: &mut [T]) {
    let (ho, wo) = (outs.h, outs.w);
    let hw = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * ins.plane()..(ci + 1) * ins.plane()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= ins.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * ins.w..(iy as usize + 1) * ins.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= ins.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the input plane.
fn col2im<T: Real>(col: &[T], ins: Shape, g: &ConvGeometry, outs: Shape, dx: &mut [T]) {
    let (ho, wo) = (outs.h, outs.w);
    let hw = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * ins.plane()..(ci + 1) * ins.plane()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= ins.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * ins.w..(iy as usize + 1) * ins.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < ins.w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    x: &[T],
    ins: Shape,
    w: &[T],
    b: Option<&[T]>,
    g: &ConvGeometry,
) -> (Vec<T>, Shape) {
    let outs = g.output_shape(ins).expect("conv geometry validated by caller");
    let hw = outs.plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); outs.numel()];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * hw]
    };
    let in_item = ins.c * ins.plane();
    let out_item = outs.c * hw;
    for n in 0..ins.n {
        let xn = &x[n * in_item..(n + 1) * in_item];
        let yn = &mut out[n * out_item..(n + 1) * out_item];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, ins, g, outs, &mut col);
            &col
        };
        T::gemm(g.cout, k, hw, w, k as isize, 1, cols, hw as isize, 1, T::zero(), yn, hw as isize, 1);
        if let Some(b) = b {
            for (co, bias) in b.iter().enumerate() {
                for v in &mut yn[co * hw..(co + 1) * hw] {
                    *v = *v + *bias;
                }
            }
        }
    }
    (out, outs)
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    ins: Shape,
    w: &[T],
    g: &ConvGeometry,
    dy: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let outs = g.output_shape(ins).expect("conv geometry validated by caller");
    let hw = outs.plane();
    let k = g.patch_len();
    let (want_x, want_w, want_b) = want;
    let mut dx = want_x.then(|| vec![T::zero(); ins.numel()]);
    let mut dw = want_w.then(|| vec![T::zero(); g.cout * k]);
    let mut db = want_b.then(|| vec![T::zero(); g.cout]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * hw] };
    let mut dcol = if want_x && !g.is_pointwise() {
        vec![T::zero(); k * hw]
    } else {
        Vec::new()
    };
    let in_item = ins.c * ins.plane();
    let out_item = outs.c * hw;
    for n in 0..ins.n {
        let dyn_ = &dy[n * out_item..(n + 1) * out_item];
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dyn_[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_item..(n + 1) * in_item];
            let cols: &[T] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, ins, g, outs, &mut col);
                &col
            };
            // dW (cout x K) += dY (cout x HW) * col^T (HW x K)
            T::gemm(g.cout, hw, k, dyn_, hw as isize, 1, cols, 1, hw as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_item..(n + 1) * in_item];
            if g.is_pointwise() {
                // dX (cin x HW) = W^T (cin x cout) * dY (cout x HW)
                T::gemm(g.cin, g.cout, hw, w, 1, k as isize, dyn_, hw as isize, 1, T::zero(), dxn, hw as isize, 1);
            } else {
                T::gemm(k, g.cout, hw, w, 1, k as isize, dyn_, hw as isize, 1, T::zero(), &mut dcol, hw as isize, 1);
                col2im(&dcol, ins, g, outs, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

pub fn upsample2x<T: Real>(x: &[T], ins: Shape) -> (Vec<T>, Shape) {
    let outs = Shape::new(ins.n, ins.c, ins.h * 2, ins.w * 2);
    let mut out = vec![T::zero(); outs.numel()];
    for p in 0..ins.n * ins.c {
        let src = &x[p * ins.plane()..(p + 1) * ins.plane()];
        let dst = &mut out[p * outs.plane()..(p + 1) * outs.plane()];
        for y in 0..outs.h {
            let row = &src[(y / 2) * ins.w..(y / 2 + 1) * ins.w];
            for (xo, v) in dst[y * outs.w..(y + 1) * outs.w].iter_mut().enumerate() {
                *v = row[xo / 2];
            }
        }
    }
    (out, outs)
}

/// Adjoint of nearest 2x upsampling: 2x2 sum pooling.
pub fn upsample2x_adjoint<T: Real>(dy: &[T], ins: Shape) -> Vec<T> {
    let outs = Shape::new(ins.n, ins.c, ins.h * 2, ins.w * 2);
    let mut dx = vec![T::zero(); ins.numel()];
    for p in 0..ins.n * ins.c {
        let src = &dy[p * outs.plane()..(p + 1) * outs.plane()];
        let dst = &mut dx[p * ins.plane()..(p + 1) * ins.plane()];
        for y in 0..outs.h {
            for xo in 0..outs.w {
                let d = &mut dst[(y / 2) * ins.w + xo / 2];
                *d = *d + src[y * outs.w + xo];
            }
        }
    }
    dx
}

/// 2x2 mean pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2x2<T: Real>(x: &[T], ins: Shape) -> (Vec<T>, Shape) {
    let outs = Shape::new(ins.n, ins.c, ins.h / 2, ins.w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); outs.numel()];
    for p in 0..ins.n * ins.c {
        let src = &x[p * ins.plane()..(p + 1) * ins.plane()];
        let dst = &mut out[p * outs.plane()..(p + 1) * outs.plane()];
        for y in 0..outs.h {
            for xo in 0..outs.w {
                let i = 2 * y * ins.w + 2 * xo;
                dst[y * outs.w + xo] = (src[i] + src[i + 1] + src[i + ins.w] + src[i + ins.w + 1]) * quarter;
            }
        }
    }
    (out, outs)
}

pub fn avg_pool2x2_adjoint<T: Real>(dy: &[T], ins: Shape) -> Vec<T> {
    let outs = Shape::new(ins.n, ins.c, ins.h / 2, ins.w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); ins.numel()];
    for p in 0..ins.n * ins.c {
        let src = &dy[p * outs.plane()..(p + 1) * outs.plane()];
        let dst = &mut dx[p * ins.plane()..(p + 1) * ins.plane()];
        for y in 0..outs.h {
            for xo in 0..outs.w {
                let g = src[y * outs.w + xo] * quarter;
                let i = 2 * y * ins.w + 2 * xo;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + ins.w] = g;
                dst[i + ins.w + 1] = g;
            }
        }
    }
    dx
}

/// Separable depthwise filtering with a 1-D kernel, "valid" borders.
pub fn blur_valid<T: Real>(x: &[T], ins: Shape, k: &[T]) -> (Vec<T>, Shape) {
    let r = k.len();
    let outs = Shape::new(ins.n, ins.c, ins.h + 1 - r, ins.w + 1 - r);
    let mut tmp = vec![T::zero(); ins.h * outs.w];
    let mut out = vec![T::zero(); outs.numel()];
    for p in 0..ins.n * ins.c {
        let src = &x[p * ins.plane()..(p + 1) * ins.plane()];
        for y in 0..ins.h {
            let row = &src[y * ins.w..(y + 1) * ins.w];
            for xo in 0..outs.w {
                let mut acc = T::zero();
                for (t, kv) in k.iter().enumerate() {
                    acc = acc + row[xo + t] * *kv;
                }
                tmp[y * outs.w + xo] = acc;
            }
        }
        let dst = &mut out[p * outs.plane()..(p + 1) * outs.plane()];
        for y in 0..outs.h {
            for xo in 0..outs.w {
                let mut acc = T::zero();
                for (t, kv) in k.iter().enumerate() {
                    acc = acc + tmp[(y + t) * outs.w + xo] * *kv;
                }
                dst[y * outs.w + xo] = acc;
            }
        }
    }
    (out, outs)
}

pub fn blur_valid_adjoint<T: Real>(dy: &[T], ins: Shape, k: &[T]) -> Vec<T> {
    let r = k.len();
    let outs = Shape::new(ins.n, ins.c, ins.h + 1 - r, ins.w + 1 - r);
    let mut tmp = vec![T::zero(); ins.h * outs.w];
    let mut dx = vec![T::zero(); ins.numel()];
    for p in 0..ins.n * ins.c {
        let src = &dy[p * outs.plane()..(p + 1) * outs.plane()];
        tmp.fill(T::zero());
        for y in 0..outs.h {
            for xo in 0..outs.w {
                let g = src[y * outs.w + xo];
                for (t, kv) in k.iter().enumerate() {
                    let d = &mut tmp[(y + t) * outs.w + xo];
                    *d = *d + g * *kv;
                }
            }
        }
        let dst = &mut dx[p * ins.plane()..(p + 1) * ins.plane()];
        for y in 0..ins.h {
            for xo in 0..outs.w {
                let g = tmp[y * outs.w + xo];
                for (t, kv) in k.iter().enumerate() {
                    let d = &mut dst[y * ins.w + xo + t];
                    *d = *d + g * *kv;
                }
            }
        }
    }
    dx
}

/// Output shape of a broadcasting elementwise op, if compatible.
pub fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for (i, (x, y)) in a.dims().into_iter().zip(b.dims()).enumerate() {
        out[i] = if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return None;
        };
    }
    Some(Shape::from_dims(out))
}

/// Element strides of `s` for iterating `out`, zero on broadcast axes.
pub fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let d = s.dims();
    let o = out.dims();
    let natural = [s.c * s.h * s.w, s.h * s.w, s.w, 1];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if d[i] == o[i] { natural[i] } else { 0 };
    }
    st
}

/// Visit every output index with the matching offsets into `a` and `b`.
pub fn for_each_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut o = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let base_a = n * sa[0] + c * sa[1] + h * sa[2];
                let base_b = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out.w {
                    f(o, base_a + w * sa[3], base_b + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Sum a gradient of shape `out` down to the (broadcast) shape `s`.
pub fn reduce_to<T: Real>(g: &[T], out: Shape, s: Shape) -> Vec<T> {
    if out == s {
        return g.to_vec();
    }
    let st = broadcast_strides(s, out);
    let mut r = vec![T::zero(); s.numel()];
    let mut o = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..out.w {
                    let d = &mut r[base + w * st[3]];
                    *d = *d + g[o];
                    o += 1;
                }
            }
        }
    }
    r
}
