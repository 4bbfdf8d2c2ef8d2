//! 2-D convolution over `[B, C, H, W]` maps (H = time, W = frequency).
//!
//! Cross-correlation convention: the kernel is not flipped. Grouped
//! convolutions run as one GEMM per group over an im2col buffer; the
//! one-channel-per-group (depthwise) case uses direct loops.

use crate::error::{shape_err, spec_err, Result};
use crate::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }

    pub fn stride(mut self, s: (usize, usize)) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: (usize, usize)) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: (usize, usize)) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.dilation.0,
            self.dilation.1,
            self.groups,
        ];
        if extents.contains(&0) {
            return Err(spec_err("conv2d", format!("zero extent in {self:?}")));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(spec_err(
                "conv2d",
                format!(
                    "channels {}->{} not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// `floor((in + 2p - d(k-1) - 1) / s) + 1` per axis.
    pub fn output_extent(&self, input: (usize, usize)) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            let span = d * (k - 1) + 1;
            (n + 2 * p >= span).then(|| (n + 2 * p - span) / s + 1)
        };
        let (k, s, p, d) = (self.kernel, self.stride, self.padding, self.dilation);
        match (axis(input.0, k.0, s.0, p.0, d.0), axis(input.1, k.1, s.1, p.1, d.1)) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(spec_err(
                "conv2d",
                format!("input {input:?} yields zero output extent under {self:?}"),
            )),
        }
    }

    pub fn param_count(&self, bias: bool) -> usize {
        self.weight_shape().iter().product::<usize>() + if bias { self.out_channels } else { 0 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    groups: usize,
    cin_g: usize,
    cout_g: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap offset `off`.
    fn valid(out: usize, stride: usize, off: isize, n: usize) -> (usize, usize) {
        // need 0 <= o*stride + off < n
        let s = stride as isize;
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if (n as isize) <= off {
            0
        } else {
            ((n as isize - off) + s - 1) / s
        };
        let lo = (lo.max(0) as usize).min(out);
        let hi = (hi.max(0) as usize).min(out);
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin_g {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            let off_h = (ki * g.dh) as isize - g.ph as isize;
            let (oh_lo, oh_hi) = Geometry::valid(g.ho, g.sh, off_h, g.h);
            for kj in 0..g.kw {
                let off_w = (kj * g.dw) as isize - g.pw as isize;
                let (ow_lo, ow_hi) = Geometry::valid(g.wo, g.sw, off_w, g.w);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                dst[..oh_lo * g.wo].fill(T::zero());
                dst[oh_hi * g.wo..].fill(T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = (oh * g.sh) as isize + off_h;
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let d = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    d[..ow_lo].fill(T::zero());
                    d[ow_hi..].fill(T::zero());
                    if ow_hi > ow_lo {
                        let iw0 = ((ow_lo * g.sw) as isize + off_w) as usize;
                        if g.sw == 1 {
                            d[ow_lo..ow_hi].copy_from_slice(&src[iw0..iw0 + ow_hi - ow_lo]);
                        } else {
                            for (i, o) in (ow_lo..ow_hi).enumerate() {
                                d[o] = src[iw0 + i * g.sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin_g {
        let plane = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            let off_h = (ki * g.dh) as isize - g.ph as isize;
            let (oh_lo, oh_hi) = Geometry::valid(g.ho, g.sh, off_h, g.h);
            for kj in 0..g.kw {
                let off_w = (kj * g.dw) as isize - g.pw as isize;
                let (ow_lo, ow_hi) = Geometry::valid(g.wo, g.sw, off_w, g.w);
                if ow_hi <= ow_lo {
                    continue;
                }
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oh in oh_lo..oh_hi {
                    let ih = ((oh * g.sh) as isize + off_h) as usize;
                    let drow = &mut plane[ih * g.w..(ih + 1) * g.w];
                    let s = &src[oh * g.wo..(oh + 1) * g.wo];
                    let iw0 = ((ow_lo * g.sw) as isize + off_w) as usize;
                    if g.sw == 1 {
                        for (d, &v) in drow[iw0..iw0 + ow_hi - ow_lo].iter_mut().zip(&s[ow_lo..ow_hi]) {
                            *d += v;
                        }
                    } else {
                        for (i, o) in (ow_lo..ow_hi).enumerate() {
                            drow[iw0 + i * g.sw] += s[o];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &Geometry, out: &mut [T]) {
    let taps = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.groups {
            let plane = &x[(b * g.groups + c) * g.in_plane()..][..g.in_plane()];
            let o = &mut out[(b * g.groups + c) * g.p()..][..g.p()];
            let wk = &w[c * taps..(c + 1) * taps];
            for ki in 0..g.kh {
                let off_h = (ki * g.dh) as isize - g.ph as isize;
                let (oh_lo, oh_hi) = Geometry::valid(g.ho, g.sh, off_h, g.h);
                for kj in 0..g.kw {
                    let off_w = (kj * g.dw) as isize - g.pw as isize;
                    let (ow_lo, ow_hi) = Geometry::valid(g.wo, g.sw, off_w, g.w);
                    let wv = wk[ki * g.kw + kj];
                    for oh in oh_lo..oh_hi {
                        let ih = ((oh * g.sh) as isize + off_h) as usize;
                        let src = &plane[ih * g.w..(ih + 1) * g.w];
                        let dst = &mut o[oh * g.wo..(oh + 1) * g.wo];
                        let iw0 = ((ow_lo * g.sw) as isize + off_w) as usize;
                        let n = ow_hi - ow_lo;
                        if g.sw == 1 {
                            for (d, &s) in dst[ow_lo..ow_hi].iter_mut().zip(&src[iw0..iw0 + n]) {
                                *d += wv * s;
                            }
                        } else {
                            for (i, ow) in (ow_lo..ow_hi).enumerate() {
                                dst[ow] += wv * src[iw0 + i * g.sw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &Geometry,
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let taps = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.groups {
            let base_in = (b * g.groups + c) * g.in_plane();
            let plane = &x[base_in..base_in + g.in_plane()];
            let go = &dy[(b * g.groups + c) * g.p()..][..g.p()];
            for ki in 0..g.kh {
                let off_h = (ki * g.dh) as isize - g.ph as isize;
                let (oh_lo, oh_hi) = Geometry::valid(g.ho, g.sh, off_h, g.h);
                for kj in 0..g.kw {
                    let off_w = (kj * g.dw) as isize - g.pw as isize;
                    let (ow_lo, ow_hi) = Geometry::valid(g.wo, g.sw, off_w, g.w);
                    let tap = c * taps + ki * g.kw + kj;
                    let wv = w[tap];
                    let mut acc = T::zero();
                    for oh in oh_lo..oh_hi {
                        let ih = ((oh * g.sh) as isize + off_h) as usize;
                        let grow = &go[oh * g.wo..(oh + 1) * g.wo];
                        let iw0 = ((ow_lo * g.sw) as isize + off_w) as usize;
                        let n = ow_hi - ow_lo;
                        if dw.is_some() {
                            let src = &plane[ih * g.w..(ih + 1) * g.w];
                            if g.sw == 1 {
                                acc += crate::reduce::dot(&grow[ow_lo..ow_hi], &src[iw0..iw0 + n]);
                            } else {
                                for (i, ow) in (ow_lo..ow_hi).enumerate() {
                                    acc += grow[ow] * src[iw0 + i * g.sw];
                                }
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[base_in + ih * g.w..base_in + (ih + 1) * g.w];
                            if g.sw == 1 {
                                for (d, &gv) in drow[iw0..iw0 + n].iter_mut().zip(&grow[ow_lo..ow_hi]) {
                                    *d += wv * gv;
                                }
                            } else {
                                for (i, ow) in (ow_lo..ow_hi).enumerate() {
                                    drow[iw0 + i * g.sw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[tap] += acc;
                    }
                }
            }
        }
    }
}

fn geometry(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    if x_shape.len() != 4 {
        return Err(shape_err("conv2d", format!("input must be [B,C,H,W], got {x_shape:?}")));
    }
    if x_shape[1] != spec.in_channels {
        return Err(shape_err(
            "conv2d",
            format!("input has {} channels, spec expects {}", x_shape[1], spec.in_channels),
        ));
    }
    if w_shape != spec.weight_shape() {
        return Err(shape_err(
            "conv2d",
            format!("weight {w_shape:?} does not match spec {:?}", spec.weight_shape()),
        ));
    }
    let (ho, wo) = spec.output_extent((x_shape[2], x_shape[3]))?;
    Ok(Geometry {
        batch: x_shape[0],
        groups: spec.groups,
        cin_g: spec.in_channels / spec.groups,
        cout_g: spec.out_channels / spec.groups,
        h: x_shape[2],
        w: x_shape[3],
        ho,
        wo,
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
        dh: spec.dilation.0,
        dw: spec.dilation.1,
    })
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Geometry) -> Vec<T> {
    let cout = g.cout_g * g.groups;
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.batch * cout * p];
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut out);
    } else {
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); k * p]
        };
        for b in 0..g.batch {
            for gi in 0..g.groups {
                let xg = &x[(b * g.groups + gi) * g.cin_g * g.in_plane()..][..g.cin_g * g.in_plane()];
                let src: &[T] = if g.is_pointwise() {
                    xg
                } else {
                    im2col(xg, g, &mut col);
                    &col
                };
                let wg = &w[gi * g.cout_g * k..(gi + 1) * g.cout_g * k];
                let og = &mut out[(b * cout + gi * g.cout_g) * p..][..g.cout_g * p];
                T::gemm(g.cout_g, k, p, T::one(), wg, k, 1, src, p, 1, T::zero(), og, p, 1);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut out[(b * cout + co) * p..(b * cout + co + 1) * p] {
                    *v += bv;
                }
            }
        }
    }
    out
}

struct ConvGrads<T> {
    dx: Option<Vec<T>>,
    dw: Option<Vec<T>>,
    db: Option<Vec<T>>,
}

fn conv_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], g: &Geometry, need: (bool, bool, bool)) -> ConvGrads<T> {
    let cout = g.cout_g * g.groups;
    let (k, p) = (g.k(), g.p());
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); cout];
        for b in 0..g.batch {
            for (co, d) in db.iter_mut().enumerate() {
                *d += crate::reduce::sum(&dy[(b * cout + co) * p..(b * cout + co + 1) * p]);
            }
        }
        db
    });
    if !(need.0 || need.1) {
        return ConvGrads { dx, dw, db };
    }
    if g.is_depthwise() {
        depthwise_backward(x, w, g, dy, dx.as_deref_mut(), dw.as_deref_mut());
        return ConvGrads { dx, dw, db };
    }
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = if pointwise || !need.0 {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for b in 0..g.batch {
        for gi in 0..g.groups {
            let xoff = (b * g.groups + gi) * g.cin_g * g.in_plane();
            let xg = &x[xoff..xoff + g.cin_g * g.in_plane()];
            let wg = &w[gi * g.cout_g * k..(gi + 1) * g.cout_g * k];
            let dyg = &dy[(b * cout + gi * g.cout_g) * p..][..g.cout_g * p];
            if let Some(dw) = dw.as_deref_mut() {
                let src: &[T] = if pointwise {
                    xg
                } else {
                    im2col(xg, g, &mut col);
                    &col
                };
                // dW_g (cout_g x K) += dY_g (cout_g x P) . col^T (P x K)
                T::gemm(
                    g.cout_g,
                    p,
                    k,
                    T::one(),
                    dyg,
                    p,
                    1,
                    src,
                    1,
                    p,
                    T::one(),
                    &mut dw[gi * g.cout_g * k..(gi + 1) * g.cout_g * k],
                    k,
                    1,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dcol (K x P) = W_g^T (K x cout_g) . dY_g (cout_g x P)
                if pointwise {
                    T::gemm(
                        k,
                        g.cout_g,
                        p,
                        T::one(),
                        wg,
                        1,
                        k,
                        dyg,
                        p,
                        1,
                        T::one(),
                        &mut dx[xoff..xoff + g.cin_g * g.in_plane()],
                        p,
                        1,
                    );
                } else {
                    T::gemm(
                        k,
                        g.cout_g,
                        p,
                        T::one(),
                        wg,
                        1,
                        k,
                        dyg,
                        p,
                        1,
                        T::zero(),
                        &mut dcol,
                        p,
                        1,
                    );
                    col2im(&dcol, g, &mut dx[xoff..xoff + g.cin_g * g.in_plane()]);
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

impl<T: Scalar> Graph<T> {
    /// Grouped, strided, dilated, zero-padded 2-D cross-correlation.
    ///
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin/groups, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let g = geometry(xv.shape(), wv.shape(), spec)?;
        let bv = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [spec.out_channels] {
                    return Err(shape_err(
                        "conv2d",
                        format!("bias {:?} vs out_channels {}", bv.shape(), spec.out_channels),
                    ));
                }
                Some(bv)
            }
            None => None,
        };
        let out = conv_forward(xv.data(), wv.data(), bv.as_ref().map(|t| t.data()), &g);
        let out = Tensor::new(&[g.batch, spec.out_channels, g.ho, g.wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        Ok(self.push_op(out, &parents, move |dy, needs| {
            let need_b = needs.get(2).copied().unwrap_or(false);
            let grads = conv_backward(xv.data(), wv.data(), dy.data(), &g, (needs[0], needs[1], need_b));
            let mut res = vec![
                grads.dx.map(|d| Tensor::new(&xs, d)).transpose()?,
                grads.dw.map(|d| Tensor::new(&ws, d)).transpose()?,
            ];
            if needs.len() > 2 {
                res.push(grads.db.map(|d| Tensor::new(&[d.len()], d)).transpose()?);
            }
            Ok(res)
        }))
    }
}
