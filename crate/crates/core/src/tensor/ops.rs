use super::tape::{Grads, Tape, Var};
use super::{fl, Elem};
use crate::augment::affine::AffineTransform;
use crate::augment::warp::{plan, validity_from_plan, warp_backward_channels, warp_channels};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};

fn view2<F: Elem>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor expected")
}

fn dims4<F: Elem>(a: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    debug_assert_eq!(s.len(), 4, "rank-4 tensor expected");
    (s[0], s[1], s[2], s[3])
}

impl<F: Elem> Tape<F> {
    /// Leaf wrapper that guarantees standard layout (kernels index raw slices).
    pub fn input(&mut self, value: ArrayD<F>) -> Var {
        if value.is_standard_layout() {
            self.leaf(value)
        } else {
            self.leaf(value.as_standard_layout().into_owned())
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                grads.accum(a, go.clone());
                grads.accum(b, go.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                grads.accum(a, go.clone());
                grads.accum(b, go.mapv(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                grads.accum(a, go * &vals[b.0]);
                grads.accum(b, go * &vals[a.0]);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.values[a.0].mapv(|x| x * c);
        self.push(
            v,
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                grads.accum(a, go.mapv(|x| x * c));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let id = self.next_id();
        let v = self.values[a.0].mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(
            v,
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let own = &vals[id];
                let mut g = go.clone();
                g.zip_mut_with(own, |gv, &ov| {
                    if ov <= F::zero() {
                        *gv = F::zero();
                    }
                });
                grads.accum(a, g);
            })),
        )
    }

    /// `x [n, d_in] -> x w^T + b`, `w [d_out, d_in]`, `b [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = view2(&self.values[x.0]);
        let wv = view2(&self.values[w.0]);
        let bv = &self.values[b.0];
        debug_assert_eq!(xv.ncols(), wv.ncols());
        debug_assert_eq!(bv.len(), wv.nrows());
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (xv.dot(&wv.t()) + &b1).into_dyn();
        self.push(
            v,
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let go2 = view2(go);
                let xv = view2(&vals[x.0]);
                let wv = view2(&vals[w.0]);
                grads.accum(x, go2.dot(&wv).into_dyn());
                grads.accum(w, go2.t().dot(&xv).into_dyn());
                grads.accum(b, go2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// `a [m, k] . b^T [k, n] -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = view2(&self.values[a.0]);
        let bv = view2(&self.values[b.0]);
        debug_assert_eq!(av.ncols(), bv.ncols());
        let v = av.dot(&bv.t()).into_dyn();
        self.push(
            v,
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let go2 = view2(go);
                grads.accum(a, go2.dot(&view2(&vals[b.0])).into_dyn());
                grads.accum(b, go2.t().dot(&view2(&vals[a.0])).into_dyn());
            })),
        )
    }

    /// 2-d convolution, `x [B, C, H, W]`, `w [OC, C, KH, KW]`, `b [OC]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (bs, c, h, wd) = dims4(&self.values[x.0]);
        let ws = self.values[w.0].shape().to_vec();
        let (oc, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        debug_assert_eq!(c, kc);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let col = im2col(&self.values[x.0], kh, kw, stride, pad, oh, ow);
        let w2 = self.values[w.0]
            .view()
            .into_shape_with_order((oc, c * kh * kw))
            .unwrap();
        let out_m = w2.dot(&col); // [OC, B*OH*OW]
        let bias = self.values[b.0].clone();

        let mut out = ArrayD::<F>::zeros(IxDyn(&[bs, oc, oh, ow]));
        {
            let om = out_m.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let bv = bias.as_slice().unwrap();
            let hw = oh * ow;
            for bi in 0..bs {
                for o in 0..oc {
                    let dst = &mut os[(bi * oc + o) * hw..(bi * oc + o + 1) * hw];
                    let src = &om[o * bs * hw + bi * hw..o * bs * hw + (bi + 1) * hw];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + bv[o];
                    }
                }
            }
        }

        self.push(
            out,
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let hw = oh * ow;
                // regroup grad to [OC, B*OH*OW]
                let gos = go.as_slice().unwrap();
                let mut go_m = Array2::<F>::zeros((oc, bs * hw));
                {
                    let gm = go_m.as_slice_mut().unwrap();
                    for bi in 0..bs {
                        for o in 0..oc {
                            let src = &gos[(bi * oc + o) * hw..(bi * oc + o + 1) * hw];
                            gm[o * bs * hw + bi * hw..o * bs * hw + (bi + 1) * hw]
                                .copy_from_slice(src);
                        }
                    }
                }
                let col = im2col(&vals[x.0], kh, kw, stride, pad, oh, ow);
                let gw = go_m.dot(&col.t());
                grads.accum(
                    w,
                    gw.into_shape_with_order(IxDyn(&[oc, c, kh, kw])).unwrap(),
                );
                grads.accum(b, go_m.sum_axis(Axis(1)).into_dyn());
                let w2 = vals[w.0]
                    .view()
                    .into_shape_with_order((oc, c * kh * kw))
                    .unwrap();
                let gcol = w2.t().dot(&go_m); // [C*KH*KW, B*OH*OW]
                let gx = col2im(&gcol, bs, c, h, wd, kh, kw, stride, pad, oh, ow);
                grads.accum(x, gx);
            })),
        )
    }

    /// Group normalization with per-channel affine, batch-independent.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (bs, c, h, w) = dims4(&self.values[x.0]);
        debug_assert_eq!(c % groups, 0);
        let cs = c / groups;
        let m = cs * h * w;
        let hw = h * w;

        let mut mu = vec![F::zero(); bs * groups];
        let mut rstd = vec![F::zero(); bs * groups];
        let xs = self.values[x.0].as_slice().unwrap();
        let gs = self.values[gamma.0].as_slice().unwrap();
        let bsl = self.values[beta.0].as_slice().unwrap();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..bs {
                for g in 0..groups {
                    let base = (bi * c + g * cs) * hw;
                    let seg = &xs[base..base + m];
                    let mut s = F::zero();
                    for &v in seg {
                        s += v;
                    }
                    let mean = s / fl::<F>(m as f64);
                    let mut vsum = F::zero();
                    for &v in seg {
                        let d = v - mean;
                        vsum += d * d;
                    }
                    let var = vsum / fl::<F>(m as f64);
                    let rs = F::one() / (var + fl::<F>(eps)).sqrt();
                    mu[bi * groups + g] = mean;
                    rstd[bi * groups + g] = rs;
                    for cc in 0..cs {
                        let ch = g * cs + cc;
                        let (ga, be) = (gs[ch], bsl[ch]);
                        let off = (bi * c + ch) * hw;
                        for k in 0..hw {
                            os[off + k] = ga * (xs[off + k] - mean) * rs + be;
                        }
                    }
                }
            }
        }

        self.push(
            out,
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let xs = vals[x.0].as_slice().unwrap();
                let gs = vals[gamma.0].as_slice().unwrap();
                let gos = go.as_slice().unwrap();
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
                let mut ggamma = vec![F::zero(); c];
                let mut gbeta = vec![F::zero(); c];
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    let mf = fl::<F>(m as f64);
                    for bi in 0..bs {
                        for g in 0..groups {
                            let mean = mu[bi * groups + g];
                            let rs = rstd[bi * groups + g];
                            // first pass: group sums of gamma*go and gamma*go*xhat
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for cc in 0..cs {
                                let ch = g * cs + cc;
                                let off = (bi * c + ch) * hw;
                                for k in 0..hw {
                                    let xhat = (xs[off + k] - mean) * rs;
                                    let gh = gs[ch] * gos[off + k];
                                    s1 += gh;
                                    s2 += gh * xhat;
                                    ggamma[ch] += gos[off + k] * xhat;
                                    gbeta[ch] += gos[off + k];
                                }
                            }
                            let c1 = s1 / mf;
                            let c2 = s2 / mf;
                            for cc in 0..cs {
                                let ch = g * cs + cc;
                                let off = (bi * c + ch) * hw;
                                for k in 0..hw {
                                    let xhat = (xs[off + k] - mean) * rs;
                                    let gh = gs[ch] * gos[off + k];
                                    gxs[off + k] = rs * (gh - c1 - xhat * c2);
                                }
                            }
                        }
                    }
                }
                grads.accum(x, gx);
                grads.accum(gamma, Array1::from_vec(ggamma).into_dyn());
                grads.accum(beta, Array1::from_vec(gbeta).into_dyn());
            })),
        )
    }

    /// Training-mode batch normalization over rows: per-column statistics,
    /// `[n, d]` with `gamma/beta [d]`. No running statistics are kept (the
    /// heads using this never run in eval mode).
    pub fn batch_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = view2(&self.values[x.0]);
        let (n, d) = (xv.nrows(), xv.ncols());
        let gs = self.values[gamma.0].as_slice().unwrap().to_vec();
        let bs = self.values[beta.0].as_slice().unwrap().to_vec();
        let nf = fl::<F>(n as f64);
        let mut mu = vec![F::zero(); d];
        let mut rstd = vec![F::zero(); d];
        for k in 0..d {
            let mut s = F::zero();
            for i in 0..n {
                s += xv[[i, k]];
            }
            let mean = s / nf;
            let mut var = F::zero();
            for i in 0..n {
                let dv = xv[[i, k]] - mean;
                var += dv * dv;
            }
            mu[k] = mean;
            rstd[k] = F::one() / (var / nf + fl::<F>(eps)).sqrt();
        }
        let mut out = Array2::<F>::zeros((n, d));
        for i in 0..n {
            for k in 0..d {
                out[[i, k]] = gs[k] * (xv[[i, k]] - mu[k]) * rstd[k] + bs[k];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let xv = view2(&vals[x.0]);
                let gv = vals[gamma.0].as_slice().unwrap();
                let go2 = view2(go);
                let mut gx = Array2::<F>::zeros((n, d));
                let mut ggamma = vec![F::zero(); d];
                let mut gbeta = vec![F::zero(); d];
                let nf = fl::<F>(n as f64);
                for k in 0..d {
                    let (mean, rs) = (mu[k], rstd[k]);
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for i in 0..n {
                        let xhat = (xv[[i, k]] - mean) * rs;
                        let gh = gv[k] * go2[[i, k]];
                        s1 += gh;
                        s2 += gh * xhat;
                        ggamma[k] += go2[[i, k]] * xhat;
                        gbeta[k] += go2[[i, k]];
                    }
                    let (c1, c2) = (s1 / nf, s2 / nf);
                    for i in 0..n {
                        let xhat = (xv[[i, k]] - mean) * rs;
                        let gh = gv[k] * go2[[i, k]];
                        gx[[i, k]] = rs * (gh - c1 - xhat * c2);
                    }
                }
                grads.accum(x, gx.into_dyn());
                grads.accum(gamma, Array1::from_vec(ggamma).into_dyn());
                grads.accum(beta, Array1::from_vec(gbeta).into_dyn());
            })),
        )
    }

    /// Global average pooling over H, W: `[B, C, H, W] -> [B, C]`.
    pub fn mean_pool_hw(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = dims4(&self.values[x.0]);
        let hw = h * w;
        let xs = self.values[x.0].as_slice().unwrap();
        let mut out = Array2::<F>::zeros((bs, c));
        {
            let os = out.as_slice_mut().unwrap();
            for i in 0..bs * c {
                let mut s = F::zero();
                for k in 0..hw {
                    s += xs[i * hw + k];
                }
                os[i] = s / fl::<F>(hw as f64);
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let gos = go.as_slice().unwrap();
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    let inv = F::one() / fl::<F>(hw as f64);
                    for i in 0..bs * c {
                        let g = gos[i] * inv;
                        for k in 0..hw {
                            gxs[i * hw + k] = g;
                        }
                    }
                }
                grads.accum(x, gx);
            })),
        )
    }

    /// `[B, C, H, W] -> [B*H*W, C]` (pixels become rows).
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let (bs, c, h, w) = dims4(&self.values[x.0]);
        let hw = h * w;
        let xs = self.values[x.0].as_slice().unwrap();
        let mut out = Array2::<F>::zeros((bs * hw, c));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..bs {
                for ch in 0..c {
                    for k in 0..hw {
                        os[(bi * hw + k) * c + ch] = xs[(bi * c + ch) * hw + k];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let gos = go.as_slice().unwrap();
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for bi in 0..bs {
                        for ch in 0..c {
                            for k in 0..hw {
                                gxs[(bi * c + ch) * hw + k] = gos[(bi * hw + k) * c + ch];
                            }
                        }
                    }
                }
                grads.accum(x, gx);
            })),
        )
    }

    /// Inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, bs: usize, h: usize, w: usize) -> Var {
        let xv = view2(&self.values[x.0]);
        let c = xv.ncols();
        debug_assert_eq!(xv.nrows(), bs * h * w);
        let hw = h * w;
        let xs = self.values[x.0].as_slice().unwrap();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..bs {
                for k in 0..hw {
                    for ch in 0..c {
                        os[(bi * c + ch) * hw + k] = xs[(bi * hw + k) * c + ch];
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let gos = go.as_slice().unwrap();
                let mut gx = Array2::<F>::zeros((bs * hw, c));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for bi in 0..bs {
                        for k in 0..hw {
                            for ch in 0..c {
                                gxs[(bi * hw + k) * c + ch] = gos[(bi * c + ch) * hw + k];
                            }
                        }
                    }
                }
                grads.accum(x, gx.into_dyn());
            })),
        )
    }

    /// Bilinear upsampling (align-corners-off) to `(oh, ow)`.
    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (bs, c, h, w) = dims4(&self.values[x.0]);
        let ytaps = axis_taps(h, oh);
        let xtaps = axis_taps(w, ow);
        let xs = self.values[x.0].as_slice().unwrap();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[bs, c, oh, ow]));
        {
            let os = out.as_slice_mut().unwrap();
            for p in 0..bs * c {
                let sp = &xs[p * h * w..(p + 1) * h * w];
                let dp = &mut os[p * oh * ow..(p + 1) * oh * ow];
                for (i, &(i0, i1, wy)) in ytaps.iter().enumerate() {
                    for (j, &(j0, j1, wx)) in xtaps.iter().enumerate() {
                        let v = (F::one() - fl::<F>(wy))
                            * ((F::one() - fl::<F>(wx)) * sp[i0 * w + j0]
                                + fl::<F>(wx) * sp[i0 * w + j1])
                            + fl::<F>(wy)
                                * ((F::one() - fl::<F>(wx)) * sp[i1 * w + j0]
                                    + fl::<F>(wx) * sp[i1 * w + j1]);
                        dp[i * ow + j] = v;
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let gos = go.as_slice().unwrap();
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for p in 0..bs * c {
                        let gp = &gos[p * oh * ow..(p + 1) * oh * ow];
                        let sp = &mut gxs[p * h * w..(p + 1) * h * w];
                        for (i, &(i0, i1, wy)) in ytaps.iter().enumerate() {
                            for (j, &(j0, j1, wx)) in xtaps.iter().enumerate() {
                                let g = gp[i * ow + j];
                                let (wy, wx) = (fl::<F>(wy), fl::<F>(wx));
                                sp[i0 * w + j0] += (F::one() - wy) * (F::one() - wx) * g;
                                sp[i0 * w + j1] += (F::one() - wy) * wx * g;
                                sp[i1 * w + j0] += wy * (F::one() - wx) * g;
                                sp[i1 * w + j1] += wy * wx * g;
                            }
                        }
                    }
                }
                grads.accum(x, gx);
            })),
        )
    }

    /// Affine warp of `[B, C, H, W]` (one transform, or one per sample).
    /// Returns the warped tensor and the (non-differentiable) validity mask
    /// `[B, 1, H, W]`.
    pub fn warp_affine(
        &mut self,
        x: Var,
        transforms: &[AffineTransform],
        fill: F,
    ) -> (Var, ArrayD<F>) {
        let (bs, c, h, w) = dims4(&self.values[x.0]);
        debug_assert!(transforms.len() == bs || transforms.len() == 1);
        let ts: Vec<AffineTransform> = if transforms.len() == 1 {
            vec![transforms[0]; bs]
        } else {
            transforms.to_vec()
        };
        let xs = self.values[x.0].as_slice().unwrap();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
        let mut mask = ArrayD::<F>::zeros(IxDyn(&[bs, 1, h, w]));
        {
            let os = out.as_slice_mut().unwrap();
            let ms = mask.as_slice_mut().unwrap();
            for bi in 0..bs {
                let p = plan(&ts[bi], h, w);
                warp_channels(
                    &p,
                    &xs[bi * c * h * w..(bi + 1) * c * h * w],
                    c,
                    fill,
                    &mut os[bi * c * h * w..(bi + 1) * c * h * w],
                );
                for (d, v) in ms[bi * h * w..(bi + 1) * h * w]
                    .iter_mut()
                    .zip(validity_from_plan(&p))
                {
                    *d = fl::<F>(v as f64);
                }
            }
        }
        let out_var = self.push(
            out,
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let gos = go.as_slice().unwrap();
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    for bi in 0..bs {
                        let p = plan(&ts[bi], h, w);
                        warp_backward_channels(
                            &p,
                            &gos[bi * c * h * w..(bi + 1) * c * h * w],
                            c,
                            &mut gxs[bi * c * h * w..(bi + 1) * c * h * w],
                        );
                    }
                }
                grads.accum(x, gx);
            })),
        );
        (out_var, mask)
    }

    /// Gather rows by index: `[n, d] -> [idx.len(), d]`.
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = view2(&self.values[x.0]);
        let (n, d) = (xv.nrows(), xv.ncols());
        let mut out = Array2::<F>::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            debug_assert!(i < n);
            out.row_mut(r).assign(&xv.row(i));
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let go2 = view2(go);
                let mut gx = Array2::<F>::zeros((n, d));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = gx.row_mut(i);
                    row += &go2.row(r);
                }
                grads.accum(x, gx.into_dyn());
            })),
        )
    }

    /// Stack two row matrices: `[n1, d] + [n2, d] -> [n1+n2, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = view2(&self.values[a.0]);
        let bv = view2(&self.values[b.0]);
        debug_assert_eq!(av.ncols(), bv.ncols());
        let (n1, d) = (av.nrows(), av.ncols());
        let n2 = bv.nrows();
        let mut out = Array2::<F>::zeros((n1 + n2, d));
        out.slice_mut(ndarray::s![..n1, ..]).assign(&av);
        out.slice_mut(ndarray::s![n1.., ..]).assign(&bv);
        self.push(
            out.into_dyn(),
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let go2 = view2(go);
                grads.accum(a, go2.slice(ndarray::s![..n1, ..]).to_owned().into_dyn());
                grads.accum(b, go2.slice(ndarray::s![n1.., ..]).to_owned().into_dyn());
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.values[x.0].sum();
        let shape = self.values[x.0].shape().to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let g = go[[0]];
                grads.accum(x, ArrayD::from_elem(IxDyn(&shape), g));
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values[x.0].len();
        let s = self.values[x.0].sum() / fl::<F>(n as f64);
        let shape = self.values[x.0].shape().to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |_vals, go, grads: &mut Grads<F>| {
                let g = go[[0]] / fl::<F>(n as f64);
                grads.accum(x, ArrayD::from_elem(IxDyn(&shape), g));
            })),
        )
    }

    /// `sum((a - target)^2) / denom` against a constant target.
    pub fn sq_diff_sum(&mut self, a: Var, target: ArrayD<F>, denom: F) -> Var {
        debug_assert_eq!(self.values[a.0].shape(), target.shape());
        let mut s = F::zero();
        for (&x, &t) in self.values[a.0].iter().zip(target.iter()) {
            let d = x - t;
            s += d * d;
        }
        s = s / denom;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let g0 = go[[0]];
                let two = fl::<F>(2.0);
                let mut g = vals[a.0].clone();
                g.zip_mut_with(&target, |gv, &t| *gv = two * (*gv - t) / denom * g0);
                grads.accum(a, g);
            })),
        )
    }

    /// Row-masked squared error against a constant: rows with `mask[i]=false`
    /// contribute nothing; sum divided by `denom`.
    pub fn masked_row_sq_err(
        &mut self,
        x: Var,
        target: ArrayD<F>,
        mask: Vec<bool>,
        denom: F,
    ) -> Var {
        let xv = view2(&self.values[x.0]);
        let tv = view2(&target);
        debug_assert_eq!(xv.shape(), tv.shape());
        debug_assert_eq!(mask.len(), xv.nrows());
        let mut s = F::zero();
        for (i, row) in xv.outer_iter().enumerate() {
            if !mask[i] {
                continue;
            }
            for (&a, &t) in row.iter().zip(tv.row(i)) {
                let d = a - t;
                s += d * d;
            }
        }
        s = s / denom;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let g0 = go[[0]];
                let two = fl::<F>(2.0);
                let xv = view2(&vals[x.0]);
                let tv = view2(&target);
                let mut g = Array2::<F>::zeros(xv.raw_dim());
                for (i, keep) in mask.iter().enumerate() {
                    if !keep {
                        continue;
                    }
                    for (k, gv) in g.row_mut(i).iter_mut().enumerate() {
                        *gv = two * (xv[[i, k]] - tv[[i, k]]) / denom * g0;
                    }
                }
                grads.accum(x, g.into_dyn());
            })),
        )
    }

    /// Row-wise dot product: `[n, d] x [n, d] -> [n]`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Var {
        let av = view2(&self.values[a.0]);
        let bv = view2(&self.values[b.0]);
        debug_assert_eq!(av.shape(), bv.shape());
        let v: Array1<F> = av
            .outer_iter()
            .zip(bv.outer_iter())
            .map(|(x, y)| x.dot(&y))
            .collect();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let av = view2(&vals[a.0]);
                let bv = view2(&vals[b.0]);
                let mut ga = Array2::<F>::zeros(av.raw_dim());
                let mut gb = Array2::<F>::zeros(bv.raw_dim());
                for (i, &g) in go.iter().enumerate() {
                    ga.row_mut(i).assign(&bv.row(i).mapv(|x| x * g));
                    gb.row_mut(i).assign(&av.row(i).mapv(|x| x * g));
                }
                grads.accum(a, ga.into_dyn());
                grads.accum(b, gb.into_dyn());
            })),
        )
    }

    /// Row-wise L2 normalization. Rows must be nonzero (callers validate).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = view2(&self.values[x.0]);
        let tiny = fl::<F>(1e-30);
        let norms: Vec<F> = xv
            .outer_iter()
            .map(|r| r.dot(&r).sqrt().max(tiny))
            .collect();
        let mut out = xv.to_owned();
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| v / norms[i]);
        }
        let id = self.next_id();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let go2 = view2(go);
                let uv = view2(&vals[id]);
                let mut gx = Array2::<F>::zeros(go2.raw_dim());
                for i in 0..go2.nrows() {
                    let u = uv.row(i);
                    let g = go2.row(i);
                    let proj = g.dot(&u);
                    for (k, gv) in gx.row_mut(i).iter_mut().enumerate() {
                        *gv = (g[k] - u[k] * proj) / norms[i];
                    }
                }
                grads.accum(x, gx.into_dyn());
            })),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = view2(&self.values[x.0]);
        let mut out = Array2::<F>::zeros(xv.raw_dim());
        for (i, row) in xv.outer_iter().enumerate() {
            softmax_into(row.as_slice().unwrap(), out.row_mut(i).as_slice_mut().unwrap());
        }
        let id = self.next_id();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let go2 = view2(go);
                let pv = view2(&vals[id]);
                let mut gx = Array2::<F>::zeros(go2.raw_dim());
                for i in 0..go2.nrows() {
                    let p = pv.row(i);
                    let g = go2.row(i);
                    let dot = g.dot(&p);
                    for (k, gv) in gx.row_mut(i).iter_mut().enumerate() {
                        *gv = p[k] * (g[k] - dot);
                    }
                }
                grads.accum(x, gx.into_dyn());
            })),
        )
    }

    /// Cross-entropy of `logits [n, K]` against integer labels, summed over
    /// rows where `mask` is true (or all rows) and divided by `denom`.
    pub fn softmax_ce(
        &mut self,
        logits: Var,
        labels: Vec<usize>,
        mask: Option<Vec<bool>>,
        denom: F,
    ) -> Var {
        let lv = view2(&self.values[logits.0]);
        debug_assert_eq!(labels.len(), lv.nrows());
        let mut s = F::zero();
        for (i, row) in lv.outer_iter().enumerate() {
            if let Some(m) = &mask {
                if !m[i] {
                    continue;
                }
            }
            let r = row.as_slice().unwrap();
            s += log_sum_exp(r) - r[labels[i]];
        }
        s = s / denom;
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let g0 = go[[0]];
                let lv = view2(&vals[logits.0]);
                let mut gx = Array2::<F>::zeros(lv.raw_dim());
                let mut probs = vec![F::zero(); lv.ncols()];
                for (i, row) in lv.outer_iter().enumerate() {
                    if let Some(m) = &mask {
                        if !m[i] {
                            continue;
                        }
                    }
                    softmax_into(row.as_slice().unwrap(), &mut probs);
                    for (k, gv) in gx.row_mut(i).iter_mut().enumerate() {
                        let ind = if k == labels[i] { F::one() } else { F::zero() };
                        *gv = (probs[k] - ind) / denom * g0;
                    }
                }
                grads.accum(logits, gx.into_dyn());
            })),
        )
    }

    /// InfoNCE from a cosine-similarity matrix `sims [N, N]`: mean over
    /// anchors of `-s_ij/tau + logsumexp_{k != i}(s_ik/tau)`.
    pub fn nce_from_sims(&mut self, sims: Var, positives: Vec<usize>, tau: F) -> Var {
        let sv = view2(&self.values[sims.0]);
        let n = sv.nrows();
        debug_assert_eq!(sv.ncols(), n);
        debug_assert_eq!(positives.len(), n);
        let mut total = F::zero();
        let mut scaled = vec![F::zero(); n - 1];
        for i in 0..n {
            let row = sv.row(i);
            let mut m = 0;
            for k in 0..n {
                if k != i {
                    scaled[m] = row[k] / tau;
                    m += 1;
                }
            }
            total += log_sum_exp(&scaled) - row[positives[i]] / tau;
        }
        total = total / fl::<F>(n as f64);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), total),
            Some(Box::new(move |vals, go, grads: &mut Grads<F>| {
                let g0 = go[[0]] / (tau * fl::<F>(n as f64));
                let sv = view2(&vals[sims.0]);
                let mut gs = Array2::<F>::zeros((n, n));
                let mut scaled = vec![F::zero(); n - 1];
                let mut probs = vec![F::zero(); n - 1];
                for i in 0..n {
                    let row = sv.row(i);
                    let mut m = 0;
                    for k in 0..n {
                        if k != i {
                            scaled[m] = row[k] / tau;
                            m += 1;
                        }
                    }
                    softmax_into(&scaled, &mut probs);
                    let mut m = 0;
                    for k in 0..n {
                        if k != i {
                            let ind = if k == positives[i] { F::one() } else { F::zero() };
                            gs[[i, k]] = (probs[m] - ind) * g0;
                            m += 1;
                        }
                    }
                }
                grads.accum(sims, gs.into_dyn());
            })),
        )
    }
}

fn softmax_into<F: Elem>(row: &[F], out: &mut [F]) {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut z = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        z += e;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}

fn log_sum_exp<F: Elem>(row: &[F]) -> F {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut z = F::zero();
    for &v in row {
        z += (v - mx).exp();
    }
    z.ln() + mx
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let src = src.clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn im2col<F: Elem>(
    x: &ArrayD<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (bs, c, h, w) = dims4(x);
    let xs = x.as_slice().unwrap();
    let mut col = Array2::<F>::zeros((c * kh * kw, bs * oh * ow));
    let cs = col.as_slice_mut().unwrap();
    let row_len = bs * oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ch * kh + ki) * kw + kj;
                let dst = &mut cs[r * row_len..(r + 1) * row_len];
                for bi in 0..bs {
                    let src_plane = &xs[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let base = bi * oh * ow + oi * ow;
                        if ii < 0 || ii as usize >= h {
                            continue; // zeros already in place
                        }
                        let ii = ii as usize;
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            dst[base + oj] = src_plane[ii * w + jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Elem>(
    gcol: &Array2<F>,
    bs: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<F> {
    let mut gx = ArrayD::<F>::zeros(IxDyn(&[bs, c, h, w]));
    let gxs = gx.as_slice_mut().unwrap();
    let gs = gcol.as_slice().unwrap();
    let row_len = bs * oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ch * kh + ki) * kw + kj;
                let src = &gs[r * row_len..(r + 1) * row_len];
                for bi in 0..bs {
                    let dst_plane =
                        &mut gxs[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii as usize >= h {
                            continue;
                        }
                        let ii = ii as usize;
                        let base = bi * oh * ow + oi * ow;
                        for oj in 0..ow {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj as usize >= w {
                                continue;
                            }
                            dst_plane[ii * w + jj as usize] += src[base + oj];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, Var};
    use crate::augment::affine::AffineTransform;
    use crate::stream::{normal, stream};
    use ndarray::{ArrayD, IxDyn};

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = stream(seed, "ops-test");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || normal(&mut rng))
    }

    /// Norm-wise comparison of tape gradients against central differences.
    fn gradcheck(
        inputs: &[ArrayD<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).len(), 1, "gradcheck loss must be scalar");
        let grads = tape.backward(loss);

        let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::<f64>::new();
            let vs: Vec<Var> = perturbed.iter().map(|x| t.input(x.clone())).collect();
            let l = build(&mut t, &vs);
            t.scalar(l)
        };

        let h = 1e-5;
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(inputs[i].raw_dim()));
            let mut fd = ArrayD::<f64>::zeros(inputs[i].raw_dim());
            for k in 0..inputs[i].len() {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[k] += h;
                minus[i].as_slice_mut().unwrap()[k] -= h;
                fd.as_slice_mut().unwrap()[k] = (eval(&plus) - eval(&minus)) / (2.0 * h);
            }
            let num = (&analytic - &fd).mapv(|x| x * x).sum().sqrt();
            let den = fd.mapv(|x| x * x).sum().sqrt().max(1e-8);
            assert!(
                num / den < tol,
                "input {i}: grad mismatch {num}/{den} = {}",
                num / den
            );
        }
    }

    #[test]
    fn elementwise_grads() {
        let a = randn(&[3, 4], 1);
        let b = randn(&[3, 4], 2);
        gradcheck(&[a, b], |t, v| {
            let s = t.mul(v[0], v[1]);
            let d = t.sub(s, v[0]);
            let d = t.add(d, v[1]);
            let d = t.scale(d, 0.7);
            t.mean_all(d)
        }, 1e-6);
    }

    #[test]
    fn relu_grad() {
        let a = randn(&[5, 3], 3);
        gradcheck(&[a], |t, v| {
            let r = t.relu(v[0]);
            t.sum_all(r)
        }, 1e-6);
    }

    #[test]
    fn linear_grad() {
        let x = randn(&[4, 6], 4);
        let w = randn(&[3, 6], 5);
        let b = randn(&[3], 6);
        gradcheck(&[x, w, b], |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            let y = t.relu(y);
            t.mean_all(y)
        }, 1e-6);
    }

    #[test]
    fn matmul_nt_grad() {
        let a = randn(&[4, 5], 7);
        let b = randn(&[3, 5], 8);
        gradcheck(&[a, b], |t, v| {
            let y = t.matmul_nt(v[0], v[1]);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn conv2d_grad() {
        let x = randn(&[2, 3, 6, 6], 9);
        let w = randn(&[4, 3, 3, 3], 10).mapv(|v| v * 0.3);
        let b = randn(&[4], 11);
        gradcheck(&[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1);
            let y = t.relu(y);
            t.mean_all(y)
        }, 1e-5);
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let x = randn(&[1, 2, 5, 5], 12);
        let w = randn(&[3, 2, 3, 3], 13);
        let b = randn(&[3], 14);
        let mut t = Tape::<f64>::new();
        let (xv, wv, bv) = (t.input(x.clone()), t.input(w.clone()), t.input(b.clone()));
        let y = t.conv2d(xv, wv, bv, 1, 1);
        let yv = t.value(y);
        // direct dense loop oracle
        for o in 0..3 {
            for i in 0..5usize {
                for j in 0..5usize {
                    let mut acc = b[[o]];
                    for c in 0..2 {
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let ii = i as isize + ki as isize - 1;
                                let jj = j as isize + kj as isize - 1;
                                if ii >= 0 && ii < 5 && jj >= 0 && jj < 5 {
                                    acc += x[[0, c, ii as usize, jj as usize]]
                                        * w[[o, c, ki, kj]];
                                }
                            }
                        }
                    }
                    assert!((yv[[0, o, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_rows_grad() {
        let x = randn(&[5, 4], 30);
        let g = randn(&[4], 31).mapv(|v| 1.0 + 0.1 * v);
        let b = randn(&[4], 32);
        gradcheck(&[x, g, b], |t, v| {
            let y = t.batch_norm_rows(v[0], v[1], v[2], 1e-5);
            let y = t.relu(y);
            t.mean_all(y)
        }, 1e-5);
    }

    #[test]
    fn group_norm_grad() {
        let x = randn(&[2, 4, 3, 3], 15);
        let g = randn(&[4], 16).mapv(|v| 1.0 + 0.1 * v);
        let b = randn(&[4], 17);
        gradcheck(&[x, g, b], |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2, 1e-5);
            let y = t.relu(y);
            t.mean_all(y)
        }, 1e-5);
    }

    #[test]
    fn pool_pixels_and_upsample_grads() {
        let x = randn(&[2, 3, 4, 4], 18);
        gradcheck(&[x.clone()], |t, v| {
            let y = t.mean_pool_hw(v[0]);
            t.sum_all(y)
        }, 1e-6);
        gradcheck(&[x.clone()], |t, v| {
            let r = t.nchw_to_rows(v[0]);
            let n = t.rows_to_nchw(r, 2, 4, 4);
            let u = t.upsample_bilinear(n, 8, 8);
            t.mean_all(u)
        }, 1e-6);
        // rows round trip is the identity
        let mut t = Tape::<f64>::new();
        let xv = t.input(x.clone());
        let r = t.nchw_to_rows(xv);
        let n = t.rows_to_nchw(r, 2, 4, 4);
        assert_eq!(t.value(n), &x);
    }

    #[test]
    fn warp_grad() {
        let x = randn(&[2, 3, 8, 8], 19);
        let mut rng = stream(20, "warp-ops");
        let pol = crate::augment::affine::AffinePolicy::default();
        let ts = vec![pol.sample(&mut rng), pol.sample(&mut rng)];
        gradcheck(&[x], |t, v| {
            let (y, _mask) = t.warp_affine(v[0], &ts, 0.0);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn select_concat_dot_norm_grads() {
        let a = randn(&[5, 4], 21);
        let b = randn(&[3, 4], 22);
        gradcheck(&[a, b], |t, v| {
            let c = t.concat_rows(v[0], v[1]);
            let s = t.select_rows(c, vec![0, 2, 2, 7]);
            let n = t.l2_normalize_rows(s);
            let d = t.dot_rows(n, s);
            t.mean_all(d)
        }, 1e-6);
    }

    #[test]
    fn softmax_and_ce_grads() {
        let x = randn(&[4, 5], 23);
        gradcheck(&[x.clone()], |t, v| {
            let p = t.softmax_rows(v[0]);
            let tgt = ArrayD::from_elem(IxDyn(&[4, 5]), 0.2);
            t.sq_diff_sum(p, tgt, 4.0)
        }, 1e-6);
        gradcheck(&[x.clone()], |t, v| {
            t.softmax_ce(v[0], vec![0, 2, 1, 4], None, 4.0)
        }, 1e-6);
        gradcheck(&[x], |t, v| {
            t.softmax_ce(v[0], vec![0, 2, 1, 4], Some(vec![true, false, true, false]), 4.0)
        }, 1e-6);
    }

    #[test]
    fn masked_sq_err_grad() {
        let x = randn(&[4, 3], 24);
        let tgt = randn(&[4, 3], 25);
        gradcheck(&[x], |t, v| {
            t.masked_row_sq_err(v[0], tgt.clone(), vec![true, false, true, true], 12.0)
        }, 1e-6);
    }

    #[test]
    fn nce_grad() {
        let z = randn(&[6, 4], 26);
        let positives = vec![3, 4, 5, 0, 1, 2];
        gradcheck(&[z], |t, v| {
            let n = t.l2_normalize_rows(v[0]);
            let sims = t.matmul_nt(n, n);
            t.nce_from_sims(sims, positives.clone(), 0.3)
        }, 1e-5);
    }

    #[test]
    fn warp_identity_is_exact_on_tape() {
        let x = randn(&[1, 2, 7, 5], 27);
        let mut t = Tape::<f64>::new();
        let xv = t.input(x.clone());
        let (y, mask) = t.warp_affine(xv, &[AffineTransform::identity()], 0.5);
        assert_eq!(t.value(y), &x);
        assert!(mask.iter().all(|&m| m == 1.0));
    }
}
