//! Layer primitives with forward passes, cached backward passes and parameter access.
//!
//! Every tensor is a single sample laid out `(C, H, W)`; dense layers produce
//! `(N, 1, 1)`.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `(out_channels, in_channels * kernel * kernel)`, row-major over `(in, ky, kx)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Per-channel `x * scale + shift`; inference-mode batch norm is folded into this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `(out_features, in_features)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv(Conv2d),
    Affine(Affine),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// `main(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        main: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
    GlobalAvgPool,
    Linear(Linear),
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug)]
pub enum Cache {
    Conv { cols: Array2<f64>, in_h: usize, in_w: usize },
    Affine { input: Array3<f64> },
    Relu { output: Array3<f64> },
    MaxPool { argmax: Vec<usize>, in_dim: (usize, usize, usize) },
    Residual { main: Vec<Cache>, shortcut: Vec<Cache> },
    Gap { in_dim: (usize, usize, usize) },
    Linear { input: Array1<f64>, in_dim: (usize, usize, usize) },
}

fn out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

fn im2col(x: &Array3<f64>, kernel: usize, stride: usize, padding: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (out_len(h, kernel, stride, padding), out_len(w, kernel, stride, padding));
    let xs = x.as_slice().expect("standard layout");
    let plane = oh * ow;
    let mut cols = vec![0.0; c * kernel * kernel * plane];
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xs[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * kernel * kernel, plane), cols).expect("shape")
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (oh, ow) = (out_len(h, kernel, stride, padding), out_len(w, kernel, stride, padding));
    let plane = oh * ow;
    let cs = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ch * kernel + ky) * kernel + kx;
                let src = &cs[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), out).expect("shape")
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = (
            out_len(h, self.kernel, self.stride, self.padding),
            out_len(w, self.kernel, self.stride, self.padding),
        );
        let cols = im2col(x, self.kernel, self.stride, self.padding);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.iter()) {
            row += b;
        }
        let out = out
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("shape");
        (out, cols)
    }
}

fn max_pool(
    x: &Array3<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (out_len(h, kernel, stride, padding), out_len(w, kernel, stride, padding));
    let xs = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = (ch * h + iy as usize) * w + ix as usize;
                        if xs[idx] > best || best_idx == usize::MAX {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (
        Array3::from_shape_vec((c, oh, ow), out).expect("shape"),
        argmax,
    )
}

impl Layer {
    pub fn forward(&self, x: Array3<f64>) -> Array3<f64> {
        match self {
            Layer::Conv(conv) => conv.forward(&x).0,
            Layer::Affine(a) => affine(x, a),
            Layer::Relu => x.mapv_into(|v| v.max(0.0)),
            Layer::MaxPool {
                kernel,
                stride,
                padding,
            } => max_pool(&x, *kernel, *stride, *padding).0,
            Layer::Residual { main, shortcut } => {
                let short = run(shortcut, x.clone());
                run(main, x) + short
            }
            Layer::GlobalAvgPool => gap(&x),
            Layer::Linear(l) => {
                let flat = Array1::from_iter(x.iter().copied());
                let out = l.weight.dot(&flat) + &l.bias;
                let n = out.len();
                out.into_shape_with_order((n, 1, 1)).expect("shape")
            }
        }
    }

    pub fn forward_cached(&self, x: Array3<f64>) -> (Array3<f64>, Cache) {
        match self {
            Layer::Conv(conv) => {
                let (_, h, w) = x.dim();
                let (out, cols) = conv.forward(&x);
                (out, Cache::Conv { cols, in_h: h, in_w: w })
            }
            Layer::Affine(a) => (affine(x.clone(), a), Cache::Affine { input: x }),
            Layer::Relu => {
                let out = x.mapv_into(|v| v.max(0.0));
                (out.clone(), Cache::Relu { output: out })
            }
            Layer::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let in_dim = x.dim();
                let (out, argmax) = max_pool(&x, *kernel, *stride, *padding);
                (out, Cache::MaxPool { argmax, in_dim })
            }
            Layer::Residual { main, shortcut } => {
                let (short, short_cache) = run_cached(shortcut, x.clone());
                let (out, main_cache) = run_cached(main, x);
                (
                    out + short,
                    Cache::Residual {
                        main: main_cache,
                        shortcut: short_cache,
                    },
                )
            }
            Layer::GlobalAvgPool => {
                let in_dim = x.dim();
                (gap(&x), Cache::Gap { in_dim })
            }
            Layer::Linear(_) => {
                let in_dim = x.dim();
                let input = Array1::from_iter(x.iter().copied());
                (self.forward(x), Cache::Linear { input, in_dim })
            }
        }
    }

    /// Propagates `grad` (shaped like this layer's output) back to its input.
    /// Parameter gradients are added into `acc`, which must mirror this layer.
    pub fn backward(&self, cache: Cache, grad: Array3<f64>, acc: Option<&mut Layer>) -> Array3<f64> {
        match (self, cache) {
            (Layer::Conv(conv), Cache::Conv { cols, in_h, in_w }) => {
                let (co, oh, ow) = grad.dim();
                let g = grad.into_shape_with_order((co, oh * ow)).expect("shape");
                if let Some(Layer::Conv(acc)) = acc {
                    acc.weight += &g.dot(&cols.t());
                    acc.bias += &g.sum_axis(Axis(1));
                }
                let dcols = conv.weight.t().dot(&g);
                col2im(
                    &dcols,
                    conv.in_channels,
                    in_h,
                    in_w,
                    conv.kernel,
                    conv.stride,
                    conv.padding,
                )
            }
            (Layer::Affine(a), Cache::Affine { input }) => {
                if let Some(Layer::Affine(acc)) = acc {
                    for (ch, (gp, xp)) in grad.outer_iter().zip(input.outer_iter()).enumerate() {
                        acc.scale[ch] += (&gp * &xp).sum();
                        acc.shift[ch] += gp.sum();
                    }
                }
                let mut out = grad;
                for (mut plane, &s) in out.outer_iter_mut().zip(a.scale.iter()) {
                    plane *= s;
                }
                out
            }
            (Layer::Relu, Cache::Relu { output }) => {
                let mut g = grad;
                g.zip_mut_with(&output, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
                g
            }
            (Layer::MaxPool { .. }, Cache::MaxPool { argmax, in_dim }) => {
                let mut out = Array3::zeros(in_dim);
                let os = out.as_slice_mut().expect("standard layout");
                for (&idx, &g) in argmax.iter().zip(grad.iter()) {
                    os[idx] += g;
                }
                out
            }
            (Layer::Residual { main, shortcut }, Cache::Residual { main: mc, shortcut: sc }) => {
                let (main_acc, short_acc) = match acc {
                    Some(Layer::Residual { main, shortcut }) => (Some(main), Some(shortcut)),
                    _ => (None, None),
                };
                let short = backward_seq(shortcut, sc, grad.clone(), short_acc);
                backward_seq(main, mc, grad, main_acc) + short
            }
            (Layer::GlobalAvgPool, Cache::Gap { in_dim }) => {
                let (c, h, w) = in_dim;
                let scale = 1.0 / (h * w) as f64;
                let mut out = Array3::zeros(in_dim);
                for ch in 0..c {
                    out.index_axis_mut(Axis(0), ch).fill(grad[[ch, 0, 0]] * scale);
                }
                out
            }
            (Layer::Linear(l), Cache::Linear { input, in_dim }) => {
                let g = Array1::from_iter(grad.iter().copied());
                if let Some(Layer::Linear(acc)) = acc {
                    for (mut row, &gi) in acc.weight.rows_mut().into_iter().zip(g.iter()) {
                        row.scaled_add(gi, &input);
                    }
                    acc.bias += &g;
                }
                l.weight
                    .t()
                    .dot(&g)
                    .into_shape_with_order(in_dim)
                    .expect("shape")
            }
            _ => panic!("cache does not match layer"),
        }
    }

    /// A structurally identical layer with every parameter set to zero.
    pub fn zeros_like(&self) -> Layer {
        let mut out = self.clone();
        for p in out.params_mut() {
            p.fill(0.0);
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv(c) => vec![slice(&c.weight), c.bias.as_slice().expect("contiguous")],
            Layer::Affine(a) => vec![
                a.scale.as_slice().expect("contiguous"),
                a.shift.as_slice().expect("contiguous"),
            ],
            Layer::Linear(l) => vec![slice(&l.weight), l.bias.as_slice().expect("contiguous")],
            Layer::Residual { main, shortcut } => main
                .iter()
                .chain(shortcut.iter())
                .flat_map(|l| l.params())
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv(c) => vec![
                c.weight.as_slice_mut().expect("contiguous"),
                c.bias.as_slice_mut().expect("contiguous"),
            ],
            Layer::Affine(a) => vec![
                a.scale.as_slice_mut().expect("contiguous"),
                a.shift.as_slice_mut().expect("contiguous"),
            ],
            Layer::Linear(l) => vec![
                l.weight.as_slice_mut().expect("contiguous"),
                l.bias.as_slice_mut().expect("contiguous"),
            ],
            Layer::Residual { main, shortcut } => main
                .iter_mut()
                .chain(shortcut.iter_mut())
                .flat_map(|l| l.params_mut())
                .collect(),
            _ => Vec::new(),
        }
    }

    /// True when every output of this layer is guaranteed non-negative.
    pub fn rectifies(&self) -> bool {
        matches!(self, Layer::Relu)
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

fn affine(mut x: Array3<f64>, a: &Affine) -> Array3<f64> {
    for ((mut plane, &s), &t) in x.outer_iter_mut().zip(a.scale.iter()).zip(a.shift.iter()) {
        plane.mapv_inplace(|v| v * s + t);
    }
    x
}

fn gap(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let n = (h * w) as f64;
    Array3::from_shape_fn((c, 1, 1), |(ch, _, _)| x.index_axis(Axis(0), ch).sum() / n)
}

pub fn run(layers: &[Layer], x: Array3<f64>) -> Array3<f64> {
    layers.iter().fold(x, |x, l| l.forward(x))
}

pub fn run_cached(layers: &[Layer], mut x: Array3<f64>) -> (Array3<f64>, Vec<Cache>) {
    let mut caches = Vec::with_capacity(layers.len());
    for l in layers {
        let (out, cache) = l.forward_cached(x);
        caches.push(cache);
        x = out;
    }
    (x, caches)
}

pub fn backward_seq(
    layers: &[Layer],
    caches: Vec<Cache>,
    mut grad: Array3<f64>,
    mut acc: Option<&mut Vec<Layer>>,
) -> Array3<f64> {
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let slot = acc.as_deref_mut().map(|a| &mut a[i]);
        grad = layer.backward(cache, grad, slot);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Layer {
        Layer::Conv(Conv2d {
            weight: Array2::from_shape_fn((cout, cin * k * k), |_| rng.gen_range(-0.5..0.5)),
            bias: Array1::from_shape_fn(cout, |_| rng.gen_range(-0.1..0.1)),
            in_channels: cin,
            kernel: k,
            stride: s,
            padding: p,
        })
    }

    /// Direct convolution used as an independent check on im2col + gemm.
    fn naive_conv(c: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let k = c.kernel;
        let oh = out_len(h, k, c.stride, c.padding);
        let ow = out_len(w, k, c.stride, c.padding);
        Array3::from_shape_fn((c.out_channels(), oh, ow), |(o, oy, ox)| {
            let mut acc = c.bias[o];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                        let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += c.weight[[o, (ci * k + ky) * k + kx]]
                                * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (1, 1, 0), (3, 2, 1), (7, 2, 3), (1, 2, 0)] {
            let layer = conv(&mut rng, 3, 4, k, s, p);
            let x = random3(&mut rng, (3, 9, 10));
            let Layer::Conv(c) = &layer else { unreachable!() };
            let fast = layer.forward(x.clone());
            let slow = naive_conv(c, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn loss(layers: &[Layer], x: &Array3<f64>, probe: &Array3<f64>) -> f64 {
        (&run(layers, x.clone()) * probe).sum()
    }

    /// Checks input and parameter gradients of a small residual stack against central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layers = vec![
            conv(&mut rng, 2, 4, 3, 1, 1),
            Layer::Affine(Affine {
                scale: Array1::from_vec(vec![1.1, 0.9, 1.3, 0.7]),
                shift: Array1::from_vec(vec![0.1, -0.2, 0.05, 0.0]),
            }),
            Layer::Relu,
            Layer::MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            Layer::Residual {
                main: vec![conv(&mut rng, 4, 4, 3, 1, 1), Layer::Relu, conv(&mut rng, 4, 4, 1, 1, 0)],
                shortcut: vec![],
            },
            Layer::Residual {
                main: vec![conv(&mut rng, 4, 3, 3, 2, 1)],
                shortcut: vec![conv(&mut rng, 4, 3, 1, 2, 0)],
            },
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::Linear(Linear {
                weight: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
                bias: Array1::zeros(2),
            }),
        ];
        let x = random3(&mut rng, (2, 8, 8));
        let probe = Array3::from_shape_vec((2, 1, 1), vec![0.7, -1.3]).unwrap();
        let (out, caches) = run_cached(&layers, x.clone());
        assert_eq!(out, run(&layers, x.clone()));
        let mut acc: Vec<Layer> = layers.iter().map(Layer::zeros_like).collect();
        let dx = backward_seq(&layers, caches, probe.clone(), Some(&mut acc));

        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 3, 4), (0, 7, 7), (1, 5, 2)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&layers, &xp, &probe) - loss(&layers, &xm, &probe)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "input grad at {idx:?}: {fd} vs {}", dx[idx]);
        }

        let analytic: Vec<f64> = acc.iter().flat_map(|l| l.params()).flatten().copied().collect();
        let n_params = analytic.len();
        for pi in (0..n_params).step_by(13) {
            let perturb = |delta: f64| {
                let mut ls = layers.clone();
                let mut seen = 0;
                for l in ls.iter_mut() {
                    for p in l.params_mut() {
                        if pi < seen + p.len() {
                            p[pi - seen] += delta;
                            return loss(&ls, &x, &probe);
                        }
                        seen += p.len();
                    }
                }
                unreachable!()
            };
            let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
            assert!(
                (fd - analytic[pi]).abs() < 1e-6,
                "param {pi}: {fd} vs {}",
                analytic[pi]
            );
        }
    }

    #[test]
    fn max_pool_ignores_padding() {
        let x = Array3::from_elem((1, 2, 2), -5.0);
        let (out, argmax) = max_pool(&x, 3, 2, 1);
        assert_eq!(out.dim(), (1, 1, 1));
        assert_eq!(out[[0, 0, 0]], -5.0);
        assert!(argmax[0] < 4);
    }
}
