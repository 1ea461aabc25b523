use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use super::{Architecture, ModelSpec};

pub(crate) trait Real: Float + AddAssign + SubAssign + MulAssign + Debug + Send + Sync + 'static {}

impl<T> Real for T where T: Float + AddAssign + SubAssign + MulAssign + Debug + Send + Sync + 'static {}

/// Returns `(loss, dloss/dlogits)` for one sample, computed in `f64`.
pub(crate) fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (f64, Vec<f64>) {
    let z: Vec<f64> = logits.iter().map(|v| v.to_f64().expect("finite logit")).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    let log_norm = max + sum.ln();
    let mut dz: Vec<f64> = z.iter().map(|&v| (v - log_norm).exp()).collect();
    dz[label] -= 1.0;
    (log_norm - z[label], dz)
}

fn cast<T: Real>(v: f64) -> T {
    T::from(v).expect("representable")
}

/// Zero-padded 3×3 convolution, stride 1, `cin × h × w` → `cout × h × w`.
fn conv3x3_forward<T: Real>(
    input: &[T],
    (cin, h, w): (usize, usize, usize),
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let cout = bias.len();
    let plane = h * w;
    for o in 0..cout {
        let out_o = &mut out[o * plane..(o + 1) * plane];
        out_o.fill(bias[o]);
        for c in 0..cin {
            let in_c = &input[c * plane..(c + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * cin + c) * 3 + ky) * 3 + kx];
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let (y_lo, y_hi) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
                    let (x_lo, x_hi) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    for y in y_lo..y_hi {
                        let src = ((y as isize + dy) as usize) * w;
                        let dst = &mut out_o[y * w + x_lo..y * w + x_hi];
                        let s = &in_c[(src as isize + x_lo as isize + dx) as usize..];
                        for (d, &v) in dst.iter_mut().zip(s) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward<T: Real>(
    input: &[T],
    (cin, h, w): (usize, usize, usize),
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dinput: Option<&mut [T]>,
) {
    let cout = dbias.len();
    let plane = h * w;
    for o in 0..cout {
        let dout_o = &dout[o * plane..(o + 1) * plane];
        dbias[o] += dout_o.iter().fold(T::zero(), |a, &v| a + v);
        for c in 0..cin {
            let in_c = &input[c * plane..(c + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let widx = ((o * cin + c) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let (y_lo, y_hi) = ((-dy).max(0) as usize, (h as isize - dy).min(h as isize) as usize);
                    let (x_lo, x_hi) = ((-dx).max(0) as usize, (w as isize - dx).min(w as isize) as usize);
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let src = (((y as isize + dy) as usize) * w) as isize + dx;
                        let g = &dout_o[y * w + x_lo..y * w + x_hi];
                        let s = (src + x_lo as isize) as usize;
                        for (&gv, &v) in g.iter().zip(&in_c[s..]) {
                            acc += gv * v;
                        }
                        if let Some(din) = dinput.as_deref_mut() {
                            let din_c = &mut din[c * plane + s..];
                            for (d, &gv) in din_c.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

/// 2×2 stride-2 max pool; the first maximum in scan order wins ties.
fn maxpool_forward<T: Real>(input: &[T], (c, h, w): (usize, usize, usize), out: &mut [T], arg: &mut [usize]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = ch * h * w + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = ch * oh * ow + y * ow + x;
                out[o] = input[best];
                arg[o] = best;
            }
        }
    }
}

fn dense_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &weight[i * n_in..(i + 1) * n_in];
        *o = row.iter().zip(x).fold(bias[i], |a, (&wv, &xv)| a + wv * xv);
    }
}

fn dense_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dx: Option<&mut [T]>,
) {
    let n_in = x.len();
    for (i, &g) in dout.iter().enumerate() {
        dbias[i] += g;
        for (d, &xv) in dweight[i * n_in..(i + 1) * n_in].iter_mut().zip(x) {
            *d += g * xv;
        }
    }
    if let Some(dx) = dx {
        for (i, &g) in dout.iter().enumerate() {
            for (d, &wv) in dx.iter_mut().zip(&weight[i * n_in..(i + 1) * n_in]) {
                *d += g * wv;
            }
        }
    }
}

fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Intermediate values of one TinyConvNet forward pass.
struct ConvTrace<T> {
    a1: Vec<T>,
    p1: Vec<T>,
    arg1: Vec<usize>,
    a2: Vec<T>,
    p2: Vec<T>,
    arg2: Vec<usize>,
    h: Vec<T>,
    logits: Vec<T>,
}

pub(crate) struct Net {
    spec: ModelSpec,
    /// `(start, len)` of each layout tensor in the flat parameter vector.
    spans: Vec<(usize, usize)>,
}

impl Net {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut start = 0;
        let spans = spec
            .layout()
            .iter()
            .map(|t| {
                let span = (start, t.numel());
                start += t.numel();
                span
            })
            .collect();
        Self { spec: spec.clone(), spans }
    }

    fn part<'a, T>(&self, params: &'a [T], i: usize) -> &'a [T] {
        let (s, n) = self.spans[i];
        &params[s..s + n]
    }

    fn parts_mut<'a, T>(&self, grad: &'a mut [T]) -> Vec<&'a mut [T]> {
        let mut out = Vec::with_capacity(self.spans.len());
        let mut rest = grad;
        for &(_, n) in &self.spans {
            let (head, tail) = rest.split_at_mut(n);
            out.push(head);
            rest = tail;
        }
        out
    }

    fn conv_forward<T: Real>(&self, params: &[T], input: &[T]) -> ConvTrace<T> {
        let s = self.spec.input_size;
        let [c1, c2] = self.spec.conv_channels;
        let (s2, s4) = (s / 2, s / 2 / 2);
        let mut a1 = vec![T::zero(); c1 * s * s];
        conv3x3_forward(input, (3, s, s), self.part(params, 0), self.part(params, 1), &mut a1);
        relu_inplace(&mut a1);
        let mut p1 = vec![T::zero(); c1 * s2 * s2];
        let mut arg1 = vec![0; p1.len()];
        maxpool_forward(&a1, (c1, s, s), &mut p1, &mut arg1);
        let mut a2 = vec![T::zero(); c2 * s2 * s2];
        conv3x3_forward(&p1, (c1, s2, s2), self.part(params, 2), self.part(params, 3), &mut a2);
        relu_inplace(&mut a2);
        let mut p2 = vec![T::zero(); c2 * s4 * s4];
        let mut arg2 = vec![0; p2.len()];
        maxpool_forward(&a2, (c2, s2, s2), &mut p2, &mut arg2);
        let mut h = vec![T::zero(); self.spec.hidden_units];
        dense_forward(&p2, self.part(params, 4), self.part(params, 5), &mut h);
        relu_inplace(&mut h);
        let mut logits = vec![T::zero(); self.spec.num_classes];
        dense_forward(&h, self.part(params, 6), self.part(params, 7), &mut logits);
        ConvTrace { a1, p1, arg1, a2, p2, arg2, h, logits }
    }

    pub fn logits<T: Real>(&self, params: &[T], input: &[T]) -> Vec<T> {
        match self.spec.architecture {
            Architecture::SoftmaxRegression => {
                let mut out = vec![T::zero(); self.spec.num_classes];
                dense_forward(input, self.part(params, 0), self.part(params, 1), &mut out);
                out
            }
            Architecture::TinyConvNet => self.conv_forward(params, input).logits,
        }
    }

    /// Adds the gradient of one sample's loss, scaled by `scale`, into `grad`.
    fn sample_grad<T: Real>(&self, params: &[T], input: &[T], label: usize, scale: f64, grad: &mut [T]) -> f64 {
        let g = self.parts_mut(grad);
        match self.spec.architecture {
            Architecture::SoftmaxRegression => {
                let logits = self.logits(params, input);
                let (loss, dz) = cross_entropy(&logits, label);
                let dz: Vec<T> = dz.iter().map(|&d| cast(d * scale)).collect();
                let mut g = g.into_iter();
                let (gw, gb) = (g.next().unwrap(), g.next().unwrap());
                dense_backward(input, self.part(params, 0), &dz, gw, gb, None);
                loss
            }
            Architecture::TinyConvNet => {
                let s = self.spec.input_size;
                let [c1, c2] = self.spec.conv_channels;
                let s2 = s / 2;
                let t = self.conv_forward(params, input);
                let (loss, dz) = cross_entropy(&t.logits, label);
                let dz: Vec<T> = dz.iter().map(|&d| cast(d * scale)).collect();
                let [gc1w, gc1b, gc2w, gc2b, gf1w, gf1b, gf2w, gf2b]: [&mut [T]; 8] =
                    g.try_into().unwrap_or_else(|_| unreachable!("eight tensors"));

                let mut dh = vec![T::zero(); t.h.len()];
                dense_backward(&t.h, self.part(params, 6), &dz, gf2w, gf2b, Some(&mut dh));
                for (d, &hv) in dh.iter_mut().zip(&t.h) {
                    if hv <= T::zero() {
                        *d = T::zero();
                    }
                }
                let mut dp2 = vec![T::zero(); t.p2.len()];
                dense_backward(&t.p2, self.part(params, 4), &dh, gf1w, gf1b, Some(&mut dp2));

                let mut da2 = vec![T::zero(); t.a2.len()];
                for (&d, &src) in dp2.iter().zip(&t.arg2) {
                    da2[src] += d;
                }
                for (d, &av) in da2.iter_mut().zip(&t.a2) {
                    if av <= T::zero() {
                        *d = T::zero();
                    }
                }
                let mut dp1 = vec![T::zero(); t.p1.len()];
                conv3x3_backward(&t.p1, (c1, s2, s2), self.part(params, 2), &da2, gc2w, gc2b, Some(&mut dp1));
                debug_assert_eq!(gc2b.len(), c2);

                let mut da1 = vec![T::zero(); t.a1.len()];
                for (&d, &src) in dp1.iter().zip(&t.arg1) {
                    da1[src] += d;
                }
                for (d, &av) in da1.iter_mut().zip(&t.a1) {
                    if av <= T::zero() {
                        *d = T::zero();
                    }
                }
                conv3x3_backward(input, (3, s, s), self.part(params, 0), &da1, gc1w, gc1b, None);
                loss
            }
        }
    }

    /// Mean cross-entropy over the batch; its gradient is accumulated into
    /// `grad` in `f64`.
    pub fn batch_loss_grad<T: Real>(&self, params: &[T], inputs: &[&[T]], labels: &[usize], grad: &mut [f64]) -> f64 {
        let scale = 1.0 / inputs.len() as f64;
        let mut sample = vec![T::zero(); params.len()];
        let mut loss = 0.0;
        for (x, &y) in inputs.iter().zip(labels) {
            sample.fill(T::zero());
            loss += self.sample_grad(params, x, y, scale, &mut sample);
            for (g, s) in grad.iter_mut().zip(&sample) {
                *g += s.to_f64().expect("finite gradient");
            }
        }
        loss * scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::SplitMix64;

    fn relu(v: f64) -> f64 {
        v.max(0.0)
    }

    /// Straight-line scalar TinyConvNet, indexing params by hand.
    fn scalar_tiny_convnet(spec: &ModelSpec, p: &[f64], x: &[f64]) -> Vec<f64> {
        let s = spec.input_size;
        let [c1, c2] = spec.conv_channels;
        let hid = spec.hidden_units;
        let nc = spec.num_classes;
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let w1 = &p[take(c1 * 27)];
        let b1 = &p[take(c1)];
        let w2 = &p[take(c2 * c1 * 9)];
        let b2 = &p[take(c2)];
        let s4 = s / 4;
        let w3 = &p[take(hid * c2 * s4 * s4)];
        let b3 = &p[take(hid)];
        let w4 = &p[take(nc * hid)];
        let b4 = &p[take(nc)];

        let conv = |inp: &dyn Fn(usize, isize, isize) -> f64, cin: usize, cout: usize, n: usize, w: &[f64], b: &[f64]| {
            let mut out = vec![0.0; cout * n * n];
            for o in 0..cout {
                for y in 0..n {
                    for xx in 0..n {
                        let mut acc = b[o];
                        for c in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    acc += w[((o * cin + c) * 3 + ky) * 3 + kx]
                                        * inp(c, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                }
                            }
                        }
                        out[(o * n + y) * n + xx] = relu(acc);
                    }
                }
            }
            out
        };
        let pool = |a: &[f64], c: usize, n: usize| {
            let m = n / 2;
            let mut out = vec![0.0; c * m * m];
            for ch in 0..c {
                for y in 0..m {
                    for xx in 0..m {
                        let at = |dy: usize, dx: usize| a[(ch * n + 2 * y + dy) * n + 2 * xx + dx];
                        out[(ch * m + y) * m + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    }
                }
            }
            out
        };
        let get = |buf: &[f64], n: usize| {
            let buf = buf.to_vec();
            move |c: usize, y: isize, xx: isize| {
                if y < 0 || xx < 0 || y >= n as isize || xx >= n as isize {
                    0.0
                } else {
                    buf[(c * n + y as usize) * n + xx as usize]
                }
            }
        };
        let a1 = conv(&get(x, s), 3, c1, s, w1, b1);
        let q1 = pool(&a1, c1, s);
        let a2 = conv(&get(&q1, s / 2), c1, c2, s / 2, w2, b2);
        let q2 = pool(&a2, c2, s / 2);
        let h: Vec<f64> =
            (0..hid).map(|i| relu(b3[i] + (0..q2.len()).map(|j| w3[i * q2.len() + j] * q2[j]).sum::<f64>())).collect();
        (0..nc).map(|i| b4[i] + (0..hid).map(|j| w4[i * hid + j] * h[j]).sum::<f64>()).collect()
    }

    #[test]
    fn tiny_convnet_matches_scalar_oracle() {
        let spec = ModelSpec { conv_channels: [2, 3], hidden_units: 5, ..ModelSpec::tiny_conv_net(8, 3) };
        let mut rng = SplitMix64::new(17);
        let params: Vec<f64> = init_params(&spec, 3)
            .unwrap()
            .values()
            .iter()
            .map(|&v| v as f64 * 0.5 + rng.uniform(-0.05, 0.05))
            .collect();
        let x: Vec<f64> = (0..spec.input_len()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let got = Net::new(&spec).logits(&params, &x);
        let want = scalar_tiny_convnet(&spec, &params, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}
