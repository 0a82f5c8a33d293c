//! Raw numeric kernels shared by the tape and by inference-only paths.
//!
//! All loops use a fixed iteration order so results are bitwise
//! reproducible. Spatial tensors are `[channels, height, width]` row-major.

/// Planes embedded in a zero border of width one, so every 3x3 tap is a
/// constant flat offset and each kernel loop runs over one contiguous span.
///
/// Interior pixel `(y, x)` sits at `(y + 1) * stride + x + 1`. Loops run over
/// `lo..hi`, the span from the first to the last interior pixel; border slots
/// inside that span collect junk that [`Padded::interior`] drops. Terms that
/// read the zero border add a signed zero, so per-element accumulation order
/// and values match a loop over valid taps only.
struct Padded {
    h: usize,
    w: usize,
    stride: usize,
    area: usize,
}

impl Padded {
    fn new(h: usize, w: usize) -> Self {
        let stride = w + 2;
        Self { h, w, stride, area: (h + 2) * stride }
    }

    fn lo(&self) -> usize {
        self.stride + 1
    }

    fn hi(&self) -> usize {
        self.h * self.stride + self.w + 1
    }

    /// Flat offset of tap `(dy, dx)` relative to the output pixel.
    fn offset(&self, dy: usize, dx: usize) -> isize {
        (dy as isize - 1) * self.stride as isize + dx as isize - 1
    }

    /// Offsets of the nine taps in kernel order, shifted so the smallest is zero.
    fn tap_starts(&self, sign: isize) -> [usize; 9] {
        let mut starts = [0usize; 9];
        for (d, s) in starts.iter_mut().enumerate() {
            *s = (self.lo() as isize + sign * self.offset(d / 3, d % 3)) as usize;
        }
        starts
    }

    fn embed(&self, planes: &[f64], count: usize) -> Vec<f64> {
        let plane = self.h * self.w;
        let mut out = vec![0.0; count * self.area];
        for c in 0..count {
            for y in 0..self.h {
                let src = &planes[c * plane + y * self.w..c * plane + (y + 1) * self.w];
                let at = c * self.area + (y + 1) * self.stride + 1;
                out[at..at + self.w].copy_from_slice(src);
            }
        }
        out
    }

    fn interior(&self, padded: &[f64], dst: &mut [f64]) {
        for y in 0..self.h {
            let at = (y + 1) * self.stride + 1;
            dst[y * self.w..(y + 1) * self.w].copy_from_slice(&padded[at..at + self.w]);
        }
    }

    /// `dst[p] += taps[0] * src[starts[0] + p - lo] + ... + taps[8] * src[..]`
    /// over `lo..hi`, added left to right.
    #[inline]
    fn nine_tap(&self, dst: &mut [f64], src: &[f64], taps: &[f64], starts: &[usize; 9]) {
        let (lo, hi) = (self.lo(), self.hi());
        let n = hi - lo;
        let s: [&[f64]; 9] = std::array::from_fn(|d| &src[starts[d]..starts[d] + n]);
        let t: [f64; 9] = std::array::from_fn(|d| taps[d]);
        for (p, a) in dst[lo..hi].iter_mut().enumerate() {
            let mut v = *a;
            v += t[0] * s[0][p];
            v += t[1] * s[1][p];
            v += t[2] * s[2][p];
            v += t[3] * s[3][p];
            v += t[4] * s[4][p];
            v += t[5] * s[5][p];
            v += t[6] * s[6][p];
            v += t[7] * s[7][p];
            v += t[8] * s[8][p];
            *a = v;
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1.
///
/// `input` is `[cin, h, w]`, `kernel` is `[cout, cin, 3, 3]`, `bias` is `[cout]`.
pub fn conv2d(input: &[f64], cin: usize, h: usize, w: usize, kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let plane = h * w;
    let pad = Padded::new(h, w);
    let src = pad.embed(input, cin);
    let starts = pad.tap_starts(1);
    let mut acc = vec![0.0; pad.area];
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        acc.fill(bias[o]);
        for i in 0..cin {
            let taps = &kernel[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            pad.nine_tap(&mut acc, &src[i * pad.area..(i + 1) * pad.area], taps, &starts);
        }
        pad.interior(&acc, &mut out[o * plane..(o + 1) * plane]);
    }
    out
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(grad_out: &[f64], cin: usize, h: usize, w: usize, kernel: &[f64], cout: usize) -> Vec<f64> {
    let plane = h * w;
    let pad = Padded::new(h, w);
    let g = pad.embed(grad_out, cout);
    let starts = pad.tap_starts(-1);
    let mut acc = vec![0.0; pad.area];
    let mut gin = vec![0.0; cin * plane];
    for i in 0..cin {
        acc.fill(0.0);
        for o in 0..cout {
            let taps = &kernel[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            pad.nine_tap(&mut acc, &g[o * pad.area..(o + 1) * pad.area], taps, &starts);
        }
        pad.interior(&acc, &mut gin[i * plane..(i + 1) * plane]);
    }
    gin
}

/// Gradients of [`conv2d`] with respect to kernel and bias.
pub fn conv2d_grad_params(grad_out: &[f64], input: &[f64], cin: usize, h: usize, w: usize, cout: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let pad = Padded::new(h, w);
    let src = pad.embed(input, cin);
    let starts = pad.tap_starts(1);
    let (lo, hi) = (pad.lo(), pad.hi());
    // Pixel-major copy of the output gradient over `lo..hi`; border slots stay zero.
    let mut g_t = vec![0.0; (hi - lo) * cout];
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let p = (y + 1) * pad.stride + x + 1 - lo;
                g_t[p * cout + o] = grad_out[o * plane + y * w + x];
            }
        }
    }
    let mut gk = vec![0.0; cout * cin * 9];
    let mut acc = vec![0.0; 9 * cout];
    for i in 0..cin {
        let s = &src[i * pad.area..(i + 1) * pad.area];
        acc.fill(0.0);
        // Each (tap, output channel) sum runs over pixels in row-major order.
        for (p, gp) in g_t.chunks_exact(cout).enumerate() {
            for (d, row) in acc.chunks_exact_mut(cout).enumerate() {
                let sv = s[starts[d] + p];
                for (a, g) in row.iter_mut().zip(gp) {
                    *a += g * sv;
                }
            }
        }
        for o in 0..cout {
            for d in 0..9 {
                gk[(o * cin + i) * 9 + d] = acc[d * cout + o];
            }
        }
    }
    let gb = (0..cout).map(|o| grad_out[o * plane..(o + 1) * plane].iter().sum()).collect();
    (gk, gb)
}

/// Per-pixel affine map across channels: `out[o,p] = bias[o] + sum_i weight[o,i] * input[i,p]`.
pub fn pointwise(input: &[f64], cin: usize, plane: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for i in 0..cin {
            let wv = weight[o * cin + i];
            let src = &input[i * plane..(i + 1) * plane];
            for (a, b) in dst.iter_mut().zip(src) {
                *a += wv * b;
            }
        }
    }
    out
}

pub fn pointwise_grad_input(grad_out: &[f64], cin: usize, plane: usize, weight: &[f64], cout: usize) -> Vec<f64> {
    let mut gin = vec![0.0; cin * plane];
    for o in 0..cout {
        let g = &grad_out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let wv = weight[o * cin + i];
            let dst = &mut gin[i * plane..(i + 1) * plane];
            for (a, b) in dst.iter_mut().zip(g) {
                *a += wv * b;
            }
        }
    }
    gin
}

pub fn pointwise_grad_params(grad_out: &[f64], input: &[f64], cin: usize, plane: usize, cout: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; cout * cin];
    let mut gb = vec![0.0; cout];
    for o in 0..cout {
        let g = &grad_out[o * plane..(o + 1) * plane];
        gb[o] = g.iter().sum();
        for i in 0..cin {
            let src = &input[i * plane..(i + 1) * plane];
            gw[o * cin + i] = g.iter().zip(src).map(|(a, b)| a * b).sum();
        }
    }
    (gw, gb)
}

/// Dense layer `weight · input + bias`, `weight` is `[m, n]`.
pub fn affine(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weight[o * n..(o + 1) * n];
            row.iter().zip(input).fold(b, |acc, (w, x)| acc + w * x)
        })
        .collect()
}

/// Numerically stable softmax of one logit column.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-pixel argmax over the class axis of `[classes, plane]` logits.
/// Ties resolve to the lowest class index.
pub fn argmax_pixels(logits: &[f64], classes: usize, plane: usize) -> Vec<u8> {
    (0..plane)
        .map(|p| {
            let mut best = 0;
            let mut best_v = logits[p];
            for c in 1..classes {
                let v = logits[c * plane + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
