//! Forward and backward kernels over raw arrays. The tape and the
//! standalone ops both call into these.

use serde::{Deserialize, Serialize};

use super::{NdArray, NnError, Real};

/// Padding rule on the frequency axis. Time is always zero-padded to keep
/// its extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FreqPadding {
    #[default]
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub time: usize,
    pub freq_in: usize,
    pub freq_out: usize,
    pub kt: usize,
    pub kf: usize,
    pub pt: usize,
    pub pf: usize,
}

impl ConvGeom {
    pub fn new<F: Real>(
        x: &NdArray<F>,
        w: &NdArray<F>,
        bias: &NdArray<F>,
        pad: FreqPadding,
    ) -> Result<Self, NnError> {
        let (batch, in_ch, time, freq_in) = x.dims4()?;
        let (out_ch, w_in, kt, kf) = w.dims4()?;
        if w_in != in_ch {
            return Err(NnError::Shape(format!(
                "filter expects {w_in} input channels, input has {in_ch}"
            )));
        }
        if bias.shape() != [out_ch] {
            return Err(NnError::Shape(format!(
                "bias shape {:?} does not match {out_ch} output channels",
                bias.shape()
            )));
        }
        if kt % 2 == 0 {
            return Err(NnError::Shape(format!("time kernel {kt} must be odd")));
        }
        let (freq_out, pf) = match pad {
            FreqPadding::Same => {
                if kf % 2 == 0 {
                    return Err(NnError::Shape(format!(
                        "same padding needs an odd frequency kernel, got {kf}"
                    )));
                }
                (freq_in, kf / 2)
            }
            FreqPadding::Valid => {
                if kf > freq_in {
                    return Err(NnError::Shape(format!(
                        "frequency kernel {kf} exceeds input extent {freq_in}"
                    )));
                }
                (freq_in - kf + 1, 0)
            }
        };
        Ok(Self {
            batch,
            in_ch,
            out_ch,
            time,
            freq_in,
            freq_out,
            kt,
            kf,
            pt: kt / 2,
            pf,
        })
    }

    /// Output-frequency range `[lo, hi)` touched by kernel column `kf`.
    #[inline]
    fn freq_range(&self, kf: usize) -> (usize, usize) {
        let lo = self.pf.saturating_sub(kf);
        let hi = self.freq_out.min(self.freq_in + self.pf - kf);
        (lo, hi.max(lo))
    }

    #[inline]
    fn src_time(&self, t: usize, kt: usize) -> Option<usize> {
        let ti = (t + kt).checked_sub(self.pt)?;
        (ti < self.time).then_some(ti)
    }
}

/// Unfolds one batch item into `(in_ch·kt·kf) × (time·freq_out)` columns.
fn im2col<F: Real>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let plane = g.time * g.freq_out;
    for c in 0..g.in_ch {
        let xc = &x[c * g.time * g.freq_in..][..g.time * g.freq_in];
        for kt in 0..g.kt {
            for kf in 0..g.kf {
                let row = &mut cols[((c * g.kt + kt) * g.kf + kf) * plane..][..plane];
                row.fill(F::zero());
                let (lo, hi) = g.freq_range(kf);
                let (slo, shi) = (lo + kf - g.pf, hi + kf - g.pf);
                for t in 0..g.time {
                    let Some(ti) = g.src_time(t, kt) else { continue };
                    row[t * g.freq_out + lo..t * g.freq_out + hi]
                        .copy_from_slice(&xc[ti * g.freq_in + slo..ti * g.freq_in + shi]);
                }
            }
        }
    }
}

/// Adds the columns back onto one batch item's input gradient.
fn col2im<F: Real>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let plane = g.time * g.freq_out;
    for c in 0..g.in_ch {
        let dxc = &mut dx[c * g.time * g.freq_in..][..g.time * g.freq_in];
        for kt in 0..g.kt {
            for kf in 0..g.kf {
                let row = &cols[((c * g.kt + kt) * g.kf + kf) * plane..][..plane];
                let (lo, hi) = g.freq_range(kf);
                let (slo, shi) = (lo + kf - g.pf, hi + kf - g.pf);
                for t in 0..g.time {
                    let Some(ti) = g.src_time(t, kt) else { continue };
                    let src = &row[t * g.freq_out + lo..t * g.freq_out + hi];
                    for (d, &v) in dxc[ti * g.freq_in + slo..ti * g.freq_in + shi].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Eight-lane dot product; the fixed lane order keeps results reproducible.
#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

pub(crate) fn conv2d_forward<F: Real>(
    x: &NdArray<F>,
    w: &NdArray<F>,
    bias: &NdArray<F>,
    pad: FreqPadding,
) -> Result<NdArray<F>, NnError> {
    let g = ConvGeom::new(x, w, bias, pad)?;
    let plane = g.time * g.freq_out;
    let ck = g.in_ch * g.kt * g.kf;
    let mut out = NdArray::zeros(&[g.batch, g.out_ch, g.time, g.freq_out]);
    let mut cols = vec![F::zero(); ck * plane];
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let xstride = g.in_ch * g.time * g.freq_in;
    for (b, ob) in out.data_mut().chunks_mut(g.out_ch * plane).enumerate() {
        im2col(&g, &xd[b * xstride..(b + 1) * xstride], &mut cols);
        for (o, orow) in ob.chunks_mut(plane).enumerate() {
            orow.fill(bd[o]);
            for (k, &wv) in wd[o * ck..(o + 1) * ck].iter().enumerate() {
                axpy(wv, &cols[k * plane..(k + 1) * plane], orow);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to input, filters and bias.
/// `None` slots are skipped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<F: Real>(
    x: &NdArray<F>,
    w: &NdArray<F>,
    bias: &NdArray<F>,
    pad: FreqPadding,
    dy: &NdArray<F>,
    mut dx: Option<&mut NdArray<F>>,
    mut dw: Option<&mut NdArray<F>>,
    db: Option<&mut NdArray<F>>,
) -> Result<(), NnError> {
    let g = ConvGeom::new(x, w, bias, pad)?;
    let plane = g.time * g.freq_out;
    let ck = g.in_ch * g.kt * g.kf;
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    if let Some(db) = db {
        let dbd = db.data_mut();
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                let base = (b * g.out_ch + o) * plane;
                dbd[o] += dyd[base..base + plane].iter().copied().sum();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return Ok(());
    }
    let xstride = g.in_ch * g.time * g.freq_in;
    let mut cols = vec![F::zero(); ck * plane];
    for b in 0..g.batch {
        let dyb = &dyd[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&g, &xd[b * xstride..(b + 1) * xstride], &mut cols);
            let dwd = dw.data_mut();
            for o in 0..g.out_ch {
                let dyrow = &dyb[o * plane..(o + 1) * plane];
                for k in 0..ck {
                    dwd[o * ck + k] += dot(dyrow, &cols[k * plane..(k + 1) * plane]);
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            cols.fill(F::zero());
            for o in 0..g.out_ch {
                let dyrow = &dyb[o * plane..(o + 1) * plane];
                for k in 0..ck {
                    axpy(wd[o * ck + k], dyrow, &mut cols[k * plane..(k + 1) * plane]);
                }
            }
            col2im(&g, &cols, &mut dx.data_mut()[b * xstride..(b + 1) * xstride]);
        }
    }
    Ok(())
}

/// Max pooling over the last (frequency) axis with window = stride = `pool`.
/// A trailing partial window pools over the values it has.
pub(crate) fn max_pool_freq<F: Real>(
    x: &NdArray<F>,
    pool: usize,
) -> Result<(NdArray<F>, Vec<usize>), NnError> {
    if pool < 1 {
        return Err(NnError::Config("pool extent must be at least 1".into()));
    }
    let (b, c, t, f) = x.dims4()?;
    let fo = f.div_ceil(pool);
    let mut out = NdArray::zeros(&[b, c, t, fo]);
    let mut argmax = vec![0usize; b * c * t * fo];
    let xd = x.data();
    for (row, (orow, arow)) in out
        .data_mut()
        .chunks_mut(fo)
        .zip(argmax.chunks_mut(fo))
        .enumerate()
    {
        let base = row * f;
        for j in 0..fo {
            let start = base + j * pool;
            let end = (start + pool).min(base + f);
            let mut best = start;
            for i in start + 1..end {
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            orow[j] = xd[best];
            arow[j] = best;
        }
    }
    Ok((out, argmax))
}

pub(crate) fn softmax_rows<F: Real>(x: &NdArray<F>) -> Result<NdArray<F>, NnError> {
    let (_, cols) = x.dims2()?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut s = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    Ok(out)
}

pub(crate) fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn matmul<F: Real>(a: &NdArray<F>, b: &NdArray<F>) -> Result<NdArray<F>, NnError> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(NnError::Shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = NdArray::zeros(&[n, m]);
    let (ad, bd) = (a.data(), b.data());
    for (i, orow) in out.data_mut().chunks_mut(m).enumerate() {
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}
