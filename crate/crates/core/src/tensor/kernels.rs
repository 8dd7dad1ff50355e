//! Raw NHWC kernels. Everything here works on flat slices; shape checking
//! happens in the tape layer.

use crate::error::{Error, Result};

use super::Real;

/// Theano-style convolution border modes. All convolutions have stride one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// Pads `k - 1` on each side; output grows by `k - 1`.
    Full,
    /// Pads `(k - 1) / 2` on each side; output keeps the input extent. Odd kernels only.
    Half,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

impl ConvMode {
    pub fn name(self) -> &'static str {
        match self {
            ConvMode::Full => "full",
            ConvMode::Half => "half",
            ConvMode::Valid => "valid",
        }
    }
}

impl std::str::FromStr for ConvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(ConvMode::Full),
            "half" | "same" => Ok(ConvMode::Half),
            "valid" => Ok(ConvMode::Valid),
            other => Err(Error::config(format!("unknown convolution mode `{other}`"))),
        }
    }
}

pub fn conv_padding(mode: ConvMode, k: usize) -> Result<usize> {
    match mode {
        ConvMode::Full => Ok(k - 1),
        ConvMode::Valid => Ok(0),
        ConvMode::Half if k % 2 == 1 => Ok((k - 1) / 2),
        ConvMode::Half => Err(Error::dim(format!("half convolution needs an odd kernel, got {k}"))),
    }
}

/// Output extent of a stride-one convolution along one axis.
pub fn conv_output_extent(mode: ConvMode, input: usize, k: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::dim("kernel extent must be positive"));
    }
    let pad = conv_padding(mode, k)?;
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::dim(format!("kernel {k} larger than {} input extent {input}", mode.name())));
    }
    Ok(padded - k + 1)
}

/// Input extent recovered by the adjoint of a convolution whose output has
/// extent `output`.
pub fn transpose_output_extent(mode: ConvMode, output: usize, k: usize) -> Result<usize> {
    let pad = conv_padding(mode, k)?;
    let extent = (output + k - 1).checked_sub(2 * pad).filter(|&e| e > 0);
    extent.ok_or_else(|| Error::dim(format!("extent {output} cannot be produced by a {} {k}-kernel", mode.name())))
}

/// Geometry of one stride-one convolution over an NHWC batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn from_input(n: usize, h: usize, w: usize, cin: usize, cout: usize, kh: usize, kw: usize, mode: ConvMode) -> Result<Self> {
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            pad_h: conv_padding(mode, kh)?,
            pad_w: conv_padding(mode, kw)?,
            ho: conv_output_extent(mode, h, kh)?,
            wo: conv_output_extent(mode, w, kw)?,
        })
    }

    pub fn from_output(n: usize, ho: usize, wo: usize, cin: usize, cout: usize, kh: usize, kw: usize, mode: ConvMode) -> Result<Self> {
        let h = transpose_output_extent(mode, ho, kh)?;
        let w = transpose_output_extent(mode, wo, kw)?;
        let geom = Self::from_input(n, h, w, cin, cout, kh, kw, mode)?;
        debug_assert_eq!((geom.ho, geom.wo), (ho, wo));
        Ok(geom)
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn input_len(&self) -> usize {
        self.n * self.h * self.w * self.cin
    }

    pub fn output_len(&self) -> usize {
        self.rows() * self.cout
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut row = 0;
    for b in 0..g.n {
        let img = &x[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for dy in 0..g.kh {
                    let iy = (oy + dy) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.kw {
                        let ix = (ox + dx) as isize - g.pad_w as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (dy * g.kw + dx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.n {
        let img = &mut x[b * g.h * g.w * g.cin..(b + 1) * g.h * g.w * g.cin];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &cols[row * patch..(row + 1) * patch];
                for dy in 0..g.kh {
                    let iy = (oy + dy) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.kw {
                        let ix = (ox + dx) as isize - g.pad_w as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (dy * g.kw + dx) * g.cin;
                        for (d, s) in img[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                            *d = *d + *s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// out[P, Cout] = im2col(x)[P, K] · filtersᵀ.
pub(crate) fn conv_forward<T: Real>(x: &[T], filters: &[T], g: &ConvGeom) -> Vec<T> {
    assert_eq!(x.len(), g.input_len());
    assert_eq!(filters.len(), g.cout * g.patch());
    let (p, k) = (g.rows(), g.patch());
    let mut out = vec![T::zero(); g.output_len()];
    if p == 0 {
        return out;
    }
    let one_by_one = g.kh == 1 && g.kw == 1 && g.pad_h == 0 && g.pad_w == 0;
    let cols_owned;
    let cols: &[T] = if one_by_one {
        x
    } else {
        cols_owned = im2col(x, g);
        &cols_owned
    };
    // SAFETY: extents match the buffer lengths asserted above.
    unsafe {
        T::gemm(
            p,
            k,
            g.cout,
            T::one(),
            cols.as_ptr(),
            k as isize,
            1,
            filters.as_ptr(),
            1,
            k as isize,
            T::zero(),
            out.as_mut_ptr(),
            g.cout as isize,
            1,
        );
    }
    out
}

/// Adjoint of [`conv_forward`] with respect to its input: col2im(dout · filters).
pub(crate) fn conv_backward_input<T: Real>(dout: &[T], filters: &[T], g: &ConvGeom) -> Vec<T> {
    assert_eq!(dout.len(), g.output_len());
    assert_eq!(filters.len(), g.cout * g.patch());
    let (p, k) = (g.rows(), g.patch());
    let mut dx = vec![T::zero(); g.input_len()];
    if p == 0 {
        return dx;
    }
    let one_by_one = g.kh == 1 && g.kw == 1 && g.pad_h == 0 && g.pad_w == 0;
    let mut dcols = if one_by_one { Vec::new() } else { vec![T::zero(); p * k] };
    let target: &mut [T] = if one_by_one { &mut dx } else { &mut dcols };
    // SAFETY: extents match the buffer lengths asserted above.
    unsafe {
        T::gemm(
            p,
            g.cout,
            k,
            T::one(),
            dout.as_ptr(),
            g.cout as isize,
            1,
            filters.as_ptr(),
            k as isize,
            1,
            T::zero(),
            target.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    if !one_by_one {
        col2im_add(&dcols, g, &mut dx);
    }
    dx
}

/// Gradient of [`conv_forward`] with respect to the filters: doutᵀ · im2col(x).
pub(crate) fn conv_backward_filter<T: Real>(dout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    assert_eq!(dout.len(), g.output_len());
    assert_eq!(x.len(), g.input_len());
    let (p, k) = (g.rows(), g.patch());
    let mut dw = vec![T::zero(); g.cout * k];
    if p == 0 {
        return dw;
    }
    let one_by_one = g.kh == 1 && g.kw == 1 && g.pad_h == 0 && g.pad_w == 0;
    let cols_owned;
    let cols: &[T] = if one_by_one {
        x
    } else {
        cols_owned = im2col(x, g);
        &cols_owned
    };
    // SAFETY: extents match the buffer lengths asserted above.
    unsafe {
        T::gemm(
            g.cout,
            p,
            k,
            T::one(),
            dout.as_ptr(),
            1,
            g.cout as isize,
            cols.as_ptr(),
            k as isize,
            1,
            T::zero(),
            dw.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    dw
}

/// Position of the maximum inside a 2×2 pooling block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Switch {
    UpperLeft = 0,
    UpperRight = 1,
    LowerLeft = 2,
    LowerRight = 3,
}

impl Switch {
    pub const ALL: [Switch; 4] = [Switch::UpperLeft, Switch::UpperRight, Switch::LowerLeft, Switch::LowerRight];

    /// (row, column) offset inside the block.
    pub fn offset(self) -> (usize, usize) {
        match self {
            Switch::UpperLeft => (0, 0),
            Switch::UpperRight => (0, 1),
            Switch::LowerLeft => (1, 0),
            Switch::LowerRight => (1, 1),
        }
    }

    /// Position in [`Switch::ALL`].
    pub fn index(self) -> usize {
        let (r, c) = self.offset();
        2 * r + c
    }

    pub fn from_index(i: usize) -> Option<Switch> {
        Switch::ALL.get(i).copied()
    }

    pub fn abbrev(self) -> &'static str {
        match self {
            Switch::UpperLeft => "UL",
            Switch::UpperRight => "UR",
            Switch::LowerLeft => "LL",
            Switch::LowerRight => "LR",
        }
    }
}

/// Flat index of the input element at block offset `s` for pooled cell
/// `(b, oy, ox, ch)`.
#[inline]
fn block_index(b: usize, oy: usize, ox: usize, ch: usize, s: Switch, h: usize, w: usize, c: usize) -> usize {
    let (dy, dx) = s.offset();
    ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch
}

pub(crate) fn maxpool2x2<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize) -> (Vec<T>, Vec<Switch>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut switches = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best = Switch::UpperLeft;
                    let mut best_v = x[block_index(b, oy, ox, ch, best, h, w, c)];
                    for s in &Switch::ALL[1..] {
                        let v = x[block_index(b, oy, ox, ch, *s, h, w, c)];
                        if v > best_v {
                            best = *s;
                            best_v = v;
                        }
                    }
                    out.push(best_v);
                    switches.push(best);
                }
            }
        }
    }
    (out, switches)
}

/// Places each pooled value at its switch position; zeros elsewhere. Also the
/// adjoint of max-pooling with fixed switches.
pub(crate) fn unpool_switch<T: Real>(z: &[T], switches: &[Switch], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut x = vec![T::zero(); n * h * w * c];
    let mut i = 0;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    x[block_index(b, oy, ox, ch, switches[i], h, w, c)] = z[i];
                    i += 1;
                }
            }
        }
    }
    x
}

/// Reads each block's switch position; adjoint of [`unpool_switch`].
pub(crate) fn gather_switch<T: Real>(x: &[T], switches: &[Switch], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut i = 0;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    out.push(x[block_index(b, oy, ox, ch, switches[i], h, w, c)]);
                    i += 1;
                }
            }
        }
    }
    out
}

/// Replicates every value into a k×k block.
pub(crate) fn upsample_nn<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let (hu, wu) = (h * k, w * k);
    let mut out = vec![T::zero(); n * hu * wu * c];
    for b in 0..n {
        for y in 0..hu {
            for xx in 0..wu {
                let src = ((b * h + y / k) * w + xx / k) * c;
                let dst = ((b * hu + y) * wu + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Sums every k×k block, the adjoint of [`upsample_nn`]. `h`, `w` are the
/// extents of `x` (the fine grid).
pub(crate) fn block_sum<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((b * h + y) * w + xx) * c;
                let dst = ((b * ho + y / k) * wo + xx / k) * c;
                for ch in 0..c {
                    out[dst + ch] = out[dst + ch] + x[src + ch];
                }
            }
        }
    }
    out
}
