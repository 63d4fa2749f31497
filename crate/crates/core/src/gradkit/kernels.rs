//! Lowering helpers shared by the convolution operators.

use super::Real;

/// Geometry of a sliding window over a `c x h x w` image producing an
/// `ho x wo` grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn source(&self, o: usize, kk: usize, size: usize) -> Option<usize> {
        let s = (o * self.stride + kk) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < size).then_some(s as usize)
    }

    /// Unfolds `image` into a `(c k k) x (ho wo)` matrix.
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let n = self.cols();
        for ci in 0..self.c {
            let plane = &image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * n;
                    let out = &mut cols[row..row + n];
                    for oy in 0..self.ho {
                        let dst = &mut out[oy * self.wo..(oy + 1) * self.wo];
                        match self.source(oy, ky, self.h) {
                            None => dst.fill(T::zero()),
                            Some(sy) => {
                                let src = &plane[sy * self.w..(sy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.source(ox, kx, self.w) {
                                        Some(sx) => src[sx],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatter-adds columns into `image`.
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let n = self.cols();
        for ci in 0..self.c {
            let plane = &mut image[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((ci * self.k + ky) * self.k + kx) * n;
                    let src = &cols[row..row + n];
                    for oy in 0..self.ho {
                        let Some(sy) = self.source(oy, ky, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(sx) = self.source(ox, kx, self.w) {
                                plane[sy * self.w + sx] = plane[sy * self.w + sx] + src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_out_size(size: usize, stride: usize) -> usize {
    (size + 2 - 3) / stride + 1
}
