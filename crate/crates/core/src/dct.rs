//! Orthonormal 8×8 type-II DCT.
//!
//! `DCT(u, v) = 1/sqrt(2N) · C(u) C(v) · Σx Σy p(x, y) cos((2x+1)uπ/2N) cos((2y+1)vπ/2N)`
//! with `N = 8` and `C(0) = 1/√2`, `C(k>0) = 1`. Blocks are row-major with
//! `x` the row index, so coefficient `(u, v)` lives at `u * 8 + v`.

use core::f64::consts::PI;

pub const N: usize = 8;

pub type Block = [f64; N * N];

/// Precomputed separable basis: `basis[u][x] = C(u)/2 · cos((2x+1)uπ/16)`.
#[derive(Clone, Debug)]
pub struct Dct8 {
    basis: [[f64; N]; N],
}

impl Default for Dct8 {
    fn default() -> Self {
        Self::new()
    }
}

impl Dct8 {
    pub fn new() -> Self {
        let mut basis = [[0f64; N]; N];
        // 1/sqrt(2N) split evenly over the two separable passes.
        let scale = libm::sqrt(1.0 / libm::sqrt(2.0 * N as f64));
        for (u, row) in basis.iter_mut().enumerate() {
            let cu = if u == 0 { core::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            for (x, b) in row.iter_mut().enumerate() {
                *b = scale * cu * libm::cos((2 * x + 1) as f64 * u as f64 * PI / (2 * N) as f64);
            }
        }
        Self { basis }
    }

    pub fn forward(&self, block: &Block) -> Block {
        let b = &self.basis;
        let mut tmp = [0f64; N * N];
        // rows: tmp[x][v] = Σy p[x][y] b[v][y]
        for x in 0..N {
            for v in 0..N {
                let mut s = 0.0;
                for y in 0..N {
                    s += block[x * N + y] * b[v][y];
                }
                tmp[x * N + v] = s;
            }
        }
        let mut out = [0f64; N * N];
        for u in 0..N {
            for v in 0..N {
                let mut s = 0.0;
                for x in 0..N {
                    s += b[u][x] * tmp[x * N + v];
                }
                out[u * N + v] = s;
            }
        }
        // DC is the block sum over 8; this form is exact for integer blocks.
        out[0] = block.iter().sum::<f64>() / N as f64;
        out
    }

    pub fn inverse(&self, coef: &Block) -> Block {
        let b = &self.basis;
        let mut tmp = [0f64; N * N];
        // tmp[x][v] = Σu b[u][x] c[u][v]
        for x in 0..N {
            for v in 0..N {
                let mut s = 0.0;
                for u in 0..N {
                    s += b[u][x] * coef[u * N + v];
                }
                tmp[x * N + v] = s;
            }
        }
        let mut out = [0f64; N * N];
        for x in 0..N {
            for y in 0..N {
                let mut s = 0.0;
                for v in 0..N {
                    s += tmp[x * N + v] * b[v][y];
                }
                out[x * N + y] = s;
            }
        }
        out
    }
}

pub fn dct8x8(block: &Block) -> Block {
    Dct8::new().forward(block)
}

pub fn idct8x8(coef: &Block) -> Block {
    Dct8::new().inverse(coef)
}
