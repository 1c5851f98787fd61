//! Batched second-order forward pass of the network and the matching reverse
//! sweep for parameter gradients.
//!
//! For every sample the network is evaluated once while propagating a full
//! tangent bundle: the value, m directional derivatives and a selected set of
//! second-derivative pairs. Per layer the bundle components form extra rows
//! ("slabs") of one large matrix, so the dominant cost is three dense
//! matrix products against the hidden weights per step. All loops reduce in a
//! fixed order independent of the worker count, which keeps training
//! bit-reproducible under any parallelism.

use rayon::prelude::*;

use crate::diff::sigmoid_f64;
use crate::dynamics::Jet;
use crate::error::{Error, Result};
use crate::linalg::tri_len;
use crate::net::Params;

/// Second-derivative pairs (p <= q) propagated alongside the gradient.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub m: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl PairSet {
    /// Every pair of the packed upper triangle, in packed order.
    pub fn full(m: usize) -> Self {
        let mut pairs = Vec::with_capacity(tri_len(m));
        for p in 0..m {
            for q in p..m {
                pairs.push((p, q));
            }
        }
        PairSet { m, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Rows processed per parallel task; fixed so results do not depend on the
/// number of workers.
const ROW_CHUNK: usize = 64;

/// c[r, :] += sum_k a[r, k] * b[k, :] with `b` given as k_dim x n_dim
/// row-major. Each output row is a fixed-order sum; the k loop is unrolled
/// four wide to keep the output row in registers longer.
fn gemm_add(c: &mut [f64], a: &[f64], b: &[f64], rows: usize, k_dim: usize, n_dim: usize) {
    debug_assert_eq!(c.len(), rows * n_dim);
    debug_assert_eq!(a.len(), rows * k_dim);
    debug_assert_eq!(b.len(), k_dim * n_dim);
    c.par_chunks_mut(ROW_CHUNK * n_dim)
        .zip(a.par_chunks(ROW_CHUNK * k_dim))
        .for_each(|(c_chunk, a_chunk)| {
            for (c_row, a_row) in c_chunk.chunks_mut(n_dim).zip(a_chunk.chunks(k_dim)) {
                let c_row = &mut c_row[..n_dim];
                let mut k = 0;
                while k + 4 <= k_dim {
                    let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
                    let b0 = &b[k * n_dim..][..n_dim];
                    let b1 = &b[(k + 1) * n_dim..][..n_dim];
                    let b2 = &b[(k + 2) * n_dim..][..n_dim];
                    let b3 = &b[(k + 3) * n_dim..][..n_dim];
                    for j in 0..n_dim {
                        c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                    }
                    k += 4;
                }
                while k < k_dim {
                    let aik = a_row[k];
                    let b_row = &b[k * n_dim..][..n_dim];
                    for (cj, bj) in c_row.iter_mut().zip(b_row) {
                        *cj += aik * bj;
                    }
                    k += 1;
                }
            }
        });
}

/// w[o, :] += sum_r a[r, o] * u[r, :], the transposed accumulation used for
/// weight gradients. The destination block stays cache-resident while the
/// large operands stream through once per fixed-width block; sums run in row
/// order, so the result is independent of the worker count.
fn accumulate_outer(w: &mut [f64], a: &[f64], u: &[f64], rows: usize, o_dim: usize, n_dim: usize) {
    debug_assert_eq!(w.len(), o_dim * n_dim);
    const O_CHUNK: usize = 32;
    w.par_chunks_mut(O_CHUNK * n_dim)
        .enumerate()
        .for_each(|(chunk_idx, w_chunk)| {
            let o0 = chunk_idx * O_CHUNK;
            let o_count = w_chunk.len() / n_dim;
            for r in 0..rows {
                let a_row = &a[r * o_dim + o0..r * o_dim + o0 + o_count];
                let u_row = &u[r * n_dim..][..n_dim];
                for (oo, &coef) in a_row.iter().enumerate() {
                    if coef != 0.0 {
                        let w_row = &mut w_chunk[oo * n_dim..][..n_dim];
                        for (wj, uj) in w_row.iter_mut().zip(u_row) {
                            *wj += coef * uj;
                        }
                    }
                }
            }
        });
}

/// Batched evaluator for one network layout and pair selection. Buffers are
/// retained across calls; the same instance serves training minibatches and
/// single-state jets.
pub struct BatchNet {
    m: usize,
    d1: usize,
    d2: usize,
    pairs: PairSet,
    batch: usize,
    // forward state
    x: Vec<f64>,
    z1v: Vec<f64>,
    s1p: Vec<f64>,
    u1: Vec<f64>,
    z2: Vec<f64>,
    s2p: Vec<f64>,
    u2: Vec<f64>,
    w2t: Vec<f64>,
    lv: Vec<f64>,
    lg: Vec<f64>,
    lh: Vec<f64>,
    // backward scratch
    zb2: Vec<f64>,
    ub1: Vec<f64>,
    zb1v: Vec<f64>,
}

impl BatchNet {
    pub fn new(layout: &[usize], pairs: PairSet) -> Result<Self> {
        if layout.len() != 4 || layout[3] != 1 {
            return Err(Error::InvalidArgument(format!(
                "batched evaluation expects layout [in, h1, h2, 1], got {layout:?}"
            )));
        }
        if pairs.m != layout[0] {
            return Err(Error::DimensionMismatch {
                expected: layout[0],
                got: pairs.m,
            });
        }
        Ok(BatchNet {
            m: layout[0],
            d1: layout[1],
            d2: layout[2],
            pairs,
            batch: 0,
            x: Vec::new(),
            z1v: Vec::new(),
            s1p: Vec::new(),
            u1: Vec::new(),
            z2: Vec::new(),
            s2p: Vec::new(),
            u2: Vec::new(),
            w2t: Vec::new(),
            lv: Vec::new(),
            lg: Vec::new(),
            lh: Vec::new(),
            zb2: Vec::new(),
            ub1: Vec::new(),
            zb1v: Vec::new(),
        })
    }

    /// Slabs per sample: value, m gradient directions, and the pair block.
    fn slabs(&self) -> usize {
        1 + self.m + self.pairs.len()
    }

    pub fn pair_set(&self) -> &PairSet {
        &self.pairs
    }

    pub fn value(&self) -> &[f64] {
        &self.lv
    }

    /// Gradient rows, batch x m.
    pub fn grad(&self) -> &[f64] {
        &self.lg
    }

    /// Second-derivative rows, batch x pairs.
    pub fn hess(&self) -> &[f64] {
        &self.lh
    }

    fn resize(&mut self, batch: usize) {
        let (m, d1, d2, s) = (self.m, self.d1, self.d2, self.slabs());
        self.batch = batch;
        self.x.resize(batch * m, 0.0);
        self.z1v.resize(batch * d1, 0.0);
        self.s1p.resize(batch * d1, 0.0);
        self.u1.resize(batch * s * d1, 0.0);
        self.z2.resize(batch * s * d2, 0.0);
        self.s2p.resize(batch * d2, 0.0);
        self.u2.resize(batch * s * d2, 0.0);
        self.lv.resize(batch, 0.0);
        self.lg.resize(batch * m, 0.0);
        self.lh.resize(batch * self.pairs.len(), 0.0);
    }

    /// Evaluates the bundle for `batch` stacked inputs (batch x m,
    /// row-major), retaining activations for a later `backward`.
    pub fn forward(&mut self, theta: &[f64], x: &[f64], batch: usize) {
        let (m, d1, d2) = (self.m, self.d1, self.d2);
        let s = self.slabs();
        let np = self.pairs.len();
        assert_eq!(x.len(), batch * m);
        self.resize(batch);
        self.x.copy_from_slice(x);

        let (w1, b1, w2, b2, w3, b3) = split_theta(theta, m, d1, d2);

        // layer 1 linear part
        self.z1v
            .par_chunks_mut(ROW_CHUNK * d1)
            .zip(x.par_chunks(ROW_CHUNK * m))
            .for_each(|(z_chunk, x_chunk)| {
                for (z_row, x_row) in z_chunk.chunks_mut(d1).zip(x_chunk.chunks(m)) {
                    for i in 0..d1 {
                        let row = &w1[i * m..(i + 1) * m];
                        let mut acc = b1[i];
                        for (wk, xk) in row.iter().zip(x_row) {
                            acc += wk * xk;
                        }
                        z_row[i] = acc;
                    }
                }
            });

        // layer 1 activation bundles: the input carries unit tangents and no
        // curvature, so grad slabs are s' W1 columns and pair slabs are
        // s'' W1[., p] W1[., q].
        let pairs = &self.pairs.pairs;
        self.u1
            .par_chunks_mut(s * d1)
            .zip(self.z1v.par_chunks(d1).zip(self.s1p.par_chunks_mut(d1)))
            .for_each(|(u_rows, (z_row, sp_row))| {
                for i in 0..d1 {
                    sp_row[i] = sigmoid_f64(z_row[i]);
                }
                let (val, rest) = u_rows.split_at_mut(d1);
                for i in 0..d1 {
                    val[i] = crate::diff::softplus_f64(z_row[i]);
                }
                let (grad_slab, hess_slab) = rest.split_at_mut(m * d1);
                for j in 0..m {
                    let dst = &mut grad_slab[j * d1..(j + 1) * d1];
                    for i in 0..d1 {
                        dst[i] = sp_row[i] * w1[i * m + j];
                    }
                }
                for (pi, &(p, q)) in pairs.iter().enumerate() {
                    let dst = &mut hess_slab[pi * d1..(pi + 1) * d1];
                    for i in 0..d1 {
                        let spp = sp_row[i] * (1.0 - sp_row[i]);
                        dst[i] = spp * w1[i * m + p] * w1[i * m + q];
                    }
                }
            });

        // layer 2 linear part over every slab
        if self.w2t.len() != d1 * d2 {
            self.w2t.resize(d1 * d2, 0.0);
        }
        for o in 0..d2 {
            for k in 0..d1 {
                self.w2t[k * d2 + o] = w2[o * d1 + k];
            }
        }
        self.z2.iter_mut().for_each(|v| *v = 0.0);
        gemm_add(&mut self.z2, &self.u1, &self.w2t, batch * s, d1, d2);
        self.z2
            .par_chunks_mut(s * d2)
            .for_each(|rows| {
                for (zi, bi) in rows[..d2].iter_mut().zip(b2) {
                    *zi += bi;
                }
            });

        // layer 2 activation bundles
        self.u2
            .par_chunks_mut(s * d2)
            .zip(self.z2.par_chunks(s * d2).zip(self.s2p.par_chunks_mut(d2)))
            .for_each(|(u_rows, (z_rows, sp_row))| {
                let zv = &z_rows[..d2];
                for i in 0..d2 {
                    sp_row[i] = sigmoid_f64(zv[i]);
                }
                for i in 0..d2 {
                    u_rows[i] = crate::diff::softplus_f64(zv[i]);
                }
                for j in 0..m {
                    let zg = &z_rows[(1 + j) * d2..(2 + j) * d2];
                    let ug = &mut u_rows[(1 + j) * d2..(2 + j) * d2];
                    for i in 0..d2 {
                        ug[i] = sp_row[i] * zg[i];
                    }
                }
                for (pi, &(p, q)) in pairs.iter().enumerate() {
                    let row = 1 + m + pi;
                    for i in 0..d2 {
                        let spp = sp_row[i] * (1.0 - sp_row[i]);
                        let zh = z_rows[row * d2 + i];
                        let zgp = z_rows[(1 + p) * d2 + i];
                        let zgq = z_rows[(1 + q) * d2 + i];
                        u_rows[row * d2 + i] = sp_row[i] * zh + spp * zgp * zgq;
                    }
                }
            });

        // linear output layer contracts every slab with w3
        let lv = &mut self.lv;
        let lg = &mut self.lg;
        let lh = &mut self.lh;
        lv.par_iter_mut()
            .zip(lg.par_chunks_mut(m).zip(lh.par_chunks_mut(np.max(1))))
            .zip(self.u2.par_chunks(s * d2))
            .for_each(|((lv_b, (lg_b, lh_b)), u_rows)| {
                *lv_b = dot(&u_rows[..d2], w3) + b3;
                for j in 0..m {
                    lg_b[j] = dot(&u_rows[(1 + j) * d2..(2 + j) * d2], w3);
                }
                for pi in 0..np {
                    let row = 1 + m + pi;
                    lh_b[pi] = dot(&u_rows[row * d2..(row + 1) * d2], w3);
                }
            });
    }

    /// Reverse sweep from adjoints of the value, gradient and pair outputs of
    /// the latest `forward`. Returns d(seeded scalar)/d(theta).
    pub fn backward(
        &mut self,
        theta: &[f64],
        seed_v: &[f64],
        seed_g: &[f64],
        seed_h: &[f64],
    ) -> Vec<f64> {
        let (m, d1, d2) = (self.m, self.d1, self.d2);
        let s = self.slabs();
        let np = self.pairs.len();
        let batch = self.batch;
        assert_eq!(seed_v.len(), batch);
        assert_eq!(seed_g.len(), batch * m);
        assert_eq!(seed_h.len(), batch * np);

        let (w1, _b1, w2, _b2, w3, _b3) = split_theta(theta, m, d1, d2);
        let mut grad = vec![0.0; theta.len()];
        let (gw1, gb1, gw2, gb2, gw3, gb3) = split_theta_mut(&mut grad, m, d1, d2);

        // output layer: adjoint of every slab is seed * w3; w3 collects the
        // seeded contraction with u2.
        *gb3 = seed_v.iter().sum();
        for b in 0..batch {
            let u_rows = &self.u2[b * s * d2..(b + 1) * s * d2];
            axpy(gw3, seed_v[b], &u_rows[..d2]);
            for j in 0..m {
                axpy(gw3, seed_g[b * m + j], &u_rows[(1 + j) * d2..(2 + j) * d2]);
            }
            for pi in 0..np {
                let row = 1 + m + pi;
                axpy(gw3, seed_h[b * np + pi], &u_rows[row * d2..(row + 1) * d2]);
            }
        }

        // softplus adjoint at layer 2, producing zbar2 for every slab
        self.zb2.resize(batch * s * d2, 0.0);
        let pairs = &self.pairs.pairs;
        self.zb2
            .par_chunks_mut(s * d2)
            .enumerate()
            .for_each(|(b, zb_rows)| {
                let z_rows = &self.z2[b * s * d2..(b + 1) * s * d2];
                let sp = &self.s2p[b * d2..(b + 1) * d2];
                let sv = seed_v[b];
                let sg = &seed_g[b * m..(b + 1) * m];
                let sh = &seed_h[b * np..(b + 1) * np];
                for i in 0..d2 {
                    let w3i = w3[i];
                    let spi = sp[i];
                    let sppi = spi * (1.0 - spi);
                    let spppi = sppi * (1.0 - 2.0 * spi);
                    // value-slab adjoint accumulates every curvature path
                    let mut zv = sv * w3i * spi;
                    for j in 0..m {
                        let zg = z_rows[(1 + j) * d2 + i];
                        let ubar_g = sg[j] * w3i;
                        zv += ubar_g * sppi * zg;
                        zb_rows[(1 + j) * d2 + i] = ubar_g * spi;
                    }
                    for (pi, &(p, q)) in pairs.iter().enumerate() {
                        let row = 1 + m + pi;
                        let ubar_h = sh[pi] * w3i;
                        let zgp = z_rows[(1 + p) * d2 + i];
                        let zgq = z_rows[(1 + q) * d2 + i];
                        let zh = z_rows[row * d2 + i];
                        zv += ubar_h * (sppi * zh + spppi * zgp * zgq);
                        zb_rows[row * d2 + i] = ubar_h * spi;
                        zb_rows[(1 + p) * d2 + i] += ubar_h * sppi * zgq;
                        zb_rows[(1 + q) * d2 + i] += ubar_h * sppi * zgp;
                    }
                    zb_rows[i] = zv;
                }
            });

        // layer 2 linear adjoints
        for b in 0..batch {
            let zv = &self.zb2[b * s * d2..b * s * d2 + d2];
            for (g, z) in gb2.iter_mut().zip(zv) {
                *g += z;
            }
        }
        accumulate_outer(gw2, &self.zb2, &self.u1, batch * s, d2, d1);
        self.ub1.resize(batch * s * d1, 0.0);
        self.ub1.iter_mut().for_each(|v| *v = 0.0);
        gemm_add(&mut self.ub1, &self.zb2, w2, batch * s, d2, d1);

        // layer 1: the grad and pair slabs depend on W1 directly as well as
        // through z1; both contributions are collected here.
        self.zb1v.resize(batch * d1, 0.0);
        self.zb1v
            .par_chunks_mut(d1)
            .enumerate()
            .for_each(|(b, zb_row)| {
                let ub_rows = &self.ub1[b * s * d1..(b + 1) * s * d1];
                let sp = &self.s1p[b * d1..(b + 1) * d1];
                for i in 0..d1 {
                    let spi = sp[i];
                    let sppi = spi * (1.0 - spi);
                    let spppi = sppi * (1.0 - 2.0 * spi);
                    let mut zv = ub_rows[i] * spi;
                    for j in 0..m {
                        zv += ub_rows[(1 + j) * d1 + i] * sppi * w1[i * m + j];
                    }
                    for (pi, &(p, q)) in pairs.iter().enumerate() {
                        let row = 1 + m + pi;
                        zv += ub_rows[row * d1 + i] * spppi * w1[i * m + p] * w1[i * m + q];
                    }
                    zb_row[i] = zv;
                }
            });

        for b in 0..batch {
            let ub_rows = &self.ub1[b * s * d1..(b + 1) * s * d1];
            let sp = &self.s1p[b * d1..(b + 1) * d1];
            let zb_row = &self.zb1v[b * d1..(b + 1) * d1];
            let x_row = &self.x[b * m..(b + 1) * m];
            for i in 0..d1 {
                let spi = sp[i];
                let sppi = spi * (1.0 - spi);
                let gw1_row = &mut gw1[i * m..(i + 1) * m];
                for j in 0..m {
                    gw1_row[j] += ub_rows[(1 + j) * d1 + i] * spi + zb_row[i] * x_row[j];
                }
                for (pi, &(p, q)) in pairs.iter().enumerate() {
                    let ubar_h = ub_rows[(1 + m + pi) * d1 + i] * sppi;
                    gw1_row[p] += ubar_h * w1[i * m + q];
                    gw1_row[q] += ubar_h * w1[i * m + p];
                }
                gb1[i] += zb_row[i];
            }
        }

        grad
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], coef: f64, src: &[f64]) {
    if coef != 0.0 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += coef * s;
        }
    }
}

#[allow(clippy::type_complexity)]
fn split_theta(theta: &[f64], m: usize, d1: usize, d2: usize) -> (&[f64], &[f64], &[f64], &[f64], &[f64], f64) {
    let (w1, rest) = theta.split_at(d1 * m);
    let (b1, rest) = rest.split_at(d1);
    let (w2, rest) = rest.split_at(d2 * d1);
    let (b2, rest) = rest.split_at(d2);
    let (w3, rest) = rest.split_at(d2);
    (w1, b1, w2, b2, w3, rest[0])
}

#[allow(clippy::type_complexity)]
fn split_theta_mut(
    theta: &mut [f64],
    m: usize,
    d1: usize,
    d2: usize,
) -> (&mut [f64], &mut [f64], &mut [f64], &mut [f64], &mut [f64], &mut f64) {
    let (w1, rest) = theta.split_at_mut(d1 * m);
    let (b1, rest) = rest.split_at_mut(d1);
    let (w2, rest) = rest.split_at_mut(d2 * d1);
    let (b2, rest) = rest.split_at_mut(d2);
    let (w3, rest) = rest.split_at_mut(d2);
    (w1, b1, w2, b2, w3, &mut rest[0])
}

/// Value, gradient and packed upper-triangular Hessian at a single input via
/// the batched engine.
pub fn single_jet(p: &Params, x: &[f64]) -> Result<Jet> {
    if x.len() != p.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: p.input_dim(),
            got: x.len(),
        });
    }
    let mut net = BatchNet::new(&p.layout, PairSet::full(p.input_dim()))?;
    let theta = p.flatten();
    net.forward(&theta, x, 1);
    let jet = Jet {
        value: net.value()[0],
        grad: net.grad().to_vec(),
        hess_upper: net.hess().to_vec(),
    };
    if !jet.value.is_finite()
        || jet.grad.iter().any(|v| !v.is_finite())
        || jet.hess_upper.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite {
            context: "network jet",
            index: None,
        });
    }
    Ok(jet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ScalarField;
    use crate::dynamics::jet_via_duals;
    use crate::linalg::tri_idx;

    #[test]
    fn jet_matches_nested_duals() {
        let p = Params::init_with_layout(&[4, 6, 5, 1], 11).unwrap();
        let x = [0.3, -0.7, 0.2, 0.9];
        let fast = single_jet(&p, &x).unwrap();
        let slow = jet_via_duals(&p, &x).unwrap();
        assert!((fast.value - slow.value).abs() < 1e-12);
        for (a, b) in fast.grad.iter().zip(&slow.grad) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
        for (a, b) in fast.hess_upper.iter().zip(&slow.hess_upper) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
    }

    #[test]
    fn restricted_pairs_match_full_triangle() {
        let p = Params::init_with_layout(&[4, 6, 6, 1], 3).unwrap();
        let theta = p.flatten();
        let pairs = PairSet {
            m: 4,
            pairs: vec![(2, 2), (2, 3), (3, 3), (0, 2), (1, 3)],
        };
        let mut restricted = BatchNet::new(&p.layout, pairs.clone()).unwrap();
        let mut full = BatchNet::new(&p.layout, PairSet::full(4)).unwrap();
        let x = [0.5, 0.1, -0.4, 0.8];
        restricted.forward(&theta, &x, 1);
        full.forward(&theta, &x, 1);
        for (pi, &(pp, qq)) in pairs.pairs.iter().enumerate() {
            let want = full.hess()[tri_idx(4, pp, qq)];
            assert!((restricted.hess()[pi] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn batched_forward_matches_per_sample() {
        let p = Params::init_with_layout(&[2, 5, 4, 1], 7).unwrap();
        let theta = p.flatten();
        let xs = [[0.1, 0.2], [-0.5, 0.9], [1.5, -1.2]];
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let mut net = BatchNet::new(&p.layout, PairSet::full(2)).unwrap();
        net.forward(&theta, &flat, 3);
        let batch_values = net.value().to_vec();
        let batch_grads = net.grad().to_vec();
        for (b, x) in xs.iter().enumerate() {
            assert!((batch_values[b] - p.eval(&x[..])).abs() < 1e-13);
            let jet = single_jet(&p, x).unwrap();
            for j in 0..2 {
                assert!((batch_grads[b * 2 + j] - jet.grad[j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // Scalar objective: sum of value, gradient and pair outputs with
        // fixed coefficients; its parameter gradient is checked against
        // central differences through the plain forward pass.
        let layout = [3, 5, 4, 1];
        let p = Params::init_with_layout(&layout, 21).unwrap();
        let theta = p.flatten();
        let pairs = PairSet::full(3);
        let np = pairs.len();
        let x = [0.4, -0.2, 0.7];

        let seed_v = [0.37];
        let seed_g: Vec<f64> = (0..3).map(|j| 0.11 + 0.31 * j as f64).collect();
        let seed_h: Vec<f64> = (0..np).map(|k| -0.23 + 0.17 * k as f64).collect();

        let objective = |th: &[f64]| -> f64 {
            let mut net = BatchNet::new(&layout, pairs.clone()).unwrap();
            net.forward(th, &x, 1);
            let mut acc = seed_v[0] * net.value()[0];
            for j in 0..3 {
                acc += seed_g[j] * net.grad()[j];
            }
            for k in 0..np {
                acc += seed_h[k] * net.hess()[k];
            }
            acc
        };

        let mut net = BatchNet::new(&layout, pairs.clone()).unwrap();
        net.forward(&theta, &x, 1);
        let grad = net.backward(&theta, &seed_v, &seed_g, &seed_h);

        let h = 1e-6;
        for (k, step) in [(0usize, h), (7, h), (theta.len() - 1, h), (theta.len() / 2, h)] {
            let mut tp = theta.clone();
            tp[k] += step;
            let mut tm = theta.clone();
            tm[k] -= step;
            let fd = (objective(&tp) - objective(&tm)) / (2.0 * step);
            assert!(
                (grad[k] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "theta[{k}]: {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn backward_full_gradient_against_fd_small_net() {
        let layout = [2, 3, 3, 1];
        let p = Params::init_with_layout(&layout, 5).unwrap();
        let theta = p.flatten();
        let pairs = PairSet::full(2);
        let np = pairs.len();
        let xs = [[0.2, -0.6], [0.9, 0.4]];
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let seed_v = [0.0, 0.0];
        let seed_g = [0.5, -0.25, 0.75, 1.5];
        let seed_h: Vec<f64> = (0..2 * np).map(|k| 0.1 * (k as f64 + 1.0)).collect();

        let objective = |th: &[f64]| -> f64 {
            let mut net = BatchNet::new(&layout, pairs.clone()).unwrap();
            net.forward(th, &flat, 2);
            let mut acc = 0.0;
            for b in 0..2 {
                for j in 0..2 {
                    acc += seed_g[b * 2 + j] * net.grad()[b * 2 + j];
                }
                for k in 0..np {
                    acc += seed_h[b * np + k] * net.hess()[b * np + k];
                }
            }
            acc
        };

        let mut net = BatchNet::new(&layout, pairs.clone()).unwrap();
        net.forward(&theta, &flat, 2);
        let grad = net.backward(&theta, &seed_v, &seed_g, &seed_h);

        let h = 1e-6;
        for k in 0..theta.len() {
            let mut tp = theta.clone();
            tp[k] += h;
            let mut tm = theta.clone();
            tm[k] -= h;
            let fd = (objective(&tp) - objective(&tm)) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() <= 2e-6 * (1.0 + fd.abs()),
                "theta[{k}]: {} vs fd {fd}",
                grad[k]
            );
        }
    }
}
