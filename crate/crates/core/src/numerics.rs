//! Complex linear-algebra and transform kernels shared by every other module.
//!
//! Matrices are `nalgebra` dense complex matrices. The DFT follows the
//! unnormalized forward / `1/K`-normalized inverse convention.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Seeded generator used throughout the simulator.
pub type SimRng = ChaCha20Rng;

const SVD_EPS: f64 = 1e-15;
const SVD_MAX_ITER: usize = 10_000;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Transforms `n_entries` interleaved length-`len` sequences in place.
/// `data[n * n_entries + e]` is entry `e` at time `n`.
fn transform_entries(data: &mut [Complex64], len: usize, n_entries: usize, inverse: bool) {
    let fft = plan(len, inverse);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let mut line = vec![Complex64::default(); len];
    for e in 0..n_entries {
        for n in 0..len {
            line[n] = data[n * n_entries + e];
        }
        fft.process_with_scratch(&mut line, &mut scratch);
        let scale = if inverse { 1.0 / len as f64 } else { 1.0 };
        for n in 0..len {
            data[n * n_entries + e] = line[n] * scale;
        }
    }
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::LengthMismatch { expected, actual });
    }
    Ok(())
}

fn vec_sequence_transform(seq: &[CVec], k: usize, inverse: bool) -> Result<Vec<CVec>> {
    check_len(seq.len(), k)?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let width = seq[0].len();
    for v in seq {
        check_len(v.len(), width)?;
    }
    let mut data: Vec<Complex64> = seq.iter().flat_map(|v| v.iter().copied()).collect();
    transform_entries(&mut data, k, width, inverse);
    Ok(data
        .chunks(width.max(1))
        .take(k)
        .map(|c| CVec::from_column_slice(&c[..width]))
        .collect())
}

/// K-point DFT of a vector sequence: `out[p][q] = sum_n seq[n][q] exp(-j 2 pi n p / K)`.
pub fn dft_sequence(seq: &[CVec], k: usize) -> Result<Vec<CVec>> {
    vec_sequence_transform(seq, k, false)
}

/// Inverse of [`dft_sequence`] (carries the `1/K` factor).
pub fn idft_sequence(seq: &[CVec], k: usize) -> Result<Vec<CVec>> {
    vec_sequence_transform(seq, k, true)
}

fn mat_sequence_transform(seq: &[CMat], k: usize, inverse: bool) -> Result<Vec<CMat>> {
    check_len(seq.len(), k)?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let (r, c) = seq[0].shape();
    for m in seq {
        if m.shape() != (r, c) {
            return Err(Error::ShapeMismatch(format!(
                "sequence element {:?} differs from {:?}",
                m.shape(),
                (r, c)
            )));
        }
    }
    let n = r * c;
    let mut data: Vec<Complex64> = seq.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
    transform_entries(&mut data, k, n, inverse);
    Ok((0..k)
        .map(|i| CMat::from_column_slice(r, c, &data[i * n..(i + 1) * n]))
        .collect())
}

/// Entry-wise K-point DFT of a matrix sequence.
pub fn dft_matrix_sequence(seq: &[CMat], k: usize) -> Result<Vec<CMat>> {
    mat_sequence_transform(seq, k, false)
}

/// Entry-wise inverse K-point DFT of a matrix sequence.
pub fn idft_matrix_sequence(seq: &[CMat], k: usize) -> Result<Vec<CMat>> {
    mat_sequence_transform(seq, k, true)
}

/// Circular convolution `r(n) = sum_l H(l) x((n - l) mod K)`.
pub fn circular_convolve(h_seq: &[CMat], x_seq: &[CVec], k: usize) -> Result<Vec<CVec>> {
    check_len(h_seq.len(), k)?;
    check_len(x_seq.len(), k)?;
    if k == 0 {
        return Ok(Vec::new());
    }
    let (rows, cols) = h_seq[0].shape();
    if h_seq.iter().any(|h| h.shape() != (rows, cols)) {
        return Err(Error::ShapeMismatch("filter taps differ in shape".into()));
    }
    if let Some(x) = x_seq.iter().find(|x| x.len() != cols) {
        return Err(Error::ShapeMismatch(format!(
            "input vector of length {} against {}x{} taps",
            x.len(),
            rows,
            cols
        )));
    }
    let mut out = vec![CVec::zeros(rows); k];
    for (n, r) in out.iter_mut().enumerate() {
        for (l, h) in h_seq.iter().enumerate() {
            let x = &x_seq[(n + k - l) % k];
            r.gemv(Complex64::new(1.0, 0.0), h, x, Complex64::new(1.0, 0.0));
        }
    }
    Ok(out)
}

/// Thin SVD `A = U diag(s) V^H` with nonincreasing singular values.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMat,
    pub singular_values: Vec<f64>,
    pub v: CMat,
}

impl Svd {
    pub fn reconstruct(&self) -> CMat {
        let s = CMat::from_diagonal(&DVector::from_iterator(
            self.singular_values.len(),
            self.singular_values.iter().map(|&x| Complex64::new(x, 0.0)),
        ));
        &self.u * s * self.v.adjoint()
    }
}

pub fn svd(a: &CMat) -> Result<Svd> {
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Value("SVD input has non-finite entries".into()));
    }
    let (m, n) = a.shape();
    let p = m.min(n);
    if p == 0 {
        return Ok(Svd {
            u: CMat::zeros(m, 0),
            singular_values: Vec::new(),
            v: CMat::zeros(n, 0),
        });
    }
    let raw = a
        .clone()
        .try_svd(true, true, SVD_EPS, SVD_MAX_ITER)
        .ok_or(Error::ConvergenceFailure(SVD_MAX_ITER))?;
    let u = raw.u.expect("requested U");
    let v_t = raw.v_t.expect("requested V^H");
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| raw.singular_values[j].total_cmp(&raw.singular_values[i]));
    let mut su = CMat::zeros(m, p);
    let mut sv = CMat::zeros(n, p);
    let mut s = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &v_t.row(src).adjoint());
        s.push(raw.singular_values[src]);
    }
    Ok(Svd {
        u: su,
        singular_values: s,
        v: sv,
    })
}

/// Solves `A X = B` for Hermitian positive definite `A` via Cholesky.
pub fn hermitian_solve(a: &CMat, b: &CMat) -> Result<CMat> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "cannot solve {:?} against {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let chol = Cholesky::new(hermitian_part(a)).ok_or(Error::NotPositiveDefinite)?;
    // complex Cholesky takes complex square roots, so negative pivots surface
    // as non-real diagonal entries rather than as a failure
    let l = chol.l_dirty();
    if (0..l.nrows()).any(|i| {
        let d = l[(i, i)];
        !(d.re > 0.0) || d.im.abs() > 1e-12 * d.re.max(1.0)
    }) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(chol.solve(b))
}

/// `log2 det(A)` for Hermitian positive definite `A`.
pub fn log2_det_hpd(a: &CMat) -> Result<f64> {
    let chol = Cholesky::new(hermitian_part(a)).ok_or(Error::NotPositiveDefinite)?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)].re;
        if !(d > 0.0) || !d.is_finite() || l[(i, i)].im.abs() > 1e-12 * d.max(1.0) {
            return Err(Error::NotPositiveDefinite);
        }
        acc += 2.0 * d.log2();
    }
    Ok(acc)
}

/// `(A + A^H) / 2`, removing round-off asymmetry before a factorization.
pub fn hermitian_part(a: &CMat) -> CMat {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

/// Block-diagonal concatenation.
pub fn blkdiag(blocks: &[CMat]) -> CMat {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Horizontal concatenation of equally tall matrices.
pub fn hcat(blocks: &[CMat]) -> CMat {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = CMat::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), b.shape()).copy_from(b);
        c += b.ncols();
    }
    out
}

pub fn frobenius_sq(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn cis(phase: f64) -> Complex64 {
    Complex64::from_polar(1.0, phase)
}

pub fn real(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// Vector of i.i.d. `CN(0, variance)` samples: real and imaginary parts are
/// independent `N(0, variance / 2)`.
pub fn complex_gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, variance: f64) -> CVec {
    let s = (variance / 2.0).sqrt();
    CVec::from_iterator(
        len,
        (0..len).map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(s * re, s * im)
        }),
    )
}

/// Independent generator for `(seed, stream)`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_mat(rng: &mut SimRng, r: usize, cols: usize) -> CMat {
        CMat::from_iterator(r, cols, complex_gaussian_vec(rng, r * cols, 1.0).iter().copied())
    }

    fn random_seq(rng: &mut SimRng, k: usize, w: usize) -> Vec<CVec> {
        (0..k).map(|_| complex_gaussian_vec(rng, w, 1.0)).collect()
    }

    /// O(K^2) direct summation, independent of the FFT path.
    fn direct_dft(seq: &[CVec]) -> Vec<CVec> {
        let k = seq.len();
        (0..k)
            .map(|p| {
                let mut acc = CVec::zeros(seq[0].len());
                for (n, x) in seq.iter().enumerate() {
                    let w = cis(-2.0 * std::f64::consts::PI * (n * p) as f64 / k as f64);
                    acc += x * w;
                }
                acc
            })
            .collect()
    }

    fn max_rel(a: &[CVec], b: &[CVec]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
        let den: f64 = b.iter().map(|y| y.norm_squared()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn dft_of_impulse_is_flat() {
        let v = CVec::from_vec(vec![c(1.0, 2.0), c(-0.5, 0.0), c(0.0, 3.0)]);
        let mut seq = vec![CVec::zeros(3); 8];
        seq[0] = v.clone();
        for bin in dft_sequence(&seq, 8).unwrap() {
            assert!((bin - &v).norm() < 1e-14);
        }
    }

    #[test]
    fn dft_of_constant_concentrates_in_bin_zero() {
        let v = CVec::from_vec(vec![c(1.0, -1.0), c(2.0, 0.5)]);
        let out = dft_sequence(&vec![v.clone(); 6], 6).unwrap();
        assert!((&out[0] - &v * real(6.0)).norm() < 1e-13);
        for bin in &out[1..] {
            assert!(bin.norm() < 1e-13);
        }
    }

    #[test]
    fn dft_matches_direct_summation() {
        let mut rng = stream_rng(1, 0);
        let seq = random_seq(&mut rng, 8, 5);
        let fast = dft_sequence(&seq, 8).unwrap();
        assert!(max_rel(&fast, &direct_dft(&seq)) < 1e-12);
        let back = idft_sequence(&fast, 8).unwrap();
        assert!(max_rel(&back, &seq) < 1e-13);
    }

    #[test]
    fn dft_rejects_wrong_length() {
        let seq = vec![CVec::zeros(2); 5];
        assert_eq!(
            dft_sequence(&seq, 4).unwrap_err(),
            Error::LengthMismatch { expected: 4, actual: 5 }
        );
    }

    #[test]
    fn matrix_dft_is_entrywise() {
        let mut rng = stream_rng(2, 0);
        let seq: Vec<CMat> = (0..6).map(|_| random_mat(&mut rng, 3, 2)).collect();
        let out = dft_matrix_sequence(&seq, 6).unwrap();
        for (r, cidx) in [(0, 0), (2, 1), (1, 0)] {
            let col: Vec<CVec> = seq.iter().map(|m| CVec::from_element(1, m[(r, cidx)])).collect();
            let d = direct_dft(&col);
            for p in 0..6 {
                assert!((out[p][(r, cidx)] - d[p][0]).norm() < 1e-12);
            }
        }
        let back = idft_matrix_sequence(&out, 6).unwrap();
        for (a, b) in back.iter().zip(&seq) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn identity_filter_passes_input() {
        let mut rng = stream_rng(3, 0);
        let x = random_seq(&mut rng, 5, 3);
        let mut h = vec![CMat::zeros(3, 3); 5];
        h[0] = CMat::identity(3, 3);
        let r = circular_convolve(&h, &x, 5).unwrap();
        assert!(max_rel(&r, &x) < 1e-15);
    }

    #[test]
    fn unit_delay_filter_shifts_cyclically() {
        let mut rng = stream_rng(4, 0);
        let x = random_seq(&mut rng, 5, 2);
        let mut h = vec![CMat::zeros(2, 2); 5];
        h[1] = CMat::identity(2, 2);
        let r = circular_convolve(&h, &x, 5).unwrap();
        for n in 0..5 {
            assert_eq!(r[n], x[(n + 4) % 5]);
        }
    }

    #[test]
    fn convolution_theorem_holds() {
        let mut rng = stream_rng(5, 0);
        let k = 6;
        let h: Vec<CMat> = (0..k).map(|_| random_mat(&mut rng, 4, 3)).collect();
        let x = random_seq(&mut rng, k, 3);
        let r = circular_convolve(&h, &x, k).unwrap();
        let rf = direct_dft(&r);
        let xf = direct_dft(&x);
        // H[p] by direct summation, entry by entry
        for p in 0..k {
            let mut hp = CMat::zeros(4, 3);
            for (n, hn) in h.iter().enumerate() {
                hp += hn * cis(-2.0 * std::f64::consts::PI * (n * p) as f64 / k as f64);
            }
            let expect = hp * &xf[p];
            assert!((&rf[p] - &expect).norm() < 1e-12 * expect.norm().max(1.0));
        }
    }

    #[test]
    fn convolution_shape_errors() {
        let h = vec![CMat::zeros(2, 3); 4];
        let x = vec![CVec::zeros(2); 4];
        assert!(matches!(
            circular_convolve(&h, &x, 4),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn svd_of_identity() {
        let s = svd(&CMat::identity(3, 3)).unwrap();
        assert_eq!(s.singular_values.len(), 3);
        for v in &s.singular_values {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn svd_of_complex_diagonal_sorts_moduli() {
        let a = CMat::from_diagonal(&CVec::from_vec(vec![c(3.0, 0.0), c(0.0, 4.0)]));
        let s = svd(&a).unwrap();
        assert!((s.singular_values[0] - 4.0).abs() < 1e-13);
        assert!((s.singular_values[1] - 3.0).abs() < 1e-13);
        assert!((s.reconstruct() - a).norm() < 1e-13);
    }

    #[test]
    fn svd_random_is_orthonormal_and_reconstructs() {
        let mut rng = stream_rng(6, 0);
        let a = random_mat(&mut rng, 6, 4);
        let s = svd(&a).unwrap();
        let i4 = CMat::identity(4, 4);
        assert!((s.u.adjoint() * &s.u - &i4).norm() < 1e-10);
        assert!((s.v.adjoint() * &s.v - &i4).norm() < 1e-10);
        assert!((s.reconstruct() - &a).norm() <= 1e-10 * a.norm());
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_rejects_nan() {
        let mut a = CMat::identity(2, 2);
        a[(0, 1)] = c(f64::NAN, 0.0);
        assert!(svd(&a).is_err());
    }

    #[test]
    fn solve_trivial_systems() {
        let mut rng = stream_rng(7, 0);
        let b = random_mat(&mut rng, 3, 2);
        let x = hermitian_solve(&CMat::identity(3, 3), &b).unwrap();
        assert!((x - &b).norm() < 1e-15);
        let x = hermitian_solve(&(CMat::identity(3, 3) * real(2.0)), &CMat::identity(3, 3)).unwrap();
        assert!((x - CMat::identity(3, 3) * real(0.5)).norm() < 1e-15);
    }

    #[test]
    fn solve_random_spd_matches_inverse() {
        let mut rng = stream_rng(8, 0);
        let g = random_mat(&mut rng, 8, 8);
        let a = &g * g.adjoint() + CMat::identity(8, 8);
        let b = random_mat(&mut rng, 8, 3);
        let x = hermitian_solve(&a, &b).unwrap();
        assert!((&a * &x - &b).norm() <= 1e-9 * b.norm());
        let oracle = a.clone().try_inverse().unwrap() * &b;
        assert!((x - oracle).norm() <= 1e-9 * b.norm());
    }

    #[test]
    fn solve_rejects_indefinite() {
        let a = CMat::from_diagonal(&CVec::from_vec(vec![c(1.0, 0.0), c(-1.0, 0.0)]));
        assert_eq!(
            hermitian_solve(&a, &CMat::identity(2, 2)).unwrap_err(),
            Error::NotPositiveDefinite
        );
    }

    #[test]
    fn log_det_of_diagonal() {
        let a = CMat::from_diagonal(&CVec::from_vec(vec![c(2.0, 0.0), c(8.0, 0.0)]));
        assert!((log2_det_hpd(&a).unwrap() - 4.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_sampler_is_reproducible_with_target_variance() {
        let a = complex_gaussian_vec(&mut stream_rng(9, 3), 200_000, 2.5);
        let b = complex_gaussian_vec(&mut stream_rng(9, 3), 200_000, 2.5);
        assert_eq!(a, b);
        let var = a.norm_squared() / a.len() as f64;
        assert!((var - 2.5).abs() < 0.05);
        let re_var: f64 = a.iter().map(|z| z.re * z.re).sum::<f64>() / a.len() as f64;
        assert!((re_var - 1.25).abs() < 0.03);
        let other = complex_gaussian_vec(&mut stream_rng(9, 4), 4, 1.0);
        assert_ne!(a.rows(0, 4).into_owned(), other);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn parseval_holds(seed in any::<u64>(), k in 1usize..24, w in 1usize..5) {
            let mut rng = stream_rng(seed, 0);
            let seq = random_seq(&mut rng, k, w);
            let out = dft_sequence(&seq, k).unwrap();
            let e_time: f64 = seq.iter().map(|v| v.norm_squared()).sum();
            let e_freq: f64 = out.iter().map(|v| v.norm_squared()).sum();
            prop_assert!((e_freq - k as f64 * e_time).abs() <= 1e-10 * e_freq.max(1.0));
        }

        #[test]
        fn adjoint_shares_singular_values(seed in any::<u64>(), r in 1usize..7, cols in 1usize..7) {
            let mut rng = stream_rng(seed, 0);
            let a = random_mat(&mut rng, r, cols);
            let s1 = svd(&a).unwrap().singular_values;
            let s2 = svd(&a.adjoint()).unwrap().singular_values;
            for (x, y) in s1.iter().zip(&s2) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
