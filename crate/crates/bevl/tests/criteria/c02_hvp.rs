//! On a bilinear lower loss psi(w, theta) = w' M theta the mixed
//! second derivative is exactly M, so the symmetric finite-difference
//! Hessian-vector probe must reproduce M v to relative error 1e-9 for
//! 100 random draws with dimensions up to 16.
//!
//! The closed form M v is computed with independent scalar loops, and
//! the probe runs through the same code path training uses, including
//! its step-length rule.

use bevl::bilevel::{fd_hvp, BilevelObjectives};
use bevl::tensor::{GradMap, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::require;

type TRes<T> = bevl::bilevel::Result<T>;

/// psi = w' M theta with constant M; phi and the denoiser-only loss
/// are unused by the probe but must exist.
struct Bilinear {
    m: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl BilevelObjectives for Bilinear {
    fn psi(&self, w: &ParamSet, theta: &ParamSet) -> TRes<Tensor> {
        let m = Tensor::new(vec![self.rows, self.cols], self.m.clone())?;
        let wv = w.require("w")?.reshape(vec![1, self.rows])?;
        let th = theta.require("theta")?.reshape(vec![self.cols, 1])?;
        Ok(wv.matmul(&m)?.matmul(&th)?.sum()?)
    }

    fn phi(&self, w: &ParamSet, _theta: &ParamSet) -> TRes<Tensor> {
        Ok(w.require("w")?.sum()?)
    }

    fn den_only(&self, w: &ParamSet) -> TRes<Tensor> {
        Ok(w.require("w")?.sum()?)
    }
}

const DRAWS: usize = 100;
const TOL: f64 = 1e-9;

pub fn run() -> Result<String, String> {
    let mut rng = ChaCha12Rng::seed_from_u64(20405);
    let mut worst = 0.0f64;
    for draw in 0..DRAWS {
        let rows = rng.gen_range(1..=16);
        let cols = rng.gen_range(1..=16);
        let m: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let wv: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let th: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let obj = Bilinear {
            m: m.clone(),
            rows,
            cols,
        };
        let mut w = ParamSet::new();
        w.insert("w", Tensor::new(vec![rows], wv).unwrap())
            .map_err(|e| e.to_string())?;
        let mut theta = ParamSet::new();
        theta
            .insert("theta", Tensor::new(vec![cols], th).unwrap())
            .map_err(|e| e.to_string())?;
        let mut dir = GradMap::new();
        dir.insert(
            "theta".to_string(),
            Tensor::new(vec![cols], v.clone()).unwrap(),
        );

        let (est, eps) = fd_hvp(&obj, &w, &theta, &dir).map_err(|e| e.to_string())?;
        require(
            eps > 0.0,
            format!("draw {draw}: probe skipped a nonzero direction"),
        )?;
        let got = est
            .get("w")
            .ok_or_else(|| format!("draw {draw}: probe returned nothing for w"))?
            .data();

        // Independent oracle: (M v)_i by scalar loops.
        for i in 0..rows {
            let mut want = 0.0;
            for j in 0..cols {
                want += m[i * cols + j] * v[j];
            }
            let rel = (got[i] - want).abs() / (1e-12 + want.abs());
            worst = worst.max(rel);
            require(
                rel <= TOL,
                format!("draw {draw} row {i}: rel err {rel:.3e} > {TOL:e}"),
            )?;
        }
    }
    Ok(format!("{DRAWS} bilinear draws, worst rel err {worst:.2e}"))
}
