//! On the scalar quadratic bilevel problem
//!
//! `psi = (theta - a w)^2 / 2`, `phi = (theta' - c)^2 / 2`
//!
//! the one-step lookahead hypergradient has the closed form
//! `eta * a * (theta' - c)` with `theta' = theta - eta (theta - a w)`:
//! phi carries no direct w term, the mixed second derivative of psi is
//! `-a`, and the correction contributes `-eta * (-a) * (theta' - c)`.
//! The implementation must match this within 1e-10 over 100 draws.

use bevl::bilevel::{hypergradient, BilevelObjectives};
use bevl::tensor::{ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::require;

type TRes<T> = bevl::bilevel::Result<T>;

struct ScalarQuadratic {
    a: f64,
    c: f64,
}

impl BilevelObjectives for ScalarQuadratic {
    fn psi(&self, w: &ParamSet, theta: &ParamSet) -> TRes<Tensor> {
        let d = theta
            .require("theta")?
            .sub(&w.require("w")?.scale(self.a)?)?;
        Ok(d.mul(&d)?.scale(0.5)?.sum()?)
    }

    fn phi(&self, _w: &ParamSet, theta: &ParamSet) -> TRes<Tensor> {
        let d = theta
            .require("theta")?
            .sub(&Tensor::new(vec![1], vec![self.c])?)?;
        Ok(d.mul(&d)?.scale(0.5)?.sum()?)
    }

    fn den_only(&self, w: &ParamSet) -> TRes<Tensor> {
        let wv = w.require("w")?;
        Ok(wv.mul(wv)?.scale(0.5)?.sum()?)
    }
}

const DRAWS: usize = 100;
const TOL: f64 = 1e-10;
/// Probe length numerator the training loop uses.
const M_SCALE: f64 = 0.01;

pub fn run() -> Result<String, String> {
    let mut rng = ChaCha12Rng::seed_from_u64(30704);
    let mut worst = 0.0f64;
    for draw in 0..DRAWS {
        let a = rng.gen_range(-2.0..2.0);
        let c = rng.gen_range(-2.0..2.0);
        let eta = rng.gen_range(0.01..1.0);
        let w0 = rng.gen_range(-2.0..2.0);
        let th0 = rng.gen_range(-2.0..2.0);

        let obj = ScalarQuadratic { a, c };
        let mut w = ParamSet::new();
        w.insert("w", Tensor::new(vec![1], vec![w0]).unwrap())
            .map_err(|e| e.to_string())?;
        let mut theta = ParamSet::new();
        theta
            .insert("theta", Tensor::new(vec![1], vec![th0]).unwrap())
            .map_err(|e| e.to_string())?;

        let step = hypergradient(&obj, &w, &theta, eta, M_SCALE).map_err(|e| e.to_string())?;
        let got = step
            .hypergrad
            .get("w")
            .map(|t| t.data()[0])
            .unwrap_or(0.0);

        // Hand-derived closed form, computed independently.
        let theta_prime = th0 - eta * (th0 - a * w0);
        let want = eta * a * (theta_prime - c);

        let err = (got - want).abs();
        let rel = err / (1.0 + want.abs());
        worst = worst.max(rel);
        require(
            rel <= TOL,
            format!(
                "draw {draw} (a={a:.3}, c={c:.3}, eta={eta:.3}): \
                 got {got:.12e}, want {want:.12e}, err {rel:.3e}"
            ),
        )?;

        // The probed lower step must equal the closed-form theta'.
        let tp = step
            .theta_prime
            .require("theta")
            .map_err(|e| e.to_string())?
            .data()[0];
        require(
            (tp - theta_prime).abs() <= 1e-12,
            format!("draw {draw}: theta' {tp:.12e} vs closed form {theta_prime:.12e}"),
        )?;
    }
    Ok(format!("{DRAWS} quadratic draws, worst scaled err {worst:.2e}"))
}
