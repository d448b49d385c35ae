//! Both training losses must agree with hand-rolled arithmetic. The
//! enhancement loss is checked against a scalar-loop mean-absolute-error
//! oracle with the auxiliary terms at half weight, and the
//! classification loss must price uniform logits at exactly ln 3
//! regardless of the per-pixel constant.

use bevl::bilevel::{den_loss, enh_loss};
use bevl::event::{rasterize_counts, to_polarity_map, Event, EventStream};
use bevl::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::require;

const TOL: f64 = 1e-12;
const DRAWS: usize = 50;

fn sample(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Result<Tensor, String> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

fn oracle_mean_l1(a: &Tensor, b: &Tensor) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        sum += (x - y).abs();
    }
    sum / a.data().len() as f64
}

pub fn run() -> Result<String, String> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x8_1205);
    let mut worst = 0.0f64;
    for draw in 0..DRAWS {
        let h = rng.gen_range(2..7);
        let w = rng.gen_range(2..7);
        let ph = sample(&mut rng, vec![3, h, w])?;
        let pi = sample(&mut rng, vec![1, h, w])?;
        let pr = sample(&mut rng, vec![3, h, w])?;
        let th = sample(&mut rng, vec![3, h, w])?;
        let ti = sample(&mut rng, vec![1, h, w])?;
        let tr = sample(&mut rng, vec![3, h, w])?;

        let got = enh_loss(&ph, &pi, &pr, &th, &ti, &tr)
            .map_err(|e| e.to_string())?
            .item()
            .map_err(|e| e.to_string())?;
        let want = oracle_mean_l1(&ph, &th)
            + 0.5 * (oracle_mean_l1(&pi, &ti) + oracle_mean_l1(&pr, &tr));
        let err = (got - want).abs();
        worst = worst.max(err);
        require(
            err <= TOL,
            format!("draw {draw}: enhancement loss {got} vs oracle {want}, err {err:.3e}"),
        )?;
    }

    // A polarity target with all three classes present: one positive
    // pixel, one negative, the rest silent.
    let stream = EventStream::new(
        4,
        3,
        vec![
            Event { t: 5, x: 0, y: 0, polarity: 1, label: None },
            Event { t: 6, x: 2, y: 1, polarity: -1, label: None },
        ],
    )
    .map_err(|e| e.to_string())?;
    let target = to_polarity_map(&rasterize_counts(&stream, 0, 100).map_err(|e| e.to_string())?);

    // Uniform logits: every class equally likely at each pixel, so the
    // cross-entropy must be ln 3 no matter which class the target
    // picks or what the shared constant is.
    let ln3 = 3.0f64.ln();
    let mut worst_ce = 0.0f64;
    for fill in [0.0, 1.0, -42.0, 250.0] {
        let logits = Tensor::full(vec![3, 3, 4], fill).map_err(|e| e.to_string())?;
        let got = den_loss(&logits, &target)
            .map_err(|e| e.to_string())?
            .item()
            .map_err(|e| e.to_string())?;
        let err = (got - ln3).abs();
        worst_ce = worst_ce.max(err);
        require(
            err <= TOL,
            format!("fill {fill}: uniform cross-entropy {got} vs ln 3 {ln3}, err {err:.3e}"),
        )?;
    }
    // Per-pixel constants that differ across pixels but not classes
    // are still uniform distributions.
    let pixel: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut data = Vec::with_capacity(36);
    for _ in 0..3 {
        data.extend_from_slice(&pixel);
    }
    let logits = Tensor::new(vec![3, 3, 4], data).map_err(|e| e.to_string())?;
    let got = den_loss(&logits, &target)
        .map_err(|e| e.to_string())?
        .item()
        .map_err(|e| e.to_string())?;
    let err = (got - ln3).abs();
    worst_ce = worst_ce.max(err);
    require(
        err <= TOL,
        format!("per-pixel uniform cross-entropy {got} vs ln 3, err {err:.3e}"),
    )?;

    Ok(format!(
        "{DRAWS} enhancement draws (worst err {worst:.3e}), uniform cross-entropy at ln 3 (worst err {worst_ce:.3e})"
    ))
}
