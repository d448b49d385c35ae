//! Structural checks on the event-image attention block: the channel
//! attention matrix must be row-stochastic, zeroing the projection and
//! positional-encoding parameters must reduce the block to the
//! identity on the image features, and its gradients must match
//! central finite differences.

use bevl::net::{eiab_attention, eiab_forward, init_eiab};
use bevl::tensor::{backward, fd_gradient, ParamSet, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::require;

const ROW_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;

fn feature(rng: &mut ChaCha12Rng, c: usize, h: usize, w: usize) -> Result<Tensor, String> {
    // Magnitudes bounded away from zero keep the residual-identity
    // comparison below safe to do on raw bits.
    let data: Vec<f64> = (0..c * h * w)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(vec![c, h, w], data).map_err(|e| e.to_string())
}

fn block(rng: &mut ChaCha12Rng, c: usize) -> Result<ParamSet, String> {
    let mut ps = ParamSet::new();
    init_eiab(&mut ps, rng, "b", c).map_err(|e| e.to_string())?;
    Ok(ps)
}

/// Contracts a tensor to a scalar with fixed pseudo-random weights so
/// every output element influences the loss.
fn pin(t: &Tensor) -> bevl::tensor::Result<Tensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x9e3779b9);
    let n = t.numel();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    t.reshape(vec![n])?.mul(&Tensor::new(vec![n], w)?)?.sum()
}

fn forward_loss(ps: &ParamSet) -> bevl::tensor::Result<Tensor> {
    let img = ps.require("in.img")?;
    let ev = ps.require("in.ev")?;
    let out = eiab_forward(ps, "b", img, ev).map_err(|e| TensorError::Invalid {
        op: "eiab",
        what: e.to_string(),
    })?;
    pin(&out)
}

pub fn run() -> Result<String, String> {
    // Row-stochastic attention across channel counts and seeds.
    let mut worst_row = 0.0f64;
    for (seed, c) in [(1u64, 2usize), (2, 4), (3, 8), (4, 4), (5, 2)] {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let ps = block(&mut rng, c)?;
        let img = feature(&mut rng, c, 6, 6)?;
        let ev = feature(&mut rng, c, 6, 6)?;
        let a = eiab_attention(&ps, "b", &img, &ev).map_err(|e| e.to_string())?;
        require(
            a.shape() == [c, c],
            format!("attention shape {:?}, expected ({c}, {c})", a.shape()),
        )?;
        for (r, row) in a.data().chunks_exact(c).enumerate() {
            let sum: f64 = row.iter().sum();
            worst_row = worst_row.max((sum - 1.0).abs());
            require(
                (sum - 1.0).abs() <= ROW_TOL,
                format!("seed {seed} c {c}: attention row {r} sums to {sum}"),
            )?;
            require(
                row.iter().all(|&p| p > 0.0),
                format!("seed {seed} c {c}: attention row {r} has a non-positive entry"),
            )?;
        }
    }

    // With the projection and positional encoding zeroed, the block is
    // output = 0 + 0 + f_img and must return the image features with
    // their exact bit patterns.
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    let c = 4;
    let mut ps = block(&mut rng, c)?;
    for name in ["b.wp.w", "b.wp.b", "b.cpe.w", "b.cpe.b"] {
        let shape = ps
            .require(name)
            .map_err(|e| e.to_string())?
            .shape()
            .to_vec();
        let zero = Tensor::full(shape, 0.0).map_err(|e| e.to_string())?;
        ps.set(name, zero).map_err(|e| e.to_string())?;
    }
    let img = feature(&mut rng, c, 8, 8)?;
    let ev = feature(&mut rng, c, 8, 8)?;
    let out = eiab_forward(&ps, "b", &img, &ev).map_err(|e| e.to_string())?;
    let identical = out.shape() == img.shape()
        && out
            .data()
            .iter()
            .zip(img.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    require(
        identical,
        "zeroed projection did not reproduce the image features exactly".to_string(),
    )?;

    // Gradient check through the full block, inputs included. The
    // block is smooth (softmax, L2 normalization, convolutions), so
    // central differences are trustworthy everywhere.
    let mut worst_grad = 0.0f64;
    for seed in 10..15u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = block(&mut rng, 4)?;
        ps.insert("in.img", feature(&mut rng, 4, 6, 6)?)
            .map_err(|e| e.to_string())?;
        ps.insert("in.ev", feature(&mut rng, 4, 6, 6)?)
            .map_err(|e| e.to_string())?;

        let tape = Tape::new();
        let attached = ps.attach(&tape, "").map_err(|e| e.to_string())?;
        let loss = forward_loss(&attached).map_err(|e| e.to_string())?;
        let grads = backward(&loss).map_err(|e| e.to_string())?;
        let fd = fd_gradient(|p| forward_loss(p)?.item(), &ps, 1e-5).map_err(|e| e.to_string())?;
        for (name, _) in ps.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| format!("no tape gradient for {name}"))?
                .data();
            let f = fd
                .get(name)
                .ok_or_else(|| format!("no fd gradient for {name}"))?
                .data();
            for (gi, fi) in g.iter().zip(f) {
                let rel = (gi - fi).abs() / (1e-6 + fi.abs());
                worst_grad = worst_grad.max(rel);
                require(
                    rel <= GRAD_TOL,
                    format!("seed {seed} {name}: tape {gi} vs fd {fi}, rel {rel:.3e}"),
                )?;
            }
        }
    }

    Ok(format!(
        "rows stochastic (worst {worst_row:.2e}), zeroed projection is identity, gradients match fd (worst rel {worst_grad:.2e})"
    ))
}
