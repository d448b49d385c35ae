//! Reverse-mode gradients must match central finite differences with
//! max relative error at most 1e-4, for every tensor primitive and for
//! the full enhancer forward pass on 8x8 inputs, across at least 20
//! seeds.
//!
//! Each primitive case builds small random parameter tensors, runs the
//! op, contracts the output against a fixed random weighting so every
//! output element influences the scalar loss, and compares the tape
//! gradient with a central-difference sweep over every parameter
//! element. Inputs stay clear of kinks: relu, leaky relu, and abs see
//! values bounded away from zero, log and powf see positive values,
//! divisions see denominators bounded away from zero.

use bevl::net::EnhancerNet;
use bevl::net::NetConfig;
use bevl::tensor::{backward, concat, fd_gradient, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::require;

type TRes<T> = bevl::tensor::Result<T>;

/// How a parameter tensor is sampled, chosen per op so no input sits
/// on a derivative kink.
#[derive(Clone, Copy)]
enum Sampler {
    /// Uniform in [-1, 1].
    Any,
    /// Magnitude in [0.1, 1] with random sign.
    OffZero,
    /// Uniform in [0.5, 2].
    Positive,
    /// Uniform in [0.1, 0.5]; keeps sums of products moderate so deep
    /// positive-weight networks neither die nor saturate.
    Positive01,
}

fn sample(rng: &mut ChaCha12Rng, shape: &[usize], sampler: Sampler) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| match sampler {
            Sampler::Any => rng.gen_range(-1.0..1.0),
            Sampler::OffZero => {
                let mag = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            }
            Sampler::Positive => rng.gen_range(0.5..2.0),
            Sampler::Positive01 => rng.gen_range(0.1..0.5),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("static shape")
}

/// Contracts a tensor to a scalar against fixed pseudo-random weights
/// so every element gets a distinct influence on the loss.
fn pin(t: &Tensor) -> TRes<Tensor> {
    let mut rng = ChaCha12Rng::seed_from_u64(0x9e3779b9);
    let n = t.numel();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    t.reshape(vec![n])?.mul(&Tensor::new(vec![n], w)?)?.sum()
}

struct Case {
    name: &'static str,
    params: &'static [(&'static str, &'static [usize], Sampler)],
    build: fn(&ParamSet) -> TRes<Tensor>,
}

const CASES: &[Case] = &[
    Case {
        name: "add",
        params: &[("a", &[3, 4], Sampler::Any), ("b", &[3, 4], Sampler::Any)],
        build: |p| pin(&p.require("a")?.add(p.require("b")?)?),
    },
    Case {
        name: "sub",
        params: &[("a", &[3, 4], Sampler::Any), ("b", &[3, 4], Sampler::Any)],
        build: |p| pin(&p.require("a")?.sub(p.require("b")?)?),
    },
    Case {
        name: "mul",
        params: &[("a", &[3, 4], Sampler::Any), ("b", &[3, 4], Sampler::Any)],
        build: |p| pin(&p.require("a")?.mul(p.require("b")?)?),
    },
    Case {
        name: "div",
        params: &[
            ("a", &[3, 4], Sampler::Any),
            ("b", &[3, 4], Sampler::Positive),
        ],
        build: |p| pin(&p.require("a")?.div(p.require("b")?)?),
    },
    Case {
        name: "matmul",
        params: &[("a", &[3, 4], Sampler::Any), ("b", &[4, 2], Sampler::Any)],
        build: |p| pin(&p.require("a")?.matmul(p.require("b")?)?),
    },
    Case {
        name: "conv2d",
        params: &[
            ("x", &[2, 6, 6], Sampler::Any),
            ("w", &[3, 2, 3, 3], Sampler::Any),
            ("b", &[3], Sampler::Any),
        ],
        build: |p| pin(&p.require("x")?.conv2d(p.require("w")?, Some(p.require("b")?))?),
    },
    Case {
        name: "depthwise_conv2d",
        params: &[
            ("x", &[3, 6, 6], Sampler::Any),
            ("w", &[3, 3, 3], Sampler::Any),
            ("b", &[3], Sampler::Any),
        ],
        build: |p| {
            pin(&p
                .require("x")?
                .depthwise_conv2d(p.require("w")?, Some(p.require("b")?))?)
        },
    },
    Case {
        name: "relu",
        params: &[("x", &[3, 5], Sampler::OffZero)],
        build: |p| pin(&p.require("x")?.relu()?),
    },
    Case {
        name: "leaky_relu",
        params: &[("x", &[3, 5], Sampler::OffZero)],
        build: |p| pin(&p.require("x")?.leaky_relu(0.1)?),
    },
    Case {
        name: "sigmoid",
        params: &[("x", &[3, 5], Sampler::Any)],
        build: |p| pin(&p.require("x")?.sigmoid()?),
    },
    Case {
        name: "exp",
        params: &[("x", &[3, 5], Sampler::Any)],
        build: |p| pin(&p.require("x")?.exp()?),
    },
    Case {
        name: "log",
        params: &[("x", &[3, 5], Sampler::Positive)],
        build: |p| pin(&p.require("x")?.log()?),
    },
    Case {
        name: "abs",
        params: &[("x", &[3, 5], Sampler::OffZero)],
        build: |p| pin(&p.require("x")?.abs()?),
    },
    Case {
        name: "power",
        params: &[("x", &[3, 5], Sampler::Positive)],
        build: |p| pin(&p.require("x")?.powf(1.7)?),
    },
    Case {
        name: "sum",
        params: &[("x", &[3, 5], Sampler::Any)],
        build: |p| p.require("x")?.sum(),
    },
    Case {
        name: "mean",
        params: &[("x", &[3, 5], Sampler::Any)],
        build: |p| p.require("x")?.mean(),
    },
    Case {
        name: "softmax_axis0",
        params: &[("x", &[3, 5], Sampler::Any)],
        build: |p| pin(&p.require("x")?.softmax(0)?),
    },
    Case {
        name: "softmax_axis1",
        params: &[("x", &[3, 5], Sampler::Any)],
        build: |p| pin(&p.require("x")?.softmax(1)?),
    },
    Case {
        name: "concat",
        params: &[("a", &[2, 4], Sampler::Any), ("b", &[3, 4], Sampler::Any)],
        build: |p| pin(&concat(&[p.require("a")?, p.require("b")?], 0)?),
    },
    Case {
        name: "slice",
        params: &[("x", &[4, 6], Sampler::Any)],
        build: |p| pin(&p.require("x")?.slice(1, 1, 3)?),
    },
    Case {
        name: "avgpool2",
        params: &[("x", &[2, 6, 6], Sampler::Any)],
        build: |p| pin(&p.require("x")?.avgpool2()?),
    },
    Case {
        name: "upsample_nearest2",
        params: &[("x", &[2, 3, 3], Sampler::Any)],
        build: |p| pin(&p.require("x")?.upsample_nearest2()?),
    },
    Case {
        name: "transpose",
        params: &[("x", &[2, 3, 4], Sampler::Any)],
        build: |p| pin(&p.require("x")?.transpose(vec![2, 0, 1])?),
    },
    Case {
        name: "reshape",
        params: &[("x", &[2, 6], Sampler::Any)],
        build: |p| pin(&p.require("x")?.reshape(vec![3, 4])?),
    },
];

/// Tape gradient vs central differences for one loss over one
/// parameter set; returns the max relative error over all elements.
fn compare(
    ps: &ParamSet,
    h: f64,
    build: &dyn Fn(&ParamSet) -> TRes<Tensor>,
) -> Result<f64, String> {
    let tape = Tape::new();
    let attached = ps.attach(&tape, "").map_err(|e| e.to_string())?;
    let loss = build(&attached).map_err(|e| e.to_string())?;
    let grads = backward(&loss).map_err(|e| e.to_string())?;
    let fd = fd_gradient(|p| build(p)?.item(), ps, h).map_err(|e| e.to_string())?;

    let mut worst = 0.0f64;
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
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

pub fn run() -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut worst_case = "none";
    for seed in 0..SEEDS {
        for case in CASES {
            let mut rng = ChaCha12Rng::seed_from_u64(seed * 1000 + 7);
            let mut ps = ParamSet::new();
            for (name, shape, sampler) in case.params {
                ps.insert(*name, sample(&mut rng, shape, *sampler))
                    .map_err(|e| e.to_string())?;
            }
            let rel = compare(&ps, 1e-5, &case.build)?;
            if rel > worst {
                worst = rel;
                worst_case = case.name;
            }
            require(
                rel <= TOL,
                format!("{} seed {seed}: max rel err {rel:.3e} > {TOL:e}", case.name),
            )?;
        }

        let rel = enhancer_case(seed)?;
        if rel > worst {
            worst = rel;
            worst_case = "enhancer";
        }
        require(
            rel <= TOL,
            format!("enhancer seed {seed}: max rel err {rel:.3e} > {TOL:e}"),
        )?;
    }
    let n = CASES.len();
    Ok(format!(
        "{n} primitive cases + enhancer, {SEEDS} seeds, worst rel err {worst:.2e} ({worst_case})"
    ))
}

/// Full enhancer forward on 8x8 inputs: both branches, the attention
/// fusion, and the recombination, differentiated with respect to every
/// network parameter and all three inputs.
fn enhancer_case(seed: u64) -> Result<f64, String> {
    let net = EnhancerNet::new(NetConfig { base_channels: 2 }).map_err(|e| e.to_string())?;
    let init = net.init_params(seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed * 1000 + 13);
    // Same graph, kink-free by construction: strictly positive weights
    // and inputs keep every leaky-relu pre-activation in its identity
    // region, so the central differences never straddle a kink and the
    // comparison measures the backward rules, not derivative jumps.
    let mut ps = ParamSet::new();
    for (name, t) in init.iter() {
        ps.insert(name, sample(&mut rng, t.shape(), Sampler::Positive01))
            .map_err(|e| e.to_string())?;
    }
    let shapes: [(&str, &[usize]); 3] = [
        ("in.low", &[1, 8, 8]),
        ("in.refl", &[3, 8, 8]),
        ("in.events", &[3, 8, 8]),
    ];
    for (name, shape) in shapes {
        ps.insert(name, sample(&mut rng, shape, Sampler::Positive01))
            .map_err(|e| e.to_string())?;
    }
    let build = move |p: &ParamSet| -> TRes<Tensor> {
        let out = net
            .enhance(
                p,
                p.require("in.low")?,
                p.require("in.refl")?,
                p.require("in.events")?,
            )
            .map_err(|e| bevl::tensor::TensorError::Invalid {
                op: "enhancer",
                what: e.to_string(),
            })?;
        pin(&out.high)
    };
    compare(&ps, 1e-4, &build)
}
