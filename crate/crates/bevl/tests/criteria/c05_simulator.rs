//! The event simulator must stay quiet on static input, spend its
//! background-activity budget at the configured Poisson rate, and keep
//! signal labels faithful: stripping a noisy stream back to its
//! signal-labeled events must reproduce the clean stream exactly.

use bevl::event::Label;
use bevl::sim::{
    inject_ba_noise, render_scene, simulate_events, ScenePattern, SceneSpec, SimConfig,
};

use super::require;

const N_SEEDS: u64 = 1000;

fn edge_spec(velocity: (f64, f64), phase: f64, n_frames: usize) -> SceneSpec {
    SceneSpec {
        pattern: ScenePattern::MovingEdge,
        width: 32,
        height: 32,
        n_frames,
        frame_interval_us: 20_000,
        velocity,
        phase,
    }
}

pub fn run() -> Result<String, String> {
    // A zero-velocity pattern renders identical frames, so the log
    // intensity never moves and no pixel may cross the threshold.
    for phase in [0.0, 3.5, 11.25] {
        let scene = render_scene(&edge_spec((0.0, 0.0), phase, 4)).map_err(|e| e.to_string())?;
        let clean = simulate_events(&scene, &SimConfig::default()).map_err(|e| e.to_string())?;
        require(
            clean.events().is_empty(),
            format!(
                "static scene with phase {phase} produced {} events, expected 0",
                clean.events().len()
            ),
        )?;
    }

    // Noise budget: the injector draws a Poisson count with mean
    // rate * W * H * T over the stream's time window. Average the
    // labeled-noise counts across many seeds and compare against that
    // mean, with a slack of four standard deviations of a single draw.
    let scene = render_scene(&edge_spec((50.0, 0.0), 5.0, 2)).map_err(|e| e.to_string())?;
    let base = SimConfig {
        ba_rate: 25.0,
        ..SimConfig::default()
    };
    let clean = simulate_events(&scene, &base).map_err(|e| e.to_string())?;
    let (t0, t1) = clean
        .full_window()
        .ok_or_else(|| "moving scene produced no events".to_string())?;
    let seconds = (t1 - t0) as f64 / 1e6;
    let lambda = base.ba_rate * (clean.width() * clean.height()) as f64 * seconds;
    require(
        lambda > 30.0,
        format!("noise mean {lambda:.1} too small for a meaningful budget check"),
    )?;

    let mut total_noise = 0u64;
    for seed in 0..N_SEEDS {
        let cfg = SimConfig { seed, ..base };
        let noisy = inject_ba_noise(&clean, &cfg).map_err(|e| e.to_string())?;
        total_noise += noisy.with_label(Label::Noise).events().len() as u64;

        // Label fidelity on every draw: dropping the injected noise
        // must recover the clean events bit for bit, order included.
        let signal = noisy.with_label(Label::Signal);
        require(
            signal.events() == clean.events(),
            format!("seed {seed}: signal-labeled subset differs from the clean stream"),
        )?;
    }
    let mean = total_noise as f64 / N_SEEDS as f64;
    let slack = 4.0 * lambda.sqrt();
    require(
        (mean - lambda).abs() <= slack,
        format!(
            "noise count mean {mean:.2} vs expected {lambda:.2}, allowed slack {slack:.2}"
        ),
    )?;

    Ok(format!(
        "static scenes silent, noise mean {mean:.1} vs {lambda:.1} (slack {slack:.1}), labels faithful over {N_SEEDS} seeds"
    ))
}
