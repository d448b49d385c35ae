//! The three denoising stages must match independent scalar-loop
//! oracles bit for bit on 200 random instances covering both band
//! modes, window sizes 3 to 7, and streams with and without labels.
//!
//! The oracles restate the rules from their definitions: the adaptive
//! threshold is the replicate-padded square-window mean of absolute
//! gradients floored globally; the mask zeroes gradients strictly
//! inside the band around the local threshold (or at or below it plus
//! the band, in high-pass mode); the filter keeps exactly the events
//! whose pixel holds a nonzero mask value, in order. Comparisons use
//! `f64::to_bits` so even sign or rounding drift fails.

use bevl::denoise::{adaptive_threshold, apply_mask, compute_mask, BandMode, DenoiseConfig};
use bevl::event::{Event, EventStream, Label};
use bevl::retinex::GradientMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::require;

fn oracle_threshold(g: &[f64], w: usize, h: usize, cfg: &DenoiseConfig) -> Vec<f64> {
    let half = (cfg.window_size / 2) as isize;
    let area = (cfg.window_size * cfg.window_size) as f64;
    let (wi, hi) = (w as isize, h as isize);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..hi {
        for x in 0..wi {
            let mut sum = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let sx = (x + dx).clamp(0, wi - 1) as usize;
                    let sy = (y + dy).clamp(0, hi - 1) as usize;
                    sum += g[sy * w + sx].abs();
                }
            }
            out.push((sum / area).max(cfg.global_floor));
        }
    }
    out
}

fn oracle_mask(g: &[f64], q: &[f64], cfg: &DenoiseConfig) -> Vec<f64> {
    g.iter()
        .zip(q)
        .map(|(&gv, &qv)| {
            let keep = match cfg.band_mode {
                BandMode::TwoSided => gv <= qv - cfg.band_halfwidth || gv >= qv + cfg.band_halfwidth,
                BandMode::HighPass => gv > qv + cfg.band_halfwidth,
            };
            if keep {
                gv
            } else {
                0.0
            }
        })
        .collect()
}

fn oracle_filter(events: &[Event], mask: &[f64], w: usize) -> Vec<Event> {
    events
        .iter()
        .copied()
        .filter(|e| mask[e.y as usize * w + e.x as usize] != 0.0)
        .collect()
}

const INSTANCES: usize = 200;

pub fn run() -> Result<String, String> {
    let mut rng = ChaCha12Rng::seed_from_u64(40813);
    for inst in 0..INSTANCES {
        let w = rng.gen_range(4..=12);
        let h = rng.gen_range(4..=12);
        let cfg = DenoiseConfig {
            window_size: [3, 5, 7][rng.gen_range(0..3)],
            band_halfwidth: rng.gen_range(0.0..0.3),
            global_floor: rng.gen_range(0.0..0.2),
            band_mode: if inst % 2 == 0 {
                BandMode::TwoSided
            } else {
                BandMode::HighPass
            },
        };

        // Gradients: mostly uniform, with exact zeros sprinkled in so
        // the zero-is-dropped convention is exercised.
        let g: Vec<f64> = (0..w * h)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    0.0
                } else {
                    rng.gen_range(0.0..0.5)
                }
            })
            .collect();
        let gmap = GradientMap::from_values(w, h, g.clone())
            .ok_or_else(|| format!("instance {inst}: bad gradient geometry"))?;

        let qmap = adaptive_threshold(&gmap, &cfg).map_err(|e| e.to_string())?;
        let q_oracle = oracle_threshold(&g, w, h, &cfg);
        for (i, (got, want)) in qmap.values().iter().zip(&q_oracle).enumerate() {
            require(
                got.to_bits() == want.to_bits(),
                format!("instance {inst}: threshold[{i}] {got:.17e} != oracle {want:.17e}"),
            )?;
        }

        let mask = compute_mask(&gmap, &qmap, &cfg).map_err(|e| e.to_string())?;
        let m_oracle = oracle_mask(&g, &q_oracle, &cfg);
        for (i, (got, want)) in mask.values().iter().zip(&m_oracle).enumerate() {
            require(
                got.to_bits() == want.to_bits(),
                format!("instance {inst}: mask[{i}] {got:.17e} != oracle {want:.17e}"),
            )?;
        }

        let labeled = rng.gen_bool(0.5);
        let n_events = rng.gen_range(0..200);
        let events: Vec<Event> = (0..n_events)
            .map(|_| Event {
                t: rng.gen_range(0..50_000),
                x: rng.gen_range(0..w as u16),
                y: rng.gen_range(0..h as u16),
                polarity: if rng.gen_bool(0.5) { 1 } else { -1 },
                label: if labeled {
                    Some(if rng.gen_bool(0.5) {
                        Label::Signal
                    } else {
                        Label::Noise
                    })
                } else {
                    None
                },
            })
            .collect();
        let stream = EventStream::new(w, h, events).map_err(|e| e.to_string())?;

        let kept = apply_mask(&stream, &mask).map_err(|e| e.to_string())?;
        let want = oracle_filter(stream.events(), &m_oracle, w);
        require(
            kept.events() == want.as_slice(),
            format!(
                "instance {inst}: filter kept {} events, oracle kept {}",
                kept.len(),
                want.len()
            ),
        )?;
    }
    Ok(format!(
        "{INSTANCES} instances, all three stages bit-identical"
    ))
}
