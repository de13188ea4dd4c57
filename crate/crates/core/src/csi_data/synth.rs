//! Physics-based synthetic CSI.
//!
//! Each subcarrier sees the frequency response of a multipath channel,
//! `h(f, t) = Σ_i a_i(t) · exp(-j 2π f τ_i(t))`. Static paths (line of sight,
//! wall reflections, a user-specific body reflection) depend on the location
//! and the user; one dynamic path follows the hand and is modulated in both
//! gain and delay by the gesture.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{amplitude_of, CsiDataset, CsiSample, DataSource, DatasetMeta, TaskSpec, GR, IL, UI};
use crate::error::{invalid, Result};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Time-varying gain and path-length change of a moving reflector.
///
/// Outside `[onset_s, onset_s + width_s]` the reflector rests: gain is
/// `rest_gain` and the extra path length is zero. Inside, the path length
/// follows `extent_m · (1 - cos 2π·cycles·s) / 2` and the gain rises to 1 at
/// the middle of the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GestureMotion {
    pub onset_s: f64,
    pub width_s: f64,
    pub cycles: f64,
    pub extent_m: f64,
    pub rest_gain: f64,
}

impl GestureMotion {
    /// `(gain, extra_delay_s)` at time `t`.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let s = (t - self.onset_s) / self.width_s;
        if !(0.0..=1.0).contains(&s) {
            return (self.rest_gain, 0.0);
        }
        let bump = (PI * s).sin().powi(2);
        let gain = self.rest_gain + (1.0 - self.rest_gain) * bump;
        let length = self.extent_m * (1.0 - (2.0 * PI * self.cycles * s).cos()) / 2.0;
        (gain, length / SPEED_OF_LIGHT)
    }

    fn is_finite(&self) -> bool {
        [self.onset_s, self.width_s, self.cycles, self.extent_m, self.rest_gain]
            .iter()
            .all(|v| v.is_finite())
            && self.width_s > 0.0
    }
}

pub type PathModulation = GestureMotion;

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub attenuation: f64,
    pub delay_s: f64,
    /// `None` for a static path.
    pub motion: Option<PathModulation>,
}

impl PathParams {
    pub fn fixed(attenuation: f64, delay_s: f64) -> Self {
        PathParams {
            attenuation,
            delay_s,
            motion: None,
        }
    }
}

/// Frequency response at `freq_hz` of the multipath sum, sampled on `t_grid`.
pub fn synth_cir(paths: &[PathParams], freq_hz: f64, t_grid: &[f64]) -> Result<Vec<Complex64>> {
    if paths.is_empty() {
        return Err(invalid("path list is empty"));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) || t_grid.iter().any(|t| !t.is_finite()) {
        return Err(invalid("time grid must be finite and strictly increasing"));
    }
    if !freq_hz.is_finite() {
        return Err(invalid("frequency must be finite"));
    }
    for (i, p) in paths.iter().enumerate() {
        let ok = p.attenuation.is_finite()
            && p.attenuation >= 0.0
            && p.delay_s.is_finite()
            && p.delay_s >= 0.0
            && p.motion.is_none_or(|m| m.is_finite());
        if !ok {
            return Err(invalid(format!("path {i} has invalid parameters: {p:?}")));
        }
    }
    Ok(t_grid
        .iter()
        .map(|&t| {
            paths
                .iter()
                .map(|p| {
                    let (gain, extra) = p.motion.map_or((1.0, 0.0), |m| m.at(t));
                    let phase = -2.0 * PI * freq_hz * (p.delay_s + extra);
                    Complex64::from_polar(p.attenuation * gain, phase)
                })
                .sum()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_gestures: usize,
    pub num_locations: usize,
    pub num_users: usize,
    pub samples_per_combo: usize,
    pub links: usize,
    pub subcarriers: usize,
    pub packets: usize,
    pub base_frequency_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub sampling_rate_hz: f64,
    pub noise_sigma: f64,
    /// Scale of per-sample variation (timing, extent, gain, small delay
    /// drift). `0` makes samples with equal latent factors identical.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_gestures: 6,
            num_locations: 5,
            num_users: 5,
            samples_per_combo: 20,
            links: 1,
            subcarriers: 16,
            packets: 128,
            base_frequency_hz: 5.18e9,
            subcarrier_spacing_hz: 1.25e6,
            sampling_rate_hz: 100.0,
            noise_sigma: 0.02,
            jitter: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn total_samples(&self) -> usize {
        self.num_gestures * self.num_locations * self.num_users * self.samples_per_combo
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_gestures", self.num_gestures),
            ("num_locations", self.num_locations),
            ("num_users", self.num_users),
            ("samples_per_combo", self.samples_per_combo),
            ("links", self.links),
            ("subcarriers", self.subcarriers),
            ("packets", self.packets),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("num_gestures", self.num_gestures),
            ("num_locations", self.num_locations),
            ("num_users", self.num_users),
        ] {
            if v < 2 {
                return Err(invalid(format!("{name} must be at least 2 to form a task")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma must be finite and >= 0"));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(invalid("jitter must be finite and >= 0"));
        }
        if !(self.sampling_rate_hz > 0.0 && self.base_frequency_hz > 0.0) {
            return Err(invalid("sampling rate and base frequency must be positive"));
        }
        if !(self.subcarrier_spacing_hz.is_finite() && self.subcarrier_spacing_hz >= 0.0) {
            return Err(invalid("subcarrier spacing must be finite and >= 0"));
        }
        Ok(())
    }

    fn frequencies(&self) -> Vec<f64> {
        let mid = (self.subcarriers as f64 - 1.0) / 2.0;
        (0..self.subcarriers)
            .map(|k| self.base_frequency_hz + (k as f64 - mid) * self.subcarrier_spacing_hz)
            .collect()
    }
}

/// Static geometry seen by one link at one location.
#[derive(Debug, Clone)]
struct LinkScene {
    los_delay: f64,
    reflections: Vec<(f64, f64)>,
    body_delay: f64,
}

#[derive(Debug, Clone)]
struct UserTraits {
    scale: f64,
    signature_delay: f64,
}

/// Gesture motion templates, in units of the recording duration.
#[derive(Debug, Clone, Copy)]
struct GestureTemplate {
    onset: f64,
    width: f64,
    cycles: f64,
    extent_m: f64,
}

const GESTURE_TEMPLATES: [GestureTemplate; 6] = [
    GestureTemplate { onset: 0.08, width: 0.40, cycles: 1.0, extent_m: 0.15 },
    GestureTemplate { onset: 0.50, width: 0.42, cycles: 1.0, extent_m: 0.15 },
    GestureTemplate { onset: 0.10, width: 0.80, cycles: 2.0, extent_m: 0.22 },
    GestureTemplate { onset: 0.20, width: 0.60, cycles: 3.0, extent_m: 0.10 },
    GestureTemplate { onset: 0.10, width: 0.80, cycles: 4.0, extent_m: 0.28 },
    GestureTemplate { onset: 0.30, width: 0.40, cycles: 2.0, extent_m: 0.32 },
];

struct Scene {
    locations: Vec<Vec<LinkScene>>,
    users: Vec<UserTraits>,
    gestures: Vec<GestureTemplate>,
}

impl Scene {
    fn generate(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Scene {
        let ns = 1e-9;
        let locations = (0..cfg.num_locations)
            .map(|_| {
                (0..cfg.links)
                    .map(|_| {
                        let los_delay = rng.random_range(10.0..30.0) * ns;
                        let reflections = (0..3)
                            .map(|_| {
                                (
                                    rng.random_range(0.2..0.6),
                                    los_delay + rng.random_range(5.0..60.0) * ns,
                                )
                            })
                            .collect();
                        let body_delay = los_delay + rng.random_range(3.0..30.0) * ns;
                        LinkScene {
                            los_delay,
                            reflections,
                            body_delay,
                        }
                    })
                    .collect()
            })
            .collect();
        let users = (0..cfg.num_users)
            .map(|_| UserTraits {
                scale: rng.random_range(0.6..1.4),
                signature_delay: rng.random_range(0.5..8.0) * ns,
            })
            .collect();
        let gestures = (0..cfg.num_gestures)
            .map(|g| {
                GESTURE_TEMPLATES.get(g).copied().unwrap_or_else(|| GestureTemplate {
                    onset: rng.random_range(0.05..0.4),
                    width: rng.random_range(0.3..0.55),
                    cycles: rng.random_range(1..6) as f64,
                    extent_m: rng.random_range(0.1..0.35),
                })
            })
            .collect();
        Scene {
            locations,
            users,
            gestures,
        }
    }
}

struct Variation {
    onset: f64,
    width: f64,
    extent: f64,
    gain: f64,
    static_drift: f64,
    body_drift: f64,
}

impl Variation {
    fn draw(jitter: f64, rng: &mut ChaCha8Rng) -> Variation {
        let mut n = |std: f64| -> f64 {
            if jitter == 0.0 {
                0.0
            } else {
                Normal::new(0.0, std * jitter).unwrap().sample(rng)
            }
        };
        Variation {
            onset: n(0.03),
            width: 1.0 + n(0.08),
            extent: 1.0 + n(0.08),
            gain: 1.0 + n(0.05),
            static_drift: n(0.002e-9),
            body_drift: n(0.01e-9),
        }
    }
}

/// Generates a labelled dataset with tasks `GR`, `IL` and `UI`.
///
/// Deterministic in `cfg`: the scene (locations, users, gesture templates)
/// and every per-sample draw come from ChaCha streams keyed by `cfg.seed`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<CsiDataset> {
    cfg.validate()?;
    let mut scene_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scene = Scene::generate(cfg, &mut scene_rng);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();

    let duration = cfg.packets as f64 / cfg.sampling_rate_hz;
    let t_grid: Vec<f64> = (0..cfg.packets)
        .map(|p| p as f64 / cfg.sampling_rate_hz)
        .collect();
    let freqs = cfg.frequencies();
    let shape = [cfg.links, cfg.subcarriers, cfg.packets];

    let mut samples = Vec::with_capacity(cfg.total_samples());
    for g in 0..cfg.num_gestures {
        for l in 0..cfg.num_locations {
            for u in 0..cfg.num_users {
                for rep in 0..cfg.samples_per_combo {
                    let var = Variation::draw(cfg.jitter, &mut sample_rng);
                    let mut h = Vec::with_capacity(shape.iter().product());
                    for link in &scene.locations[l] {
                        let paths = sample_paths(
                            link,
                            &scene.users[u],
                            &scene.gestures[g],
                            &var,
                            duration,
                        );
                        let mut plane = vec![Complex64::new(0.0, 0.0); cfg.subcarriers * cfg.packets];
                        for (k, &f) in freqs.iter().enumerate() {
                            let series = synth_cir(&paths, f, &t_grid)?;
                            plane[k * cfg.packets..(k + 1) * cfg.packets].copy_from_slice(&series);
                        }
                        h.extend(plane);
                    }
                    let clean = amplitude_of(&h, shape)?;
                    let amplitude = clean
                        .into_iter()
                        .map(|a| {
                            let v = if cfg.noise_sigma > 0.0 {
                                a + noise.sample(&mut sample_rng)
                            } else {
                                a
                            };
                            v.max(0.0) as f32
                        })
                        .collect();
                    let labels = BTreeMap::from([
                        (GR.to_string(), g),
                        (IL.to_string(), l),
                        (UI.to_string(), u),
                    ]);
                    samples.push(CsiSample {
                        sample_id: format!("g{g}_l{l}_u{u}_r{rep}"),
                        shape,
                        amplitude,
                        labels,
                    });
                }
            }
        }
    }

    let meta = DatasetMeta {
        tasks: vec![
            TaskSpec::numbered(GR, "gesture", cfg.num_gestures)?,
            TaskSpec::numbered(IL, "location", cfg.num_locations)?,
            TaskSpec::numbered(UI, "user", cfg.num_users)?,
        ],
        links: cfg.links,
        subcarriers: cfg.subcarriers,
        packets: cfg.packets,
        sampling_rate_hz: Some(cfg.sampling_rate_hz),
        duration_s: Some(duration),
        source: DataSource::Synth,
    };
    CsiDataset::new(meta, samples)
}

fn sample_paths(
    link: &LinkScene,
    user: &UserTraits,
    gesture: &GestureTemplate,
    var: &Variation,
    duration: f64,
) -> Vec<PathParams> {
    let drift = var.static_drift.abs();
    let mut paths = Vec::with_capacity(6);
    paths.push(PathParams::fixed(1.0, link.los_delay + drift));
    for &(a, d) in &link.reflections {
        paths.push(PathParams::fixed(a, d + drift));
    }
    let body = (link.body_delay + user.signature_delay + var.body_drift).max(0.0);
    paths.push(PathParams::fixed(0.3 * user.scale, body));
    paths.push(PathParams {
        attenuation: 0.4 * user.scale * var.gain.max(0.0),
        delay_s: body,
        motion: Some(GestureMotion {
            onset_s: ((gesture.onset + var.onset) * duration).max(0.0),
            width_s: (gesture.width * var.width.max(0.2)) * duration,
            cycles: gesture.cycles,
            extent_m: gesture.extent_m * var.extent.max(0.0),
            rest_gain: 0.3,
        }),
    });
    paths
}
