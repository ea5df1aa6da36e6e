//! Synthetic city movies for desk-scale experiments.
//!
//! A city is a seeded road grid plus a diagonal avenue. Every road pixel
//! carries a diurnal volume cycle with morning and evening rush hours; speed
//! dips when volume peaks. The covid profile scales volumes down and
//! flattens the rush-hour peaks. Off-road pixels stay zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Frames, TrafficMovie, CHANNELS, FRAMES_PER_DAY};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Pre,
    Covid,
}

impl Profile {
    pub fn year(self) -> u16 {
        match self {
            Profile::Pre => 2019,
            Profile::Covid => 2020,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Profile::Pre),
            "covid" => Ok(Profile::Covid),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected pre or covid)"))),
        }
    }
}

fn default_frames_per_day() -> usize {
    FRAMES_PER_DAY
}

fn default_covid_factor() -> f64 {
    0.6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Empty means `synth-<seed>`.
    #[serde(default)]
    pub city: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub days: usize,
    pub profile: Profile,
    #[serde(default = "default_frames_per_day")]
    pub frames_per_day: usize,
    #[serde(default = "default_covid_factor")]
    pub covid_factor: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, height: usize, width: usize, days: usize, profile: Profile) -> Self {
        SynthConfig {
            city: format!("synth-{seed}"),
            seed,
            height,
            width,
            days,
            profile,
            frames_per_day: FRAMES_PER_DAY,
            covid_factor: 0.6,
        }
    }
}

/// Road pixels of the city with this seed, row-major `(H, W)` of 0/1.
pub fn road_skeleton(seed: u64, height: usize, width: usize) -> Vec<u8> {
    let mut r = rng::stream(seed, &[0x726f_6164]);
    let spacing = r.gen_range(3..=5usize);
    let (oh, ow) = (r.gen_range(0..spacing), r.gen_range(0..spacing));
    let mut out = vec![0u8; height * width];
    for h in 0..height {
        let diag = h * width / height.max(1);
        for w in 0..width {
            let grid = (h + oh) % spacing == 0 || (w + ow) % spacing == 0;
            out[h * width + w] = u8::from(grid || w == diag);
        }
    }
    out
}

fn bump(x: f64, mu: f64, sigma: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Relative activity over the day, in [0, 1].
fn diurnal(hour: f64, profile: Profile) -> f64 {
    let s = match profile {
        Profile::Pre => 0.08 + 0.6 * bump(hour, 8.0, 1.3) + 0.65 * bump(hour, 17.5, 1.7) + 0.25 * bump(hour, 13.0, 3.0),
        Profile::Covid => 0.08 + 0.25 * bump(hour, 8.5, 2.5) + 0.3 * bump(hour, 17.0, 3.0) + 0.3 * bump(hour, 13.0, 3.5),
    };
    s.min(1.0)
}

pub fn synth_city(seed: u64, height: usize, width: usize, days: usize, profile: Profile) -> Result<TrafficMovie> {
    synth_city_with(&SynthConfig::new(seed, height, width, days, profile))
}

pub fn synth_city_with(cfg: &SynthConfig) -> Result<TrafficMovie> {
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::Config(format!(
            "synthetic cities need H, W >= 8, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    if cfg.frames_per_day == 0 {
        return Err(Error::Config("frames_per_day must be positive".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let roads = road_skeleton(cfg.seed, h, w);
    let mut site = rng::stream(cfg.seed, &[0x7369_7465]);
    // Per road pixel: volume amplitude, speed amplitude, heading weights.
    let sites: Vec<Option<(f64, f64, [f64; 4])>> = roads
        .iter()
        .map(|&on| {
            let amp = site.gen_range(40.0..200.0);
            let speed = site.gen_range(80.0..200.0);
            let heads = [0; 4].map(|_| site.gen_range(0.3..1.0));
            (on == 1).then_some((amp, speed, heads))
        })
        .collect();
    let factor = match cfg.profile {
        Profile::Pre => 1.0,
        Profile::Covid => cfg.covid_factor,
    };
    let t_total = cfg.days * cfg.frames_per_day;
    let mut data = vec![0u8; t_total * h * w * CHANNELS];
    let mut noise = rng::stream(cfg.seed, &[0x6e6f_6973, cfg.profile.year() as u64]);
    let mut day_rng = rng::stream(cfg.seed, &[0x0064_6179, cfg.profile.year() as u64]);
    let mut idx = 0;
    for _day in 0..cfg.days {
        let day_factor = day_rng.gen_range(0.85..1.15);
        for b in 0..cfg.frames_per_day {
            let hour = 24.0 * b as f64 / cfg.frames_per_day as f64;
            let level = diurnal(hour, cfg.profile);
            let pre_level = diurnal(hour, Profile::Pre);
            for s in &sites {
                match s {
                    None => idx += CHANNELS,
                    Some((amp, speed, heads)) => {
                        for head in heads {
                            let vol = amp * head * level * factor * day_factor + noise.gen_range(-6.0..6.0);
                            let spd = speed * (1.0 - 0.45 * pre_level * level) + noise.gen_range(-6.0..6.0);
                            data[idx] = vol.round().clamp(1.0, 255.0) as u8;
                            data[idx + 1] = spd.round().clamp(1.0, 255.0) as u8;
                            idx += 2;
                        }
                    }
                }
            }
        }
    }
    let frames = Frames::new(data, [t_total, h, w, CHANNELS])?;
    Ok(TrafficMovie {
        city: if cfg.city.is_empty() { format!("synth-{}", cfg.seed) } else { cfg.city.clone() },
        year: cfg.profile.year(),
        frames,
        frames_per_day: cfg.frames_per_day,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{derive_mask, MaskSource};

    #[test]
    fn deterministic() {
        let a = synth_city(3, 8, 9, 1, Profile::Pre).unwrap();
        let b = synth_city(3, 8, 9, 1, Profile::Pre).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames, synth_city(4, 8, 9, 1, Profile::Pre).unwrap().frames);
    }

    #[test]
    fn covid_has_less_volume() {
        let vol = |p| {
            let m = synth_city(5, 10, 10, 1, p).unwrap();
            m.frames.data().iter().step_by(2).map(|&v| v as u64).sum::<u64>()
        };
        assert!(vol(Profile::Covid) < vol(Profile::Pre));
    }

    #[test]
    fn mask_is_skeleton() {
        for seed in 0..4 {
            let m = synth_city(seed, 12, 9, 1, Profile::Covid).unwrap();
            let mask = derive_mask(&m.frames, MaskSource::Training).unwrap();
            assert_eq!(mask.data, road_skeleton(seed, 12, 9));
        }
    }

    #[test]
    fn too_small() {
        assert!(synth_city(0, 7, 8, 1, Profile::Pre).is_err());
    }
}
