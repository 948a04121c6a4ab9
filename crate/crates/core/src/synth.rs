//! Deterministic synthetic "place world": each place is a small procedural
//! street scene (buildings with window grids, road stripes, round trees)
//! rendered under varying viewpoint, illumination, noise and season tint.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ppm::{quantize, Ppm};
use crate::manifest::{Manifest, Record, Split};
use crate::retrieval::{geodistance, DEFAULT_MATCH_THRESHOLD_M, EARTH_RADIUS_M};
use crate::train::POSITIVE_RADIUS_M;
use crate::tensor::Tensor;

/// Distance between neighbouring place anchors.
pub const PLACE_SPACING_M: f64 = 50.0;
/// Largest geotag offset of a view from its place anchor.
pub const MAX_JITTER_M: f64 = 4.0;
pub const ORIGIN: (f64, f64) = (47.3769, 8.5417);

pub const PALETTE_FACADES: usize = 6;
pub const PALETTE_SKIES: usize = 3;
pub const PALETTE_GROUNDS: usize = 3;

pub const OFFSET_RANGE: (f64, f64) = (-0.2, 0.2);
/// Viewpoint offsets follow a normal distribution truncated to `OFFSET_RANGE`.
pub const OFFSET_SIGMA: f64 = 0.08;
pub const GAIN_RANGE: (f64, f64) = (0.8, 1.2);
pub const BIAS_RANGE: (f64, f64) = (-0.05, 0.05);
pub const NOISE_RANGE: (f64, f64) = (0.0, 0.03);
pub const TINT_RANGE: (f64, f64) = (0.9, 1.1);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub x0: f64,
    pub x1: f64,
    pub height: f64,
    pub color: [f64; 3],
    pub window_color: [f64; 3],
    pub window_period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub u: f64,
    pub v: f64,
    pub radius: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceSpec {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub horizon: f64,
    pub sky: [f64; 3],
    pub ground: [f64; 3],
    pub stripe_color: [f64; 3],
    pub stripe_angle: f64,
    pub stripe_period: f64,
    pub buildings: Vec<Building>,
    pub trees: Vec<Tree>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCondition {
    /// Horizontal viewpoint shift as a fraction of the image width.
    pub offset: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise_sigma: f64,
    pub tint: [f64; 3],
    pub noise_seed: u64,
}

impl ViewCondition {
    pub fn neutral() -> Self {
        Self {
            offset: 0.0,
            gain: 1.0,
            bias: 0.0,
            noise_sigma: 0.0,
            tint: [1.0; 3],
            noise_seed: 0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let offset = loop {
            let o: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * OFFSET_SIGMA;
            if (OFFSET_RANGE.0..=OFFSET_RANGE.1).contains(&o) {
                break o;
            }
        };
        let mut u = |r: (f64, f64)| rng.random_range(r.0..=r.1);
        Self {
            offset,
            gain: u(GAIN_RANGE),
            bias: u(BIAS_RANGE),
            noise_sigma: u(NOISE_RANGE),
            tint: [u(TINT_RANGE), u(TINT_RANGE), u(TINT_RANGE)],
            noise_seed: rng.random(),
        }
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn color<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Offsets `(north, east)` in metres from the origin to a latitude/longitude.
pub fn offset_coord(north_m: f64, east_m: f64) -> (f64, f64) {
    let deg = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let lat = ORIGIN.0 + north_m / deg;
    let lon = ORIGIN.1 + east_m / (deg * ORIGIN.0.to_radians().cos());
    (lat, lon)
}

/// Grid cell of place `id` in a world of `n_places`.
fn grid_cell(id: u64, n_places: usize) -> (f64, f64) {
    let cols = (n_places as f64).sqrt().ceil() as u64;
    ((id / cols) as f64 * PLACE_SPACING_M, (id % cols) as f64 * PLACE_SPACING_M)
}

/// Colours shared by every place of a world. Places differ in layout and in
/// which palette entries they use, so colour statistics alone alias.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub facades: Vec<[f64; 3]>,
    pub skies: Vec<[f64; 3]>,
    pub grounds: Vec<[f64; 3]>,
}

pub fn palette(seed: u64) -> Palette {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_9e37_79b9);
    Palette {
        facades: (0..PALETTE_FACADES).map(|_| color(&mut rng, 0.05, 1.0)).collect(),
        skies: (0..PALETTE_SKIES).map(|_| color(&mut rng, 0.2, 1.0)).collect(),
        grounds: (0..PALETTE_GROUNDS).map(|_| color(&mut rng, 0.05, 0.75)).collect(),
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, from: &[[f64; 3]]) -> [f64; 3] {
    from[rng.random_range(0..from.len())]
}

/// The signature of place `id` depends only on `(seed, id)`; its anchor also
/// on the world size.
pub fn place_spec(seed: u64, id: u64, n_places: usize) -> PlaceSpec {
    let pal = palette(seed);
    let mut rng = stream(seed, 2 * id);
    let (n, e) = grid_cell(id, n_places);
    let (lat, lon) = offset_coord(n, e);
    let horizon = rng.random_range(0.45..0.7);
    let mut buildings = Vec::new();
    let mut x = rng.random_range(-0.35..-0.15);
    while x < 1.3 {
        let w = rng.random_range(0.25..0.6);
        if rng.random_bool(0.8) {
            let base = pick(&mut rng, &pal.facades);
            let shade = rng.random_range(0.8..0.9);
            buildings.push(Building {
                x0: x,
                x1: x + w,
                height: rng.random_range(0.15..horizon - 0.02),
                color: base,
                window_color: base.map(|c| c * shade),
                window_period: rng.random_range(0.03..0.09),
            });
        }
        x += w + rng.random_range(0.0..0.05);
    }
    let trees = (0..rng.random_range(0..=3))
        .map(|_| Tree {
            u: rng.random_range(-0.2..1.2),
            v: horizon + rng.random_range(-0.15..0.05),
            radius: rng.random_range(0.05..0.13),
            color: [rng.random_range(0.05..0.4), rng.random_range(0.35..0.85), rng.random_range(0.05..0.35)],
        })
        .collect();
    let sky = pick(&mut rng, &pal.skies);
    let ground = pick(&mut rng, &pal.grounds);
    PlaceSpec {
        id,
        lat,
        lon,
        horizon,
        sky,
        ground,
        stripe_color: ground.map(|c| (c + 0.08).min(1.0)),
        stripe_angle: rng.random_range(-1.2..1.2),
        stripe_period: rng.random_range(0.06..0.2),
        buildings,
        trees,
    }
}

/// Noise-free scene colour at world coordinates `(u, v)`, both in image
/// widths/heights with the unshifted view spanning `[0, 1]`.
pub fn scene_color(p: &PlaceSpec, u: f64, v: f64) -> [f64; 3] {
    for t in &p.trees {
        if (u - t.u).powi(2) + (v - t.v).powi(2) < t.radius * t.radius {
            return t.color;
        }
    }
    if v < p.horizon {
        for b in &p.buildings {
            if u >= b.x0 && u < b.x1 && v >= p.horizon - b.height {
                let local_u = (u - b.x0) / b.window_period;
                let local_v = (v - (p.horizon - b.height)) / b.window_period;
                let in_window = local_u.fract() > 0.3 && local_u.fract() < 0.7 && local_v.fract() > 0.35 && local_v.fract() < 0.75;
                return if in_window { b.window_color } else { b.color };
            }
        }
        return p.sky;
    }
    let (s, c) = p.stripe_angle.sin_cos();
    let phase = ((u * c + v * s) / p.stripe_period).rem_euclid(1.0);
    if phase < 0.25 {
        p.stripe_color
    } else {
        p.ground
    }
}

/// Renders a `size×size×3` view with values in `[0, 1]`.
pub fn render_view(p: &PlaceSpec, cond: &ViewCondition, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(cond.noise_seed);
    let noise = Normal::new(0.0, cond.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let v = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64 + cond.offset;
            let col = scene_color(p, u, v);
            for ch in 0..3 {
                let n = if cond.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((cond.gain * (cond.tint[ch] * col[ch] + n) + cond.bias).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[size, size, 3], data).expect("consistent size")
}

/// Rounds to the 8-bit grid a PPM round trip would produce.
pub fn quantized(t: &Tensor) -> Tensor {
    t.map(|v| quantize(v) as f64 / 255.0)
}

pub struct View {
    pub record: Record,
    pub condition: ViewCondition,
    pub image: Tensor,
}

pub struct World {
    pub places: Vec<PlaceSpec>,
    pub views: Vec<View>,
}

impl World {
    pub fn manifest(&self, name: &str) -> Manifest {
        Manifest {
            name: name.to_string(),
            records: self.views.iter().map(|v| v.record.clone()).collect(),
        }
    }

    /// Writes `manifest.csv` and every image below `dir`; returns the
    /// manifest path. The dataset is named after the directory.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.join("images"))?;
        self.views
            .par_iter()
            .try_for_each(|v| Ppm::from_tensor(&v.image)?.write(&dir.join(&v.record.path)))?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "world".into());
        let path = dir.join(MANIFEST_FILE);
        self.manifest(&name).write(&path)?;
        Ok(path)
    }
}

/// Geotag audit of a generated manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Audit {
    /// Largest distance between two views of one place.
    pub max_intra_m: f64,
    /// Smallest distance between views of different places.
    pub min_inter_m: f64,
    pub pairs: usize,
}

impl Audit {
    /// Views of a place fall inside the positive radius and different
    /// places lie beyond the evaluation radius.
    pub fn ok(&self) -> bool {
        self.max_intra_m < POSITIVE_RADIUS_M && self.min_inter_m > DEFAULT_MATCH_THRESHOLD_M
    }
}

/// Pairwise geodistance over every record pair, grouped by place id.
pub fn audit(m: &Manifest) -> Result<Audit> {
    let mut a = Audit {
        max_intra_m: 0.0,
        min_inter_m: f64::INFINITY,
        pairs: 0,
    };
    for (i, x) in m.records.iter().enumerate() {
        for y in &m.records[i + 1..] {
            let d = geodistance(x.coord(), y.coord())?;
            if x.place_id.is_some() && x.place_id == y.place_id {
                a.max_intra_m = a.max_intra_m.max(d);
            } else {
                a.min_inter_m = a.min_inter_m.min(d);
            }
            a.pairs += 1;
        }
    }
    Ok(a)
}

pub const MANIFEST_FILE: &str = "manifest.csv";

pub fn image_path(place: u64, view: usize) -> String {
    format!("images/p{place:04}_v{view:02}.ppm")
}

/// Renders every view of every place. Images are already quantised to 8 bits.
pub fn generate_world(seed: u64, n_places: usize, views_per_place: usize, size: usize) -> Result<World> {
    if n_places < 2 {
        return Err(Error::Config("a world needs at least two places".into()));
    }
    if views_per_place < 2 {
        return Err(Error::Config("each place needs a database and a query view".into()));
    }
    let places: Vec<PlaceSpec> = (0..n_places as u64).map(|id| place_spec(seed, id, n_places)).collect();
    let db_views = views_per_place.div_ceil(2);
    let mut views = Vec::with_capacity(n_places * views_per_place);
    for p in &places {
        let mut rng = stream(seed, 2 * p.id + 1);
        for v in 0..views_per_place {
            let cond = ViewCondition::sample(&mut rng);
            let r = MAX_JITTER_M * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (n, e) = grid_cell(p.id, n_places);
            let (lat, lon) = offset_coord(n + r * theta.sin(), e + r * theta.cos());
            let image = quantized(&render_view(p, &cond, size));
            views.push(View {
                record: Record {
                    id: p.id * views_per_place as u64 + v as u64,
                    path: image_path(p.id, v),
                    lat,
                    lon,
                    place_id: Some(p.id),
                    split: if v < db_views { Split::Database } else { Split::Query },
                },
                condition: cond,
                image,
            });
        }
    }
    Ok(World { places, views })
}
