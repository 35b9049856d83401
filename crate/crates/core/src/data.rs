//! Procedural toy fundus corpus: paired structural masks, lesion masks,
//! rendered images and grade labels.
//!
//! Geometry is expressed in fractions of the resolution so every size renders
//! the same scene. The field of view is a centred disc of radius `0.48·R`;
//! everything outside it is black and no mask is ever set there.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, validation_err, Result};
use crate::rng::{derive_seed, stream, tag, StreamRng};
use crate::tensor::Tensor;

pub const NUM_GRADES: usize = 5;
pub const CONDITION_CHANNELS: usize = 8;
pub const LESION_CHANNELS: usize = 6;
/// Lesion channel order inside [`LesionMask`].
pub const LESION_NAMES: [&str; LESION_CHANNELS] = ["ma", "he", "ex", "se", "laser", "membrane"];
/// Channel order of a [`ConditionMap`].
pub const CONDITION_NAMES: [&str; CONDITION_CHANNELS] =
    ["vessel", "optic_disk", "ma", "he", "ex", "se", "laser", "membrane"];
pub const SUPPORTED_RESOLUTIONS: [usize; 3] = [64, 128, 256];
pub const FOV_RADIUS_FRACTION: f64 = 0.48;

/// Share of each grade in the EyePACS training set. Grades 0, 3 and 4 are the
/// published shares; grades 1 and 2 split the remainder 2443:5292 as in the
/// public label file.
pub const EYEPACS_PROFILE: [f64; NUM_GRADES] = [
    0.7367,
    0.2182 * 2443.0 / 7735.0,
    0.2182 * 5292.0 / 7735.0,
    0.0235,
    0.0216,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct GradeLabel(u8);

impl GradeLabel {
    pub fn new(level: u8) -> Result<Self> {
        if (level as usize) < NUM_GRADES {
            Ok(Self(level))
        } else {
            Err(validation_err!("grade {level} outside 0..=4"))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> [GradeLabel; NUM_GRADES] {
        [Self(0), Self(1), Self(2), Self(3), Self(4)]
    }
}

impl TryFrom<u8> for GradeLabel {
    type Error = crate::Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<GradeLabel> for u8 {
    fn from(g: GradeLabel) -> u8 {
        g.0
    }
}

/// Vessel and optic-disk rasters, each `[1, H, W]` with values in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralMask {
    pub vessel: Tensor,
    pub optic_disk: Tensor,
}

/// Six lesion rasters `[6, H, W]` in [`LESION_NAMES`] order, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LesionMask {
    pub channels: Tensor,
}

/// The generator's conditioning input: `[8, H, W]` in [`CONDITION_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionMap(Tensor);

impl ConditionMap {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 || t.shape()[0] != CONDITION_CHANNELS {
            return Err(validation_err!("condition map must be [8, H, W], got {:?}", t.shape()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn size(&self) -> (usize, usize) {
        let [_, h, w] = self.0.dims3();
        (h, w)
    }

    pub fn structural(&self) -> StructuralMask {
        StructuralMask { vessel: self.0.narrow_channels(0, 1), optic_disk: self.0.narrow_channels(1, 1) }
    }

    pub fn lesions(&self) -> LesionMask {
        LesionMask { channels: self.0.narrow_channels(2, LESION_CHANNELS) }
    }

    /// Same structure with every lesion channel cleared.
    pub fn without_lesions(&self) -> ConditionMap {
        let mut t = self.0.clone();
        let (h, w) = self.size();
        t.data_mut()[2 * h * w..].iter_mut().for_each(|v| *v = 0.0);
        ConditionMap(t)
    }
}

/// Channel-wise concatenation in the fixed order vessel, optic disk, lesions.
pub fn encode_condition(s: &StructuralMask, l: &LesionMask) -> Result<ConditionMap> {
    let dims = |t: &Tensor| -> Result<[usize; 3]> {
        if t.ndim() != 3 {
            return Err(validation_err!("mask must be [C, H, W], got {:?}", t.shape()));
        }
        Ok(t.dims3())
    };
    let v = dims(&s.vessel)?;
    let o = dims(&s.optic_disk)?;
    let c = dims(&l.channels)?;
    if v[0] != 1 || o[0] != 1 || c[0] != LESION_CHANNELS {
        return Err(validation_err!("channel counts {}/{}/{} != 1/1/6", v[0], o[0], c[0]));
    }
    if v[1..] != o[1..] || v[1..] != c[1..] {
        return Err(validation_err!(
            "mask sizes differ: vessel {:?}, optic disk {:?}, lesions {:?}",
            &v[1..],
            &o[1..],
            &c[1..]
        ));
    }
    Ok(ConditionMap(Tensor::concat_channels(&[&s.vessel, &s.optic_disk, &l.channels])))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub condition: ConditionMap,
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor,
    pub grade: GradeLabel,
    pub id: String,
}

impl Sample {
    pub fn new(condition: ConditionMap, image: Tensor, grade: GradeLabel, id: String) -> Result<Self> {
        if image.ndim() != 3 || image.shape()[0] != 3 {
            return Err(validation_err!("sample {id}: image must be [3, H, W], got {:?}", image.shape()));
        }
        let [_, h, w] = image.dims3();
        if condition.size() != (h, w) {
            return Err(validation_err!("sample {id}: image {h}x{w} vs condition {:?}", condition.size()));
        }
        Ok(Self { condition, image, grade, id })
    }

    pub fn resolution(&self) -> usize {
        self.condition.size().0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts_per_grade(&self) -> [usize; NUM_GRADES] {
        let mut c = [0; NUM_GRADES];
        for s in &self.samples {
            c[s.grade.index()] += 1;
        }
        c
    }

    pub fn resolution(&self) -> Option<usize> {
        self.samples.first().map(Sample::resolution)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.grade.index()).collect()
    }

    /// Images of the selected samples as `[N, 3, H, W]` mapped to [-1, 1].
    pub fn image_batch(&self, indices: &[usize]) -> Tensor {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Tensor::stack(&items).map(|v| 2.0 * v - 1.0)
    }

    /// Conditions of the selected samples as `[N, 8, H, W]`.
    pub fn condition_batch(&self, indices: &[usize]) -> Tensor {
        let items: Vec<&Tensor> = indices.iter().map(|&i| self.samples[i].condition.tensor()).collect();
        Tensor::stack(&items)
    }

    pub fn extend(&mut self, other: Dataset) {
        self.samples.extend(other.samples);
    }
}

/// Inclusive count ranges per lesion type for one grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LesionPolicy {
    pub ma: (u32, u32),
    pub he: (u32, u32),
    pub ex: (u32, u32),
    pub se: (u32, u32),
    /// Number of laser-photocoagulation spot fields.
    pub laser: (u32, u32),
    pub membrane: (u32, u32),
    /// At least one of `se` / `laser` must be present.
    pub se_or_laser: bool,
}

const NONE: (u32, u32) = (0, 0);

/// Grade → lesion counts. Each grade keeps the lesion set of the grade below
/// and adds the types that define it.
pub const LESION_POLICY: [LesionPolicy; NUM_GRADES] = [
    LesionPolicy { ma: NONE, he: NONE, ex: NONE, se: NONE, laser: NONE, membrane: NONE, se_or_laser: false },
    LesionPolicy { ma: (1, 5), he: NONE, ex: NONE, se: NONE, laser: NONE, membrane: NONE, se_or_laser: false },
    LesionPolicy { ma: (1, 5), he: (1, 4), ex: (0, 3), se: NONE, laser: NONE, membrane: NONE, se_or_laser: false },
    LesionPolicy { ma: (1, 5), he: (1, 4), ex: (0, 3), se: (1, 3), laser: (1, 1), membrane: NONE, se_or_laser: true },
    LesionPolicy { ma: (1, 5), he: (1, 4), ex: (0, 3), se: (1, 3), laser: (1, 1), membrane: (1, 1), se_or_laser: true },
];

/// Lesion counts drawn for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LesionCounts {
    pub ma: u32,
    pub he: u32,
    pub ex: u32,
    pub se: u32,
    pub laser: u32,
    pub membrane: u32,
}

impl LesionPolicy {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> LesionCounts {
        let mut pick = |(lo, hi): (u32, u32)| if hi == 0 { 0 } else { rng.random_range(lo..=hi) };
        let mut c = LesionCounts {
            ma: pick(self.ma),
            he: pick(self.he),
            ex: pick(self.ex),
            se: pick(self.se),
            laser: pick(self.laser),
            membrane: pick(self.membrane),
        };
        if self.se_or_laser {
            // soft exudates only, laser only, or both
            match rng.random_range(0..3u32) {
                0 => c.laser = 0,
                1 => c.se = 0,
                _ => {}
            }
        }
        c
    }
}

pub fn check_resolution(resolution: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&resolution) && resolution % 16 == 0 {
        Ok(())
    } else {
        Err(config_err!("resolution {resolution} not in {:?}", SUPPORTED_RESOLUTIONS))
    }
}

/// Per-pixel geometry helper for one raster size.
struct Canvas {
    r: usize,
    centre: f64,
    fov_radius: f64,
}

impl Canvas {
    fn new(r: usize) -> Self {
        Self { r, centre: r as f64 / 2.0, fov_radius: FOV_RADIUS_FRACTION * r as f64 }
    }

    fn in_fov(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.centre;
        let dy = y as f64 + 0.5 - self.centre;
        dx * dx + dy * dy <= self.fov_radius * self.fov_radius
    }

    /// Sets `plane[p] = max(plane[p], value(dist))` for pixels within `radius`
    /// of `(cx, cy)` inside the field of view.
    fn stamp(&self, plane: &mut [f64], cx: f64, cy: f64, radius: f64, value: impl Fn(f64) -> f64) {
        let r = self.r as isize;
        let x0 = (libm::floor(cx - radius) as isize).max(0);
        let x1 = (libm::ceil(cx + radius) as isize).min(r - 1);
        let y0 = (libm::floor(cy - radius) as isize).max(0);
        let y1 = (libm::ceil(cy + radius) as isize).min(r - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (xu, yu) = (x as usize, y as usize);
                if !self.in_fov(xu, yu) {
                    continue;
                }
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let d = libm::sqrt(dx * dx + dy * dy);
                if d <= radius {
                    let p = &mut plane[yu * self.r + xu];
                    *p = p.max(value(d));
                }
            }
        }
    }

    /// Uniform point inside the disc of radius `frac·R` around the centre.
    fn random_point<R: Rng + ?Sized>(&self, rng: &mut R, frac: f64) -> (f64, f64) {
        let rad = frac * self.r as f64 * libm::sqrt(rng.random::<f64>());
        let th = rng.random_range(0.0..core::f64::consts::TAU);
        (self.centre + rad * libm::cos(th), self.centre + rad * libm::sin(th))
    }
}

fn coverage(plane: &[f64]) -> usize {
    plane.iter().filter(|v| **v > 0.0).count()
}

/// Draws the optic disc and vessel tree. Returns the disc centre and radius.
fn draw_structure<R: Rng + ?Sized>(cv: &Canvas, rng: &mut R, vessel: &mut [f64], disk: &mut [f64]) -> (f64, f64, f64) {
    let r = cv.r as f64;
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let odx = cv.centre + side * 0.26 * r + rng.random_range(-0.02..0.02) * r;
    let ody = cv.centre + rng.random_range(-0.05..0.05) * r;
    let od_r = 0.07 * r * rng.random_range(0.9..1.1);
    cv.stamp(disk, odx, ody, od_r, |_| 1.0);

    let fov_area = core::f64::consts::PI * cv.fov_radius * cv.fov_radius;
    let target = rng.random_range(0.03..0.07) * fov_area;
    let width = (r / 100.0).max(0.6);
    let mut drawn = 0;
    while (coverage(vessel) as f64) < target && drawn < 12 {
        // quadratic Bezier from the disc towards the periphery, arching above or below
        let up = if drawn % 2 == 0 { -1.0 } else { 1.0 };
        let th = rng.random_range(0.15..1.2) * up;
        let reach = rng.random_range(0.55..0.8) * r;
        let ex = odx - side * reach * libm::cos(th);
        let ey = ody + reach * libm::sin(th);
        let mx = 0.5 * (odx + ex);
        let my = 0.5 * (ody + ey) + up * rng.random_range(0.05..0.2) * r;
        let steps = 6 * cv.r;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let u = 1.0 - t;
            let px = u * u * odx + 2.0 * u * t * mx + t * t * ex;
            let py = u * u * ody + 2.0 * u * t * my + t * t * ey;
            cv.stamp(vessel, px, py, width * (1.0 - 0.4 * t), |_| 1.0);
        }
        drawn += 1;
    }
    (odx, ody, od_r)
}

/// A point for a lesion, kept away from the optic disc.
fn lesion_site<R: Rng + ?Sized>(cv: &Canvas, rng: &mut R, od: (f64, f64, f64)) -> (f64, f64) {
    loop {
        let (x, y) = cv.random_point(rng, 0.42);
        let (dx, dy) = (x - od.0, y - od.1);
        if dx * dx + dy * dy > (1.6 * od.2) * (1.6 * od.2) {
            return (x, y);
        }
    }
}

fn draw_lesions<R: Rng + ?Sized>(cv: &Canvas, rng: &mut R, counts: &LesionCounts, od: (f64, f64, f64), planes: &mut [Vec<f64>]) {
    let r = cv.r as f64;
    let [ma, he, ex, se, laser, membrane] = planes else { unreachable!() };
    for _ in 0..counts.ma {
        let (x, y) = lesion_site(cv, rng, od);
        cv.stamp(ma, x, y, (0.02 * r).max(2.0), |_| 1.0);
    }
    for _ in 0..counts.he {
        let (x, y) = lesion_site(cv, rng, od);
        let rad = rng.random_range(0.02..0.035) * r;
        // two overlapping discs give an irregular blot
        cv.stamp(he, x, y, rad, |_| 1.0);
        let a = rng.random_range(0.0..core::f64::consts::TAU);
        cv.stamp(he, x + 0.6 * rad * libm::cos(a), y + 0.6 * rad * libm::sin(a), 0.7 * rad, |_| 1.0);
    }
    for _ in 0..counts.ex {
        let (x, y) = lesion_site(cv, rng, od);
        for _ in 0..rng.random_range(2..=5) {
            let jx = x + rng.random_range(-0.04..0.04) * r;
            let jy = y + rng.random_range(-0.04..0.04) * r;
            cv.stamp(ex, jx, jy, (0.015 * r).max(1.1), |_| 1.0);
        }
    }
    for _ in 0..counts.se {
        let (x, y) = lesion_site(cv, rng, od);
        let rad = rng.random_range(0.05..0.08) * r;
        cv.stamp(se, x, y, rad, |_| 1.0);
    }
    for _ in 0..counts.laser {
        // ring of soft photocoagulation scars
        let (x, y) = cv.random_point(rng, 0.2);
        let ring = rng.random_range(0.12..0.2) * r;
        let spots = rng.random_range(8..=14);
        let sigma = (0.018 * r).max(1.2);
        for k in 0..spots {
            let a = core::f64::consts::TAU * k as f64 / spots as f64 + rng.random_range(-0.1..0.1);
            let sx = x + ring * libm::cos(a);
            let sy = y + ring * libm::sin(a);
            let peak = rng.random_range(0.8..1.0);
            cv.stamp(laser, sx, sy, 3.0 * sigma, |d| peak * libm::exp(-d * d / (2.0 * sigma * sigma)));
        }
    }
    for _ in 0..counts.membrane {
        let toward = cv.centre - od.0;
        let cx = od.0 + 0.35 * toward + rng.random_range(-0.03..0.03) * r;
        let cy = od.1 + rng.random_range(-0.08..0.08) * r;
        let sigma = rng.random_range(0.06..0.09) * r;
        cv.stamp(membrane, cx, cy, 3.0 * sigma, |d| {
            let v = 0.9 * libm::exp(-d * d / (2.0 * sigma * sigma));
            if v < 0.02 {
                0.0
            } else {
                v
            }
        });
    }
}

fn render(cv: &Canvas, rng: &mut StreamRng, od: (f64, f64, f64), cond: &[Vec<f64>]) -> Tensor {
    let n = cv.r * cv.r;
    let mut img = vec![0.0; 3 * n];
    let blend = |img: &mut [f64], p: usize, color: [f64; 3], alpha: f64| {
        for (ch, c) in color.iter().enumerate() {
            let v = &mut img[ch * n + p];
            *v = (1.0 - alpha) * *v + alpha * c;
        }
    };
    let macula = (2.0 * cv.centre - od.0, od.1);
    let r = cv.r as f64;
    for y in 0..cv.r {
        for x in 0..cv.r {
            if !cv.in_fov(x, y) {
                continue;
            }
            let p = y * cv.r + x;
            let dx = x as f64 + 0.5 - cv.centre;
            let dy = y as f64 + 0.5 - cv.centre;
            let rr = (dx * dx + dy * dy) / (cv.fov_radius * cv.fov_radius);
            let mdx = x as f64 + 0.5 - macula.0;
            let mdy = y as f64 + 0.5 - macula.1;
            let mac = 0.15 * libm::exp(-(mdx * mdx + mdy * mdy) / (2.0 * (0.06 * r) * (0.06 * r)));
            let shade = 1.0 - 0.35 * rr - mac;
            let grain: f64 = StandardNormal.sample(rng);
            let base = [0.80, 0.38, 0.16];
            for (ch, b) in base.iter().enumerate() {
                img[ch * n + p] = b * shade + 0.015 * grain;
            }
            let layers: [([f64; 3], f64, usize); 8] = [
                ([0.98, 0.88, 0.55], 0.95, 1),
                ([0.50, 0.10, 0.06], 0.85, 0),
                ([0.75, 0.90, 0.95], 0.85, 7),
                ([0.10, 0.10, 0.05], 0.90, 6),
                ([0.95, 0.95, 0.90], 0.90, 5),
                ([1.00, 0.95, 0.15], 0.95, 4),
                ([0.30, 0.00, 0.00], 0.95, 3),
                ([0.10, 0.00, 0.20], 1.00, 2),
            ];
            for (color, alpha, ch) in layers {
                let m = cond[ch][p];
                if m > 0.0 {
                    blend(&mut img, p, color, alpha * m);
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::from_vec(&[3, cv.r, cv.r], img)
}

/// One deterministic toy sample for `(seed, grade, resolution)`.
pub fn generate_toy_sample(seed: u64, grade: u8, resolution: usize) -> Result<Sample> {
    check_resolution(resolution)?;
    let grade = GradeLabel::new(grade)?;
    let mut rng = stream(&[tag::SAMPLE, seed, grade.level() as u64, resolution as u64]);
    let cv = Canvas::new(resolution);
    let n = resolution * resolution;
    let mut planes: Vec<Vec<f64>> = (0..CONDITION_CHANNELS).map(|_| vec![0.0; n]).collect();
    let od = {
        let (vessel, rest) = planes.split_at_mut(1);
        draw_structure(&cv, &mut rng, &mut vessel[0], &mut rest[0])
    };
    let counts = LESION_POLICY[grade.index()].draw(&mut rng);
    draw_lesions(&cv, &mut rng, &counts, od, &mut planes[2..]);
    let image = render(&cv, &mut rng, od, &planes);
    let cond = Tensor::from_vec(&[CONDITION_CHANNELS, resolution, resolution], planes.concat());
    Sample::new(ConditionMap(cond), image, grade, format!("toy-s{seed}-g{}", grade.level()))
}

/// Exactly `counts[g]` samples of each grade, grade-major, with unique ids.
pub fn generate_corpus(seed: u64, counts: [usize; NUM_GRADES], resolution: usize) -> Result<Dataset> {
    check_resolution(resolution)?;
    let mut samples = Vec::with_capacity(counts.iter().sum());
    for (g, &count) in counts.iter().enumerate() {
        for i in 0..count {
            let mut s = generate_toy_sample(derive_seed(&[seed, g as u64, i as u64]), g as u8, resolution)?;
            s.id = format!("g{g}-{i:05}");
            samples.push(s);
        }
    }
    Ok(Dataset::new(samples))
}

/// Per-grade counts for `total` samples following `profile`, rounded by
/// largest remainder so they sum to `total`.
pub fn profile_counts(total: usize, profile: &[f64; NUM_GRADES]) -> [usize; NUM_GRADES] {
    let norm: f64 = profile.iter().sum();
    let raw: Vec<f64> = profile.iter().map(|p| p / norm * total as f64).collect();
    let mut counts = [0usize; NUM_GRADES];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = libm::floor(*r) as usize;
    }
    let mut order: Vec<usize> = (0..NUM_GRADES).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - libm::floor(raw[a]);
        let fb = raw[b] - libm::floor(raw[b]);
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &g in order.iter().take(missing) {
        counts[g] += 1;
    }
    counts
}

pub fn eyepacs_counts(total: usize) -> [usize; NUM_GRADES] {
    profile_counts(total, &EYEPACS_PROFILE)
}

/// Pixel count of the field-of-view disc at `resolution`.
pub fn fov_area(resolution: usize) -> usize {
    let cv = Canvas::new(resolution);
    (0..resolution).flat_map(|y| (0..resolution).map(move |x| (x, y))).filter(|&(x, y)| cv.in_fov(x, y)).count()
}

/// Field-of-view mask `[H, W]` (1 inside).
pub fn fov_mask(resolution: usize) -> Tensor {
    let cv = Canvas::new(resolution);
    let data = (0..resolution)
        .flat_map(|y| (0..resolution).map(move |x| (x, y)))
        .map(|(x, y)| if cv.in_fov(x, y) { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&[resolution, resolution], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grade_zero_has_no_lesions() {
        let s = generate_toy_sample(0, 0, 64).unwrap();
        assert!(s.condition.lesions().channels.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grade_four_has_membrane() {
        let s = generate_toy_sample(7, 4, 64).unwrap();
        let membrane = s.condition.lesions().channels.narrow_channels(5, 1);
        assert!(membrane.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_sample(3, 2, 64).unwrap();
        let b = generate_toy_sample(3, 2, 64).unwrap();
        assert_eq!(a, b);
        let bits = |s: &Sample| s.image.data().iter().chain(s.condition.tensor().data()).map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(generate_toy_sample(0, 0, 100), Err(crate::Error::Config(_))));
        assert!(matches!(generate_toy_sample(0, 5, 64), Err(crate::Error::Validation(_))));
    }

    #[test]
    fn corpus_counts_and_ids() {
        let d = generate_corpus(1, [10, 10, 10, 10, 10], 64).unwrap();
        assert_eq!(d.len(), 50);
        assert_eq!(d.counts_per_grade(), [10; 5]);
        let mut ids: Vec<_> = d.samples.iter().map(|s| s.id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 50);
        let one = generate_corpus(1, [0, 0, 0, 0, 1], 64).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.samples[0].grade.level(), 4);
    }

    #[test]
    fn eyepacs_profile_at_1000() {
        let c = eyepacs_counts(1000);
        assert_eq!(c.iter().sum::<usize>(), 1000);
        assert_eq!(c[0], 737);
        assert_eq!(c[3], 23);
        assert_eq!(c[4], 22);
    }

    #[test]
    fn vessel_only_mask_lands_in_channel_zero() {
        let mut vessel = Tensor::zeros(&[1, 4, 4]);
        vessel.data_mut()[5] = 1.0;
        let s = StructuralMask { vessel, optic_disk: Tensor::zeros(&[1, 4, 4]) };
        let l = LesionMask { channels: Tensor::zeros(&[6, 4, 4]) };
        let c = encode_condition(&s, &l).unwrap();
        assert_eq!(c.tensor().data()[5], 1.0);
        assert!(c.tensor().data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_size_mismatch() {
        let s = StructuralMask { vessel: Tensor::zeros(&[1, 4, 4]), optic_disk: Tensor::zeros(&[1, 4, 4]) };
        let l = LesionMask { channels: Tensor::zeros(&[6, 4, 5]) };
        assert!(matches!(encode_condition(&s, &l), Err(crate::Error::Validation(_))));
    }
}
