//! Procedural surrogate imagery: mud background, porous and mud-filled
//! target instances, and wavy confuser blobs, with pixel-exact labels.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_TARGET: u8 = 1;
pub const CLASS_CONFUSER: u8 = 2;
pub const NUM_CLASSES: usize = 3;

pub type Rgb3 = [f32; 3];

/// Visual subtype of a target instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TextureTag {
    /// High-contrast dotted fill.
    A,
    /// Fill within a few percent of the surrounding mud.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_confusers: usize,
    pub max_confusers: usize,
    /// Semi-axis range of target ellipses, in pixels.
    pub min_radius: f32,
    pub max_radius: f32,
    /// Radius range of confuser blobs.
    pub min_confuser_radius: f32,
    pub max_confuser_radius: f32,
    /// Probability that a confuser is placed touching a target.
    pub confuser_adjacency: f32,
    pub mud_color: Rgb3,
    pub porous_color: Rgb3,
    pub pore_color: Rgb3,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            min_instances: 6,
            max_instances: 10,
            min_confusers: 2,
            max_confusers: 4,
            min_radius: 6.0,
            max_radius: 13.0,
            min_confuser_radius: 7.0,
            max_confuser_radius: 14.0,
            confuser_adjacency: 0.6,
            mud_color: [0.56, 0.31, 0.25],
            porous_color: [0.82, 0.77, 0.72],
            pore_color: [0.36, 0.24, 0.21],
            max_retries: 400,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: &str| {
            Err(Error::Config {
                path: path.to_string(),
                reason: reason.to_string(),
            })
        };
        if self.height < 64 || self.width < 64 {
            return bad("height/width", "images must be at least 64x64");
        }
        if self.min_instances < 2 || self.min_instances > self.max_instances {
            return bad(
                "min_instances",
                "need 2 <= min_instances <= max_instances (one instance per texture at least)",
            );
        }
        if self.min_confusers == 0 || self.min_confusers > self.max_confusers {
            return bad("min_confusers", "need 1 <= min_confusers <= max_confusers");
        }
        if !(self.min_radius >= 4.0 && self.min_radius <= self.max_radius) {
            return bad("min_radius", "need 4 <= min_radius <= max_radius");
        }
        if !(self.min_confuser_radius >= 3.0 && self.min_confuser_radius <= self.max_confuser_radius) {
            return bad("min_confuser_radius", "need 3 <= min_confuser_radius <= max_confuser_radius");
        }
        if !(0.0..=1.0).contains(&self.confuser_adjacency) {
            return bad("confuser_adjacency", "must be a probability");
        }
        Ok(())
    }
}

/// One labelled image of the surrogate benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// 3×H×W, values in [0, 1] on the 8-bit grid.
    pub image: Tensor,
    pub class_map: Vec<u8>,
    pub instance_map: Vec<u16>,
    /// Texture of instance `k` at index `k - 1`.
    pub textures: Vec<TextureTag>,
    /// A background pixel whose colour is the sample's reference mud shade.
    pub mud_pixel: (usize, usize),
    pub height: usize,
    pub width: usize,
}

impl ImageSample {
    pub fn num_instances(&self) -> usize {
        self.textures.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn class_pixel_count(&self, class: u8) -> usize {
        self.class_map.iter().filter(|&&c| c == class).count()
    }

    /// Boolean mask of instance `id` (1-based).
    pub fn instance_mask(&self, id: u16) -> Vec<bool> {
        self.instance_map.iter().map(|&v| v == id).collect()
    }

    pub fn mud_color(&self) -> Rgb3 {
        extract_color(&self.image, self.mud_pixel).expect("mud pixel is in bounds")
    }

    /// Checks every label invariant; returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.pixel_count();
        if self.image.shape() != [3, self.height, self.width] {
            return Err(format!("image shape {:?}", self.image.shape()));
        }
        if self.class_map.len() != n || self.instance_map.len() != n {
            return Err("label map length".into());
        }
        if self.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err("pixel outside [0,1]".into());
        }
        for (&c, &i) in self.class_map.iter().zip(&self.instance_map) {
            if c as usize >= NUM_CLASSES {
                return Err(format!("class id {c}"));
            }
            if (c == CLASS_TARGET) != (i != 0) {
                return Err("instance map disagrees with class map".into());
            }
        }
        let k = self.num_instances();
        if let Some(&max) = self.instance_map.iter().max() {
            if max as usize != k {
                return Err(format!("max instance id {max} but {k} textures"));
            }
        }
        for id in 1..=k as u16 {
            let mask = self.instance_mask(id);
            let area = mask.iter().filter(|&&b| b).count();
            if area == 0 {
                return Err(format!("instance {id} is empty"));
            }
            let comps = connected_components(&mask, self.height, self.width);
            if comps.len() != 1 {
                return Err(format!("instance {id} has {} components", comps.len()));
            }
        }
        if !self.textures.contains(&TextureTag::A) || !self.textures.contains(&TextureTag::B) {
            return Err("missing a texture subtype".into());
        }
        if self.class_pixel_count(CLASS_CONFUSER) == 0 {
            return Err("no confuser pixels".into());
        }
        let (r, c) = self.mud_pixel;
        if self.class_map[r * self.width + c] != CLASS_BACKGROUND {
            return Err("mud reference pixel is not background".into());
        }
        Ok(())
    }
}

/// 4-connected components of a boolean mask, each as a list of flat indices
/// in discovery order. Components are ordered by their first pixel in
/// raster order.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Colour of one pixel of a 3×H×W image.
pub fn extract_color(image: &Tensor, pixel: (usize, usize)) -> Result<Rgb3> {
    let (h, w) = image_dims(image)?;
    let (r, c) = pixel;
    if r >= h || c >= w {
        return Err(Error::invalid(format!(
            "pixel ({r}, {c}) outside {h}x{w} image"
        )));
    }
    let d = image.data();
    Ok([d[r * w + c], d[h * w + r * w + c], d[2 * h * w + r * w + c]])
}

/// Writes `color` at one pixel.
pub fn paint_pixel(image: &mut Tensor, pixel: (usize, usize), color: Rgb3) -> Result<()> {
    let (h, w) = image_dims(image)?;
    let (r, c) = pixel;
    if r >= h || c >= w {
        return Err(Error::invalid(format!(
            "pixel ({r}, {c}) outside {h}x{w} image"
        )));
    }
    let d = image.data_mut();
    for (ch, v) in color.iter().enumerate() {
        d[ch * h * w + r * w + c] = *v;
    }
    Ok(())
}

pub(crate) fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        other => Err(Error::invalid(format!(
            "expected a 3xHxW image, got {other:?}"
        ))),
    }
}

/// Fills an H×W canvas with copies of a square crop, top-left aligned.
pub fn tile_texture(
    source: &Tensor,
    crop: (usize, usize, usize),
    target: (usize, usize),
) -> Result<Tensor> {
    let (h, w) = image_dims(source)?;
    let (r0, c0, size) = crop;
    if size < 4 {
        return Err(Error::invalid(format!("crop size {size} is below 4")));
    }
    if r0 + size > h || c0 + size > w {
        return Err(Error::invalid(format!(
            "crop ({r0}, {c0}, {size}) exceeds {h}x{w} source"
        )));
    }
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::invalid("tile target must be non-empty"));
    }
    let src = source.data();
    let mut out = vec![0.0f32; 3 * th * tw];
    for ch in 0..3 {
        for r in 0..th {
            for c in 0..tw {
                out[ch * th * tw + r * tw + c] =
                    src[ch * h * w + (r0 + r % size) * w + (c0 + c % size)];
            }
        }
    }
    Tensor::new(vec![3, th, tw], out)
}

/// Largest axis-aligned square fully inside instance `id`, as (row, col, size).
pub fn largest_inscribed_square(sample: &ImageSample, id: u16) -> Option<(usize, usize, usize)> {
    let (h, w) = (sample.height, sample.width);
    let mut side = vec![0usize; h * w];
    let mut best: Option<(usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if sample.instance_map[i] != id {
                continue;
            }
            side[i] = if r == 0 || c == 0 {
                1
            } else {
                1 + side[i - w].min(side[i - 1]).min(side[i - w - 1])
            };
            if best.is_none_or(|b| side[i] > b.2) {
                best = Some((r + 1 - side[i], c + 1 - side[i], side[i]));
            }
        }
    }
    best
}

/// Square crop from the sample's largest porous instance, for texture tiling.
pub fn porous_crop(sample: &ImageSample) -> Option<(usize, usize, usize)> {
    (1..=sample.num_instances() as u16)
        .filter(|&id| sample.textures[id as usize - 1] == TextureTag::A)
        .filter_map(|id| largest_inscribed_square(sample, id))
        .max_by_key(|&(r, c, s)| (s, std::cmp::Reverse((r, c))))
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f32,
    cx: f32,
    a: f32,
    b: f32,
    theta: f32,
}

impl Ellipse {
    fn contains(&self, y: f32, x: f32) -> bool {
        self.level(y, x) <= 1.0
    }

    fn level(&self, y: f32, x: f32) -> f32 {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cy: f32,
    cx: f32,
    radius: f32,
    harmonics: [(f32, f32, f32); 3],
}

impl Blob {
    fn contains(&self, y: f32, x: f32) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let d = (dy * dy + dx * dx).sqrt();
        let ang = dy.atan2(dx);
        let mut r = self.radius;
        for &(k, amp, phase) in &self.harmonics {
            r += self.radius * amp * (k * ang + phase).sin();
        }
        d <= r
    }

    fn max_extent(&self) -> f32 {
        self.radius * (1.0 + self.harmonics.iter().map(|h| h.1).sum::<f32>())
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Smooth value noise: bilinear interpolation of a coarse random lattice.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let fy = r as f32 / cell as f32;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f32;
        for c in 0..w {
            let fx = c as f32 / cell as f32;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f32;
            let l = |y: usize, x: usize| lattice[y * gw + x];
            let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
            let bot = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
            out[r * w + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Generates one sample. Deterministic in `(seed, config)`.
pub fn generate_sample(id: &str, seed: u64, config: &GeneratorConfig) -> Result<ImageSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);

    // background: two octaves of low-frequency noise around the mud colour
    let coarse = value_noise(&mut rng, h, w, 32);
    let fine = value_noise(&mut rng, h, w, 8);
    let mut background = vec![[0.0f32; 3]; h * w];
    for (i, px) in background.iter_mut().enumerate() {
        let shade = 1.0 + 0.025 * coarse[i] + 0.01 * fine[i];
        for ch in 0..3 {
            let grain = rng.random_range(-0.006..0.006);
            px[ch] = config.mud_color[ch] * shade + grain;
        }
    }

    let n_targets = rng.random_range(config.min_instances..=config.max_instances);
    let n_confusers = rng.random_range(config.min_confusers..=config.max_confusers);

    let mut ellipses: Vec<Ellipse> = Vec::with_capacity(n_targets);
    let mut retries = 0;
    while ellipses.len() < n_targets {
        if retries > config.max_retries {
            return Err(Error::Generation(format!(
                "could only place {} of {n_targets} targets in {}x{} after {} retries",
                ellipses.len(),
                h,
                w,
                config.max_retries
            )));
        }
        retries += 1;
        let a = rng.random_range(config.min_radius..=config.max_radius);
        let b = rng.random_range(config.min_radius..=config.max_radius.max(config.min_radius));
        let margin = a.max(b) + 2.0;
        if margin * 2.0 >= h.min(w) as f32 {
            continue;
        }
        let e = Ellipse {
            cy: rng.random_range(margin..h as f32 - margin),
            cx: rng.random_range(margin..w as f32 - margin),
            a,
            b,
            theta: rng.random_range(0.0..std::f32::consts::PI),
        };
        let clear = ellipses.iter().all(|o| {
            let d = ((o.cy - e.cy).powi(2) + (o.cx - e.cx).powi(2)).sqrt();
            d > o.a.max(o.b) + e.a.max(e.b) + 3.0
        });
        if clear {
            ellipses.push(e);
        }
    }

    let mut textures: Vec<TextureTag> = (0..n_targets)
        .map(|_| if rng.random_bool(0.5) { TextureTag::A } else { TextureTag::B })
        .collect();
    textures[0] = TextureTag::A;
    textures[1] = TextureTag::B;

    let mut blobs: Vec<Blob> = Vec::with_capacity(n_confusers);
    let mut retries = 0;
    while blobs.len() < n_confusers {
        if retries > config.max_retries {
            return Err(Error::Generation(format!(
                "could only place {} of {n_confusers} confusers after {} retries",
                blobs.len(),
                config.max_retries
            )));
        }
        retries += 1;
        let radius = rng.random_range(config.min_confuser_radius..=config.max_confuser_radius);
        let harmonics = [
            (2.0, rng.random_range(0.05..0.2), rng.random_range(0.0..6.28)),
            (3.0, rng.random_range(0.03..0.15), rng.random_range(0.0..6.28)),
            (5.0, rng.random_range(0.0..0.08), rng.random_range(0.0..6.28)),
        ];
        let mut blob = Blob {
            cy: 0.0,
            cx: 0.0,
            radius,
            harmonics,
        };
        let extent = blob.max_extent();
        if rng.random_bool(config.confuser_adjacency as f64) {
            let host = &ellipses[rng.random_range(0..ellipses.len())];
            let ang: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let dist = host.a.min(host.b) + radius * rng.random_range(0.6..1.0);
            blob.cy = host.cy + dist * ang.sin();
            blob.cx = host.cx + dist * ang.cos();
        } else {
            blob.cy = rng.random_range(0.0..h as f32);
            blob.cx = rng.random_range(0.0..w as f32);
        }
        if blob.cy < extent * 0.3
            || blob.cx < extent * 0.3
            || blob.cy > h as f32 - extent * 0.3
            || blob.cx > w as f32 - extent * 0.3
        {
            continue;
        }
        let overlaps_other = blobs.iter().any(|o| {
            let d = ((o.cy - blob.cy).powi(2) + (o.cx - blob.cx).powi(2)).sqrt();
            d < o.max_extent() + extent
        });
        if overlaps_other {
            continue;
        }
        blobs.push(blob);
    }

    let mut class_map = vec![CLASS_BACKGROUND; h * w];
    let mut instance_map = vec![0u16; h * w];
    let mut pixels = background.clone();

    // confusers first so that targets overwrite any overlap
    // a pore lattice laid along wavy rows: locally close to texture A
    let stripe_period: Vec<f32> = blobs.iter().map(|_| rng.random_range(3.5..4.5)).collect();
    let stripe_angle: Vec<f32> = blobs
        .iter()
        .map(|_| rng.random_range(0.0..std::f32::consts::PI))
        .collect();
    let stripe_wobble: Vec<f32> = blobs.iter().map(|_| rng.random_range(0.8..2.0)).collect();
    for (bi, blob) in blobs.iter().enumerate() {
        let (s, c) = stripe_angle[bi].sin_cos();
        let period = stripe_period[bi];
        for r in 0..h {
            for col in 0..w {
                let (y, x) = (r as f32 + 0.5, col as f32 + 0.5);
                if !blob.contains(y, x) {
                    continue;
                }
                let i = r * w + col;
                class_map[i] = CLASS_CONFUSER;
                let u = x * c + y * s;
                let v = -x * s + y * c;
                let u = u + stripe_wobble[bi] * (v * 0.45).sin();
                let pu = u.rem_euclid(period) - period / 2.0;
                let pv = v.rem_euclid(period) - period / 2.0;
                let pore = pu * pu + pv * pv < 1.3;
                for ch in 0..3 {
                    let base = if pore { config.pore_color[ch] } else { config.porous_color[ch] };
                    pixels[i][ch] = base + rng.random_range(-0.03..0.03);
                }
            }
        }
    }

    for (k, e) in ellipses.iter().enumerate() {
        let id = (k + 1) as u16;
        let fill_factor = rng.random_range(0.95..1.05);
        let pore_step = rng.random_range(3.5..4.5);
        let pore_offset = (rng.random_range(0.0..pore_step), rng.random_range(0.0..pore_step));
        let lo_r = (e.cy - e.a.max(e.b) - 1.0).max(0.0) as usize;
        let hi_r = ((e.cy + e.a.max(e.b) + 1.0) as usize).min(h - 1);
        let lo_c = (e.cx - e.a.max(e.b) - 1.0).max(0.0) as usize;
        let hi_c = ((e.cx + e.a.max(e.b) + 1.0) as usize).min(w - 1);
        for r in lo_r..=hi_r {
            for col in lo_c..=hi_c {
                let (y, x) = (r as f32 + 0.5, col as f32 + 0.5);
                if !e.contains(y, x) {
                    continue;
                }
                let i = r * w + col;
                class_map[i] = CLASS_TARGET;
                instance_map[i] = id;
                let rim = e.level(y, x) > 0.72;
                match textures[k] {
                    TextureTag::A => {
                        let py = (y + pore_offset.0) % pore_step - pore_step / 2.0;
                        let px = (x + pore_offset.1) % pore_step - pore_step / 2.0;
                        let pore = py * py + px * px < 1.3 && !rim;
                        for ch in 0..3 {
                            let base = if pore {
                                config.pore_color[ch]
                            } else {
                                config.porous_color[ch]
                            };
                            pixels[i][ch] = base + rng.random_range(-0.03..0.03);
                        }
                    }
                    TextureTag::B => {
                        for ch in 0..3 {
                            pixels[i][ch] = if rim {
                                config.porous_color[ch] * 0.9 + rng.random_range(-0.03..0.03)
                            } else {
                                background[i][ch] * fill_factor
                            };
                        }
                    }
                }
            }
        }
    }

    // a blob partly covered by targets may be split or erased; it must survive
    if !class_map.contains(&CLASS_CONFUSER) {
        return Err(Error::Generation("confusers fully covered by targets".into()));
    }

    // reference mud pixel: background pixel whose colour is closest to the
    // mean background colour, farthest from labelled objects on ties
    let mut mean = [0.0f64; 3];
    let mut bg_count = 0usize;
    for (i, px) in pixels.iter().enumerate() {
        if class_map[i] == CLASS_BACKGROUND {
            for ch in 0..3 {
                mean[ch] += quantize(px[ch]) as f64;
            }
            bg_count += 1;
        }
    }
    if bg_count == 0 {
        return Err(Error::Generation("no background pixels".into()));
    }
    for m in &mut mean {
        *m /= bg_count as f64;
    }
    let mud_idx = (0..h * w)
        .filter(|&i| class_map[i] == CLASS_BACKGROUND)
        .map(|i| {
            let d: f64 = (0..3)
                .map(|ch| (quantize(pixels[i][ch]) as f64 - mean[ch]).powi(2))
                .sum();
            (i, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("background present");

    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in pixels.iter().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = quantize(px[ch]);
        }
    }
    let sample = ImageSample {
        id: id.to_string(),
        image: Tensor::new(vec![3, h, w], data)?,
        class_map,
        instance_map,
        textures,
        mud_pixel: (mud_idx / w, mud_idx % w),
        height: h,
        width: w,
    };
    sample
        .check_invariants()
        .map_err(|e| Error::Generation(format!("sample {id} (seed {seed}): {e}")))?;
    Ok(sample)
}

/// Sample ids: training images A..F mirror the edit-image labels.
pub const TRAIN_IDS: [&str; 6] = ["A", "B", "C", "D", "E", "F"];
pub const VAL_IDS: [&str; 2] = ["V1", "V2"];
pub const TEST_IDS: [&str; 2] = ["T1", "T2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    /// Per-sample seeds, aligned with `train ++ val ++ test`.
    pub sample_seeds: Vec<u64>,
    pub config: GeneratorConfig,
}

impl DatasetManifest {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Validation and test ids combined.
    pub fn unseen_ids(&self) -> Vec<String> {
        self.val.iter().chain(&self.test).cloned().collect()
    }
}

/// Derives the seed of sample `index` from the master seed (splitmix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The ten-sample benchmark in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn generate(seed: u64, config: &GeneratorConfig) -> Result<Self> {
        let ids: Vec<&str> = TRAIN_IDS
            .iter()
            .chain(&VAL_IDS)
            .chain(&TEST_IDS)
            .copied()
            .collect();
        let mut samples = Vec::with_capacity(ids.len());
        let mut sample_seeds = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            // skip seeds whose layout cannot be placed; bounded and deterministic
            let mut attempt = 0u64;
            let sample = loop {
                let s = derive_seed(seed, i as u64 * 1000 + attempt);
                match generate_sample(id, s, config) {
                    Ok(sample) => {
                        sample_seeds.push(s);
                        break sample;
                    }
                    Err(Error::Generation(msg)) if attempt < 16 => {
                        let _ = msg;
                        attempt += 1;
                    }
                    Err(e) => return Err(e),
                }
            };
            samples.push(sample);
        }
        let manifest = DatasetManifest {
            train: TRAIN_IDS.iter().map(|s| s.to_string()).collect(),
            val: VAL_IDS.iter().map(|s| s.to_string()).collect(),
            test: TEST_IDS.iter().map(|s| s.to_string()).collect(),
            seed,
            sample_seeds,
            config: config.clone(),
        };
        Ok(Self { manifest, samples })
    }

    pub fn sample(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn require(&self, id: &str) -> Result<&ImageSample> {
        self.sample(id)
            .ok_or_else(|| Error::invalid(format!("unknown sample id `{id}`")))
    }

    pub fn train(&self) -> Vec<&ImageSample> {
        self.manifest
            .train
            .iter()
            .filter_map(|id| self.sample(id))
            .collect()
    }

    pub fn unseen(&self) -> Vec<&ImageSample> {
        self.manifest
            .unseen_ids()
            .iter()
            .filter_map(|id| self.sample(id))
            .collect()
    }

    /// Writes `manifest.json` and per-sample PNG/JSON files into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::json(&manifest_path, e))?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        for sample in &self.samples {
            save_sample(sample, dir)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        let samples = manifest
            .all_ids()
            .map(|id| load_sample(id, dir))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }
}

/// Generates the benchmark and writes it to `dir`.
pub fn generate_dataset(seed: u64, config: &GeneratorConfig, dir: &Path) -> Result<Dataset> {
    let dataset = Dataset::generate(seed, config)?;
    dataset.save(dir)?;
    Ok(dataset)
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    id: String,
    height: usize,
    width: usize,
    /// Texture tag per instance id, keyed by the id as a string.
    textures: std::collections::BTreeMap<String, TextureTag>,
    mud_pixel: (usize, usize),
}

/// Writes a 3×H×W image in [0, 1] as an 8-bit PNG.
pub fn save_rgb_png(image: &Tensor, path: &Path) -> Result<()> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::invalid(format!("expected a 3×H×W image, got {:?}", image.shape())));
    };
    let d = image.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let to8 = |ch: usize| (d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([to8(0), to8(1), to8(2)])
    });
    rgb.save(path)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

fn save_sample(sample: &ImageSample, dir: &Path) -> Result<()> {
    let (h, w) = (sample.height, sample.width);
    save_rgb_png(&sample.image, &dir.join(format!("{}_image.png", sample.id)))?;

    let class = GrayImage::from_raw(w as u32, h as u32, sample.class_map.clone())
        .expect("class map length matches");
    let class_path = dir.join(format!("{}_class.png", sample.id));
    class
        .save(&class_path)
        .map_err(|e| Error::Image { path: class_path.clone(), source: e })?;

    let inst: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, sample.instance_map.clone())
            .expect("instance map length matches");
    let inst_path = dir.join(format!("{}_inst.png", sample.id));
    inst.save(&inst_path)
        .map_err(|e| Error::Image { path: inst_path.clone(), source: e })?;

    let meta = SampleMeta {
        id: sample.id.clone(),
        height: h,
        width: w,
        textures: sample
            .textures
            .iter()
            .enumerate()
            .map(|(k, t)| ((k + 1).to_string(), *t))
            .collect(),
        mud_pixel: sample.mud_pixel,
    };
    let meta_path = dir.join(format!("{}_meta.json", sample.id));
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

fn load_sample(id: &str, dir: &Path) -> Result<ImageSample> {
    let meta_path = dir.join(format!("{id}_meta.json"));
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    let (h, w) = (meta.height, meta.width);

    let open = |suffix: &str| {
        let path = dir.join(format!("{id}_{suffix}.png"));
        image::open(&path).map_err(|e| Error::Image { path, source: e })
    };
    let rgb = open("image")?.to_rgb8();
    let class = open("class")?.to_luma8();
    let inst = open("inst")?.to_luma16();
    if rgb.dimensions() != (w as u32, h as u32) {
        return Err(Error::invalid(format!("{id}: image size disagrees with metadata")));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch] as f32 / 255.0;
        }
    }
    let mut textures = Vec::with_capacity(meta.textures.len());
    for k in 1..=meta.textures.len() {
        let tag = meta.textures.get(&k.to_string()).ok_or_else(|| {
            Error::invalid(format!("{id}: texture tag for instance {k} missing"))
        })?;
        textures.push(*tag);
    }
    Ok(ImageSample {
        id: id.to_string(),
        image: Tensor::new(vec![3, h, w], data)?,
        class_map: class.into_raw(),
        instance_map: inst.into_raw(),
        textures,
        mud_pixel: meta.mud_pixel,
        height: h,
        width: w,
    })
}
