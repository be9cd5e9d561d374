//! Image perturbations: solid-colour class inpainting, texture
//! substitution, and disjoint compositions of the two.
//!
//! Every perturbation records exactly which pixels it touched; outside that
//! set the output is bit-identical to the source image.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthgen::{
    connected_components, image_dims, porous_crop, tile_texture, ImageSample, Rgb3,
    TextureTag, CLASS_CONFUSER, CLASS_TARGET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    InpaintClass,
    SubstituteTexture,
    Compose,
    OccludeTargets,
}

/// What to paint the selected pixels with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Fill {
    /// A fixed colour.
    Solid { rgb: Rgb3 },
    /// The sample's own reference mud pixel colour.
    SampleMud,
    /// Copies of a square crop of `source`, tiled over the whole image.
    /// When `crop` is absent, the largest square inside a porous instance
    /// of the source is used.
    Tiled {
        source: String,
        #[serde(default)]
        crop: Option<(usize, usize, usize)>,
    },
}

/// Which pixels of the selected classes to perturb.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Selection {
    /// `round(fraction * N)` pixels of the selected classes.
    Fraction { fraction: f64 },
    /// Whole target instances, by id.
    Instances { ids: Vec<u16> },
    /// The first texture-B instance (lowest id).
    OneMudFilled,
    /// Whole target instances, lowest ids first, until at least `fraction`
    /// of all instances are covered.
    InstanceFraction { fraction: f64 },
}

/// Declarative perturbation; with the sample it fully determines the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Class ids whose pixels may be changed.
    #[serde(default)]
    pub classes: Vec<u8>,
    #[serde(default)]
    pub fill: Option<Fill>,
    #[serde(default)]
    pub selection: Option<Selection>,
    #[serde(default)]
    pub selection_seed: u64,
    #[serde(default)]
    pub children: Vec<PerturbationSpec>,
}

impl PerturbationSpec {
    pub fn inpaint(classes: Vec<u8>, fill: Fill, fraction: f64, seed: u64) -> Self {
        Self {
            kind: PerturbationKind::InpaintClass,
            classes,
            fill: Some(fill),
            selection: Some(Selection::Fraction { fraction }),
            selection_seed: seed,
            children: Vec::new(),
        }
    }

    /// Every non-target pixel to the sample's mud shade.
    pub fn nontarget_to_mud(fraction: f64) -> Self {
        Self::inpaint(
            vec![CLASS_CONFUSER],
            Fill::SampleMud,
            fraction,
            0,
        )
    }

    /// Target pixels to a tiled porous texture.
    pub fn target_to_texture(source: &str, selection: Selection) -> Self {
        Self {
            kind: PerturbationKind::SubstituteTexture,
            classes: vec![CLASS_TARGET],
            fill: Some(Fill::Tiled {
                source: source.to_string(),
                crop: None,
            }),
            selection: Some(selection),
            selection_seed: 0,
            children: Vec::new(),
        }
    }

    pub fn occlude_targets() -> Self {
        Self {
            kind: PerturbationKind::OccludeTargets,
            classes: vec![CLASS_TARGET],
            fill: Some(Fill::SampleMud),
            selection: None,
            selection_seed: 0,
            children: Vec::new(),
        }
    }

    pub fn compose(children: Vec<PerturbationSpec>) -> Self {
        Self {
            kind: PerturbationKind::Compose,
            classes: Vec::new(),
            fill: None,
            selection: None,
            selection_seed: 0,
            children,
        }
    }

    /// Short table label: `No` for confuser inpainting, `Ar` for target
    /// texture substitution, `+`-joined children for compositions.
    pub fn label(&self) -> String {
        let base = match self.kind {
            PerturbationKind::Compose => {
                return self.children.iter().map(|c| c.label()).collect::<Vec<_>>().join("+")
            }
            PerturbationKind::OccludeTargets => return "Occ".into(),
            PerturbationKind::InpaintClass if self.classes == [CLASS_CONFUSER] => "No".to_string(),
            PerturbationKind::InpaintClass => format!("Inpaint{:?}", self.classes),
            PerturbationKind::SubstituteTexture => "Ar".to_string(),
        };
        match &self.selection {
            Some(Selection::Fraction { fraction }) if *fraction < 1.0 => {
                format!("{base}({}%)", fraction * 100.0)
            }
            Some(Selection::InstanceFraction { fraction }) => {
                format!("{base}(inst {}%)", fraction * 100.0)
            }
            Some(Selection::Instances { ids }) => format!("{base}(inst {ids:?})"),
            Some(Selection::OneMudFilled) => format!("{base}(one B)"),
            _ => base,
        }
    }

    /// Copy with a different pixel selection and selection seed.
    pub fn with_selection(&self, selection: Selection, seed: u64) -> Self {
        Self {
            selection: Some(selection),
            selection_seed: seed,
            ..self.clone()
        }
    }

    /// Whether any part of the spec substitutes texture.
    pub fn substitutes_texture(&self) -> bool {
        self.kind == PerturbationKind::SubstituteTexture
            || self.children.iter().any(|c| c.substitutes_texture())
    }

    /// Replaces empty texture sources with `image_id`.
    pub fn resolve_source(&self, image_id: &str) -> Self {
        let mut out = self.clone();
        if let Some(Fill::Tiled { source, .. }) = &mut out.fill {
            if source.is_empty() {
                *source = image_id.to_string();
            }
        }
        out.children = self.children.iter().map(|c| c.resolve_source(image_id)).collect();
        out
    }

    /// Classes this spec can touch (union over children for compositions).
    pub fn touched_classes(&self) -> BTreeSet<u8> {
        match self.kind {
            PerturbationKind::Compose => self
                .children
                .iter()
                .flat_map(|c| c.touched_classes())
                .collect(),
            PerturbationKind::OccludeTargets => [CLASS_TARGET].into(),
            PerturbationKind::SubstituteTexture if self.classes.is_empty() => [CLASS_TARGET].into(),
            _ => self.classes.iter().copied().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid(format!("perturbation spec: {reason}")));
        match self.kind {
            PerturbationKind::Compose => {
                if self.children.is_empty() {
                    return bad("composition needs at least one child".into());
                }
                let mut seen = BTreeSet::new();
                for child in &self.children {
                    child.validate()?;
                    for c in child.touched_classes() {
                        if !seen.insert(c) {
                            return bad(format!("children overlap on class {c}"));
                        }
                    }
                }
            }
            PerturbationKind::InpaintClass | PerturbationKind::SubstituteTexture => {
                if self.kind == PerturbationKind::InpaintClass && self.classes.is_empty() {
                    return bad("inpainting needs at least one class".into());
                }
                if self.fill.is_none() {
                    return bad("missing fill".into());
                }
                match &self.selection {
                    Some(Selection::Fraction { fraction })
                    | Some(Selection::InstanceFraction { fraction })
                        if !(0.0..=1.0).contains(fraction) =>
                    {
                        return bad(format!("fraction {fraction} outside [0, 1]"));
                    }
                    None => return bad("missing selection".into()),
                    _ => {}
                }
            }
            PerturbationKind::OccludeTargets => {}
        }
        Ok(())
    }
}

/// Perturbed image plus the exact set of pixels it differs from the source in.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedImage {
    pub image: Tensor,
    pub changed_pixels: Vec<bool>,
    pub sample_id: String,
    pub spec: PerturbationSpec,
}

impl PerturbedImage {
    pub fn changed_count(&self) -> usize {
        self.changed_pixels.iter().filter(|&&b| b).count()
    }
}

/// Resolves `Fill::Tiled` sources by sample id.
pub trait TextureSource {
    fn texture_sample(&self, id: &str) -> Option<&ImageSample>;
}

impl TextureSource for crate::synthgen::Dataset {
    fn texture_sample(&self, id: &str) -> Option<&ImageSample> {
        self.sample(id)
    }
}

/// No texture sources available; tiled fills fail.
pub struct NoTextures;

impl TextureSource for NoTextures {
    fn texture_sample(&self, _id: &str) -> Option<&ImageSample> {
        None
    }
}

fn class_mask(sample: &ImageSample, classes: &[u8]) -> Vec<bool> {
    sample.class_map.iter().map(|c| classes.contains(c)).collect()
}

/// Picks exactly `count` pixels of `mask`.
///
/// Whole 4-connected regions are taken in a seeded random order while they
/// fit; the remainder is grown breadth-first from a seeded start pixel in the
/// next region, so partial selections stay spatially coherent.
fn select_coherent(mask: &[bool], h: usize, w: usize, count: usize, seed: u64) -> Vec<bool> {
    let mut chosen = vec![false; mask.len()];
    if count == 0 {
        return chosen;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut regions = connected_components(mask, h, w);
    regions.shuffle(&mut rng);
    let mut remaining = count;
    let mut partial = Vec::new();
    for region in regions {
        if remaining == 0 {
            break;
        }
        if region.len() <= remaining {
            for &p in &region {
                chosen[p] = true;
            }
            remaining -= region.len();
        } else {
            partial.push(region);
        }
    }
    for region in partial {
        if remaining == 0 {
            break;
        }
        let start = region[rng.random_range(0..region.len())];
        let mut queue = VecDeque::from([start]);
        chosen[start] = true;
        remaining -= 1;
        while remaining > 0 {
            let Some(p) = queue.pop_front() else { break };
            let (r, c) = (p / w, p % w);
            let mut neighbours = Vec::with_capacity(4);
            if r > 0 {
                neighbours.push(p - w);
            }
            if r + 1 < h {
                neighbours.push(p + w);
            }
            if c > 0 {
                neighbours.push(p - 1);
            }
            if c + 1 < w {
                neighbours.push(p + 1);
            }
            for q in neighbours {
                if remaining > 0 && mask[q] && !chosen[q] {
                    chosen[q] = true;
                    remaining -= 1;
                    queue.push_back(q);
                }
            }
        }
    }
    chosen
}

fn fraction_count(fraction: f64, total: usize) -> usize {
    ((fraction * total as f64).round() as usize).min(total)
}

fn paint(image: &mut Tensor, pixels: &[bool], color: Rgb3) {
    let plane = pixels.len();
    let d = image.data_mut();
    for (p, _) in pixels.iter().enumerate().filter(|(_, &b)| b) {
        for ch in 0..3 {
            d[ch * plane + p] = color[ch];
        }
    }
}

fn copy_from(image: &mut Tensor, pixels: &[bool], texture: &Tensor) {
    let plane = pixels.len();
    let src = texture.data();
    let d = image.data_mut();
    for (p, _) in pixels.iter().enumerate().filter(|(_, &b)| b) {
        for ch in 0..3 {
            d[ch * plane + p] = src[ch * plane + p];
        }
    }
}

/// Paints `round(fraction · N)` pixels of the given classes with `color`.
pub fn inpaint_class(
    sample: &ImageSample,
    classes: &[u8],
    color: Rgb3,
    fraction: f64,
    selection_seed: u64,
) -> Result<PerturbedImage> {
    let spec = PerturbationSpec::inpaint(
        classes.to_vec(),
        Fill::Solid { rgb: color },
        fraction,
        selection_seed,
    );
    inpaint_with_spec(sample, classes, color, fraction, selection_seed, spec)
}

fn inpaint_with_spec(
    sample: &ImageSample,
    classes: &[u8],
    color: Rgb3,
    fraction: f64,
    selection_seed: u64,
    spec: PerturbationSpec,
) -> Result<PerturbedImage> {
    if !color.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::invalid(format!("fill colour {color:?} outside [0,1]")));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("fraction {fraction} outside [0, 1]")));
    }
    let mask = class_mask(sample, classes);
    let total = mask.iter().filter(|&&b| b).count();
    if total == 0 {
        return Err(Error::invalid(format!(
            "sample {} has no pixels of classes {classes:?}",
            sample.id
        )));
    }
    let count = fraction_count(fraction, total);
    let changed = select_coherent(&mask, sample.height, sample.width, count, selection_seed);
    let mut image = sample.image.clone();
    paint(&mut image, &changed, color);
    Ok(PerturbedImage {
        image,
        changed_pixels: changed,
        sample_id: sample.id.clone(),
        spec,
    })
}

/// Which target pixels a texture substitution replaces.
#[derive(Debug, Clone, PartialEq)]
pub enum TextureSubset {
    Fraction(f64),
    Instances(Vec<u16>),
}

/// Replaces selected target pixels with `texture` at the same coordinates.
pub fn substitute_texture(
    sample: &ImageSample,
    texture: &Tensor,
    subset: &TextureSubset,
    selection_seed: u64,
) -> Result<PerturbedImage> {
    let spec = PerturbationSpec {
        kind: PerturbationKind::SubstituteTexture,
        classes: vec![CLASS_TARGET],
        fill: None,
        selection: Some(match subset {
            TextureSubset::Fraction(f) => Selection::Fraction { fraction: *f },
            TextureSubset::Instances(ids) => Selection::Instances { ids: ids.clone() },
        }),
        selection_seed,
        children: Vec::new(),
    };
    substitute_with_spec(sample, texture, subset, selection_seed, spec)
}

fn substitute_with_spec(
    sample: &ImageSample,
    texture: &Tensor,
    subset: &TextureSubset,
    selection_seed: u64,
    spec: PerturbationSpec,
) -> Result<PerturbedImage> {
    let (h, w) = image_dims(texture)?;
    if (h, w) != (sample.height, sample.width) {
        return Err(Error::ShapeMismatch {
            op: "substitute_texture",
            left: texture.shape().to_vec(),
            right: sample.image.shape().to_vec(),
        });
    }
    let changed = match subset {
        TextureSubset::Fraction(fraction) => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(Error::invalid(format!("fraction {fraction} outside [0, 1]")));
            }
            let mask = class_mask(sample, &[CLASS_TARGET]);
            let total = mask.iter().filter(|&&b| b).count();
            let count = fraction_count(*fraction, total);
            if *fraction > 0.0 && count == 0 {
                return Err(Error::invalid("texture selection is empty"));
            }
            select_coherent(&mask, h, w, count, selection_seed)
        }
        TextureSubset::Instances(ids) => {
            if ids.is_empty() {
                return Err(Error::invalid("texture instance subset is empty"));
            }
            if let Some(bad) = ids
                .iter()
                .find(|&&id| id == 0 || id as usize > sample.num_instances())
            {
                return Err(Error::invalid(format!(
                    "sample {} has no instance {bad}",
                    sample.id
                )));
            }
            sample.instance_map.iter().map(|v| ids.contains(v)).collect()
        }
    };
    let mut image = sample.image.clone();
    copy_from(&mut image, &changed, texture);
    Ok(PerturbedImage {
        image,
        changed_pixels: changed,
        sample_id: sample.id.clone(),
        spec,
    })
}

/// Inpaints every target pixel with mud; a probe for confusions.
pub fn occlude_targets(sample: &ImageSample, mud_color: Rgb3) -> Result<PerturbedImage> {
    let mut spec = PerturbationSpec::occlude_targets();
    spec.fill = Some(Fill::Solid { rgb: mud_color });
    inpaint_with_spec(sample, &[CLASS_TARGET], mud_color, 1.0, 0, spec)
}

/// Applies a spec of any kind to a sample.
pub fn apply(
    sample: &ImageSample,
    spec: &PerturbationSpec,
    textures: &dyn TextureSource,
) -> Result<PerturbedImage> {
    spec.validate()?;
    match spec.kind {
        PerturbationKind::Compose => compose_simultaneous(sample, &spec.children, textures),
        PerturbationKind::OccludeTargets => {
            let color = resolve_color(sample, spec.fill.as_ref().unwrap_or(&Fill::SampleMud))?;
            let mut out = occlude_targets(sample, color)?;
            out.spec = spec.clone();
            Ok(out)
        }
        PerturbationKind::InpaintClass => {
            let fill = spec.fill.as_ref().expect("validated");
            let color = resolve_color(sample, fill)?;
            let fraction = match spec.selection {
                Some(Selection::Fraction { fraction }) => fraction,
                _ => {
                    return Err(Error::invalid(
                        "inpainting supports fraction selections only",
                    ))
                }
            };
            inpaint_with_spec(
                sample,
                &spec.classes,
                color,
                fraction,
                spec.selection_seed,
                spec.clone(),
            )
        }
        PerturbationKind::SubstituteTexture => {
            let texture = resolve_texture(sample, spec.fill.as_ref().expect("validated"), textures)?;
            let subset = resolve_subset(sample, spec.selection.as_ref().expect("validated"))?;
            substitute_with_spec(sample, &texture, &subset, spec.selection_seed, spec.clone())
        }
    }
}

fn resolve_color(sample: &ImageSample, fill: &Fill) -> Result<Rgb3> {
    match fill {
        Fill::Solid { rgb } => Ok(*rgb),
        Fill::SampleMud => Ok(sample.mud_color()),
        Fill::Tiled { .. } => Err(Error::invalid("inpainting needs a solid fill")),
    }
}

fn resolve_texture(sample: &ImageSample, fill: &Fill, textures: &dyn TextureSource) -> Result<Tensor> {
    match fill {
        Fill::Tiled { source, crop } => {
            let src = if source == &sample.id {
                sample
            } else {
                textures
                    .texture_sample(source)
                    .ok_or_else(|| Error::invalid(format!("texture source `{source}` not found")))?
            };
            let crop = match crop {
                Some(c) => *c,
                None => porous_crop(src).ok_or_else(|| {
                    Error::invalid(format!("texture source `{source}` has no porous instance"))
                })?,
            };
            tile_texture(&src.image, crop, (sample.height, sample.width))
        }
        _ => Err(Error::invalid("texture substitution needs a tiled fill")),
    }
}

fn resolve_subset(sample: &ImageSample, selection: &Selection) -> Result<TextureSubset> {
    Ok(match selection {
        Selection::Fraction { fraction } => TextureSubset::Fraction(*fraction),
        Selection::Instances { ids } => TextureSubset::Instances(ids.clone()),
        Selection::OneMudFilled => {
            let id = sample
                .textures
                .iter()
                .position(|&t| t == TextureTag::B)
                .ok_or_else(|| Error::invalid(format!("sample {} has no mud-filled instance", sample.id)))?;
            TextureSubset::Instances(vec![id as u16 + 1])
        }
        Selection::InstanceFraction { fraction } => {
            let k = sample.num_instances();
            let n = ((fraction * k as f64).ceil() as usize).clamp(1, k);
            TextureSubset::Instances((1..=n as u16).collect())
        }
    })
}

/// Applies disjoint child specs in list order; the changed set is their union.
pub fn compose_simultaneous(
    sample: &ImageSample,
    specs: &[PerturbationSpec],
    textures: &dyn TextureSource,
) -> Result<PerturbedImage> {
    let spec = PerturbationSpec::compose(specs.to_vec());
    spec.validate()?;
    let mut image = sample.image.clone();
    let mut changed = vec![false; sample.pixel_count()];
    for child in specs {
        let part = apply(sample, child, textures)?;
        let plane = changed.len();
        let src = part.image.data();
        let dst = image.data_mut();
        for (p, _) in part.changed_pixels.iter().enumerate().filter(|(_, &b)| b) {
            changed[p] = true;
            for ch in 0..3 {
                dst[ch * plane + p] = src[ch * plane + p];
            }
        }
    }
    Ok(PerturbedImage {
        image,
        changed_pixels: changed,
        sample_id: sample.id.clone(),
        spec,
    })
}
