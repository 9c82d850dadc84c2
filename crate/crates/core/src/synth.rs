//! Synthetic handwriting-like populations.
//!
//! Thirty classes are laid out as ten stroke templates, each in three
//! orientations: class `c` is template `c % 10` drawn as-is (`c < 10`),
//! mirrored left-right (`10..20`) or mirrored top-bottom (`20..30`).
//! Individuals differ from each other through their class frequencies, their
//! per-class style factors, or both.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, SampleId};
use crate::error::{Error, Result};
use crate::util::{derive_seed, mix_seed};

/// Classes available from the built-in template alphabet.
pub const GLYPH_CLASSES: usize = 30;

const SLANT_LIMIT: f64 = 0.6;
const THICKNESS_RANGE: (f64, f64) = (1.0, 5.0);
const SCALE_RANGE: (f64, f64) = (0.5, 1.5);
const JITTER_LIMIT: f64 = 2.0;

/// Stroke templates in unit coordinates, x to the right and y downwards.
const TEMPLATES: [&[&[(f64, f64)]]; 10] = [
    &[&[(0.3, 0.0), (0.7, 0.0), (1.0, 0.25), (1.0, 0.75), (0.7, 1.0), (0.3, 1.0), (0.0, 0.75), (0.0, 0.25), (0.3, 0.0)]],
    &[&[(0.2, 0.25), (0.6, 0.0), (0.6, 1.0)], &[(0.3, 1.0), (0.9, 1.0)]],
    &[&[(0.0, 0.2), (0.3, 0.0), (0.8, 0.0), (1.0, 0.25), (1.0, 0.4), (0.0, 1.0), (1.0, 1.0)]],
    &[&[(0.0, 0.0), (1.0, 0.0), (0.4, 0.45), (0.8, 0.55), (1.0, 0.75), (0.7, 1.0), (0.0, 0.95)]],
    &[&[(0.7, 1.0), (0.7, 0.0), (0.0, 0.65), (1.0, 0.65)]],
    &[&[(1.0, 0.0), (0.1, 0.0), (0.0, 0.45), (0.6, 0.4), (1.0, 0.65), (0.8, 0.95), (0.0, 1.0)]],
    &[&[(0.9, 0.0), (0.3, 0.2), (0.0, 0.65), (0.2, 1.0), (0.8, 1.0), (1.0, 0.7), (0.7, 0.5), (0.1, 0.6)]],
    &[&[(0.0, 0.15), (0.0, 0.0), (1.0, 0.0), (0.35, 1.0)]],
    &[&[
        (0.5, 0.5), (0.1, 0.3), (0.2, 0.0), (0.8, 0.0), (0.9, 0.3), (0.5, 0.5),
        (0.05, 0.75), (0.2, 1.0), (0.8, 1.0), (0.95, 0.75), (0.5, 0.5),
    ]],
    &[&[(0.95, 0.4), (0.5, 0.55), (0.05, 0.35), (0.2, 0.0), (0.8, 0.0), (1.0, 0.3), (0.9, 0.7), (0.5, 1.0)]],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleFactors {
    /// Radians; positive leans the top to the right.
    pub slant: f64,
    /// Stroke width in pixels.
    pub stroke_thickness: f64,
    /// Standard deviation of stroke vertex displacement, in pixels.
    pub jitter_sigma: f64,
    pub scale: f64,
}

impl StyleFactors {
    pub const fn neutral() -> Self {
        Self { slant: 0.0, stroke_thickness: 2.0, jitter_sigma: 0.0, scale: 1.0 }
    }

    /// Clamps every factor into its admissible range.
    pub fn clipped(self) -> Self {
        Self {
            slant: self.slant.clamp(-SLANT_LIMIT, SLANT_LIMIT),
            stroke_thickness: self.stroke_thickness.clamp(THICKNESS_RANGE.0, THICKNESS_RANGE.1),
            jitter_sigma: self.jitter_sigma.clamp(0.0, JITTER_LIMIT),
            scale: self.scale.clamp(SCALE_RANGE.0, SCALE_RANGE.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.jitter_sigma >= 0.0
            && (SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale)
            && (THICKNESS_RANGE.0..=THICKNESS_RANGE.1).contains(&self.stroke_thickness)
            && self.slant.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("style factors out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VariationMode {
    ClassCounts,
    HiddenFactors,
    Both,
    None,
}

impl VariationMode {
    fn varies_counts(self) -> bool {
        matches!(self, Self::ClassCounts | Self::Both)
    }

    fn varies_style(self) -> bool {
        matches!(self, Self::HiddenFactors | Self::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub n_individuals: usize,
    pub samples_per_individual: usize,
    pub global_size: usize,
    /// Number of background individuals contributing to the global set.
    /// Defaults to `ceil(global_size / samples_per_individual)`.
    pub global_individuals: Option<usize>,
    pub n_classes: usize,
    pub image_size: (usize, usize),
    pub variation_mode: VariationMode,
    pub class_skew_alpha: f64,
    pub style_spread: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n_individuals: 20,
            samples_per_individual: 300,
            global_size: 2000,
            global_individuals: None,
            n_classes: GLYPH_CLASSES,
            image_size: (16, 16),
            variation_mode: VariationMode::HiddenFactors,
            class_skew_alpha: 1.0,
            style_spread: 1.0,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_individuals == 0 || self.samples_per_individual == 0 || self.global_size == 0 {
            return bad("all counts must be positive");
        }
        if self.n_classes < 2 || self.n_classes > GLYPH_CLASSES {
            return bad("n_classes must lie in 2..=30");
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return bad("image_size must be at least 8x8");
        }
        if !(self.class_skew_alpha > 0.0) {
            return bad("class_skew_alpha must be positive");
        }
        if !(self.style_spread >= 0.0) {
            return bad("style_spread must be non-negative");
        }
        if self.global_individuals == Some(0) {
            return bad("global_individuals must be positive");
        }
        Ok(())
    }

    pub fn background_individuals(&self) -> usize {
        self.global_individuals
            .unwrap_or_else(|| self.global_size.div_ceil(self.samples_per_individual))
            .min(self.global_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub global: Dataset,
    pub individuals: Vec<(u32, Dataset)>,
}

/// Renders one glyph. Deterministic in all arguments.
pub fn render_glyph(class: usize, style: &StyleFactors, noise_seed: u64, size: (usize, usize)) -> Result<Vec<u8>> {
    if class >= GLYPH_CLASSES {
        return Err(Error::ClassOutOfRange { class, n_classes: GLYPH_CLASSES });
    }
    let orientation = class / 10;
    // Flipping after the affine map equals drawing with the mirrored slant and
    // flipping the pixels, which keeps neutral flips bit-exact mirrors.
    let drawn = StyleFactors { slant: if orientation == 0 { style.slant } else { -style.slant }, ..*style };
    let mut px = rasterize(TEMPLATES[class % 10], &drawn, noise_seed, size);
    let (h, w) = size;
    match orientation {
        1 => px.chunks_mut(w).for_each(|row| row.reverse()),
        2 => {
            for r in 0..h / 2 {
                for c in 0..w {
                    px.swap(r * w + c, (h - 1 - r) * w + c);
                }
            }
        }
        _ => {}
    }
    Ok(px)
}

fn rasterize(strokes: &[&[(f64, f64)]], style: &StyleFactors, noise_seed: u64, (h, w): (usize, usize)) -> Vec<u8> {
    let box_w = 0.5 * w as f64;
    let box_h = 0.68 * h as f64;
    let (cx, cy) = (0.5 * w as f64, 0.5 * h as f64);
    let shear = style.slant.tan();
    let jitter = (style.jitter_sigma > 0.0).then(|| Normal::new(0.0, style.jitter_sigma).expect("finite sigma"));
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);

    let polylines: Vec<Vec<(f64, f64)>> = strokes
        .iter()
        .map(|stroke| {
            stroke
                .iter()
                .map(|&(u, v)| {
                    let gx = (u - 0.5) * box_w * style.scale;
                    let gy = (v - 0.5) * box_h * style.scale;
                    let mut x = cx + gx - shear * gy;
                    let mut y = cy + gy;
                    if let Some(n) = &jitter {
                        x += n.sample(&mut rng);
                        y += n.sample(&mut rng);
                    }
                    (x, y)
                })
                .collect()
        })
        .collect();

    let half = 0.5 * style.stroke_thickness;
    let mut out = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = (c as f64 + 0.5, r as f64 + 0.5);
            let d = polylines
                .iter()
                .flat_map(|line| line.windows(2).map(move |seg| segment_distance(p, seg[0], seg[1])))
                .fold(f64::INFINITY, f64::min);
            let v = (half + 0.5 - d).clamp(0.0, 1.0);
            out[r * w + c] = (v * 255.0).round() as u8;
        }
    }
    out
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Splits `total` into integer parts proportional to `weights` using the
/// largest-remainder method. Ties go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Class-count vector for one individual: Dirichlet(alpha) proportions when
/// `skewed`, equal shares otherwise.
pub fn draw_class_counts<R: Rng>(rng: &mut R, n_classes: usize, total: usize, skewed: bool, alpha: f64) -> Vec<usize> {
    let weights: Vec<f64> = if skewed {
        let gamma = Gamma::new(alpha, 1.0).expect("positive alpha");
        let draws: Vec<f64> = (0..n_classes).map(|_| gamma.sample(rng)).collect();
        if draws.iter().sum::<f64>() > 0.0 {
            draws
        } else {
            vec![1.0; n_classes]
        }
    } else {
        vec![1.0; n_classes]
    };
    largest_remainder(&weights, total)
}

fn global_class_styles(cfg: &PopulationConfig) -> Vec<StyleFactors> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 0x6C6F_6261_6C]));
    let slant = Normal::new(0.0, 0.08).unwrap();
    let thick = Normal::new(0.0, 0.2).unwrap();
    (0..cfg.n_classes)
        .map(|_| {
            StyleFactors {
                slant: slant.sample(&mut rng),
                stroke_thickness: 1.8 + thick.sample(&mut rng),
                jitter_sigma: 0.3,
                scale: 1.0,
            }
            .clipped()
        })
        .collect()
}

/// Per-class styles of one individual: the global class style shifted by an
/// offset shared across the individual's classes plus a per-class offset.
fn individual_styles<R: Rng>(rng: &mut R, global: &[StyleFactors], spread: f64) -> Vec<StyleFactors> {
    if spread == 0.0 {
        return global.to_vec();
    }
    let n = |sd: f64| Normal::new(0.0, sd * spread).unwrap();
    let (slant, thick, scale, jit) = (n(0.25), n(0.5), n(0.1), n(0.25));
    let shared = (slant.sample(rng), thick.sample(rng), scale.sample(rng), jit.sample(rng));
    global
        .iter()
        .map(|g| {
            StyleFactors {
                slant: g.slant + shared.0 + slant.sample(rng),
                stroke_thickness: g.stroke_thickness + shared.1 + thick.sample(rng),
                jitter_sigma: g.jitter_sigma + (shared.3 + jit.sample(rng)).abs(),
                scale: g.scale * (1.0 + shared.2 + scale.sample(rng)),
            }
            .clipped()
        })
        .collect()
}

fn generate_individual(
    cfg: &PopulationConfig,
    global_styles: &[StyleFactors],
    id: u32,
    n_samples: usize,
) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::from(id)));
    let mode = cfg.variation_mode;
    let counts = draw_class_counts(&mut rng, cfg.n_classes, n_samples, mode.varies_counts(), cfg.class_skew_alpha);
    let styles = if mode.varies_style() {
        individual_styles(&mut rng, global_styles, cfg.style_spread)
    } else {
        global_styles.to_vec()
    };

    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat(c).take(k)).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);

    let per_sample = (Normal::new(0.0, 0.05).unwrap(), Normal::new(0.0, 0.15).unwrap(), Normal::new(0.0, 0.03).unwrap());
    let mut samples = Vec::with_capacity(labels.len());
    for (seq, class) in labels.into_iter().enumerate() {
        let base = styles[class];
        let style = StyleFactors {
            slant: base.slant + per_sample.0.sample(&mut rng),
            stroke_thickness: base.stroke_thickness + per_sample.1.sample(&mut rng),
            jitter_sigma: base.jitter_sigma,
            scale: base.scale + per_sample.2.sample(&mut rng),
        }
        .clipped();
        let pixels = render_glyph(class, &style, rng.gen(), cfg.image_size)?;
        samples.push(Sample { id: SampleId::new(id, seq as u32), label: class as u16, pixels });
    }
    Dataset::from_samples(cfg.n_classes, cfg.image_size.0, cfg.image_size.1, samples)
}

/// Generates the global dataset and `n_individuals` individual datasets.
///
/// Individuals get ids `0..n_individuals`; the global set is drawn from
/// background individuals with the following ids, so the two never overlap.
pub fn gen_population(cfg: &PopulationConfig) -> Result<Population> {
    cfg.validate()?;
    let global_styles = global_class_styles(cfg);
    let n_bg = cfg.background_individuals();
    let bg_sizes = largest_remainder(&vec![1.0; n_bg], cfg.global_size);

    let individuals = (0..cfg.n_individuals as u32)
        .into_par_iter()
        .map(|id| generate_individual(cfg, &global_styles, id, cfg.samples_per_individual).map(|ds| (id, ds)))
        .collect::<Result<Vec<_>>>()?;

    let first_bg = cfg.n_individuals as u32;
    let background = bg_sizes
        .par_iter()
        .enumerate()
        .map(|(i, &n)| generate_individual(cfg, &global_styles, first_bg + i as u32, n))
        .collect::<Result<Vec<_>>>()?;
    let mut global = Dataset::empty(cfg.n_classes, cfg.image_size.0, cfg.image_size.1);
    for part in background {
        for s in part.samples() {
            global.push(s.clone())?;
        }
    }
    Ok(Population { global, individuals })
}
