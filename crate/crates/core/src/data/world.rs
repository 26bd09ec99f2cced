//! The micro-world: scenes of coloured shapes with templated captions,
//! descriptive region phrases and a colour question.
//!
//! Caption grammar: `a <color> <shape> (and a <color> <shape>)*`, regions
//! listed left to right by box `x1`.
//!
//! Phrase grammar: `[<size>] <color> <shape> <location>`, where the size word
//! is `small` below 4% of the frame, `large` above 12%, and omitted in
//! between; the location word comes from the box centre.
//!
//! Question: `what color is the <shape>` for a shape that occurs once.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRecord {
    pub feat: Vec<f32>,
    pub bbox: [f32; 5],
    /// Distribution over the shape labels.
    pub label_dist: Vec<f32>,
    pub phrase: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Qa {
    pub question: Vec<String>,
    pub answers: BTreeMap<String, f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub scene_id: u64,
    pub regions: Vec<RegionRecord>,
    pub caption: Vec<String>,
    pub qa: Qa,
}

impl Scene {
    /// Checks the record-level invariants that the file format cannot express.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.regions.is_empty() {
            return Err("regions must be nonempty".into());
        }
        let width = self.regions[0].feat.len();
        let labels = self.regions[0].label_dist.len();
        for (i, r) in self.regions.iter().enumerate() {
            if r.feat.is_empty() || r.feat.len() != width {
                return Err(format!("region {i}: feature width {} differs from {width}", r.feat.len()));
            }
            if r.feat.iter().any(|v| !v.is_finite()) {
                return Err(format!("region {i}: non-finite feature"));
            }
            let [x1, y1, x2, y2, area] = r.bbox;
            let unit = |v: f32| (0.0..=1.0).contains(&v);
            if !(unit(x1) && unit(y1) && unit(x2) && unit(y2) && x1 < x2 && y1 < y2) || !(area > 0.0 && area <= 1.0) {
                return Err(format!("region {i}: invalid bbox {:?}", r.bbox));
            }
            if r.label_dist.len() != labels || labels == 0 {
                return Err(format!("region {i}: label distribution width mismatch"));
            }
            let sum: f64 = r.label_dist.iter().map(|&p| p as f64).sum();
            if r.label_dist.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
                return Err(format!("region {i}: label_dist is not a distribution"));
            }
            if r.phrase.is_empty() {
                return Err(format!("region {i}: phrase must be nonempty"));
            }
        }
        if self.caption.is_empty() {
            return Err("caption must be nonempty".into());
        }
        if self.qa.question.is_empty() {
            return Err("question must be nonempty".into());
        }
        if self.qa.answers.is_empty() {
            return Err("answers must be nonempty".into());
        }
        if self.qa.answers.values().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err("answer weights must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Contiguous sub-corpora of the given sizes, in order.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Corpus>> {
        let need: usize = sizes.iter().sum();
        if need > self.len() {
            return Err(Error::Data(format!("cannot split {} scenes into {sizes:?}", self.len())));
        }
        let mut at = 0;
        Ok(sizes
            .iter()
            .map(|&n| {
                let c = Corpus {
                    scenes: self.scenes[at..at + n].to_vec(),
                };
                at += n;
                c
            })
            .collect())
    }

    /// Answer inventory: every answer token, sorted.
    pub fn answer_set(&self) -> Vec<String> {
        let mut a: Vec<String> = self
            .scenes
            .iter()
            .flat_map(|s| s.qa.answers.keys().cloned())
            .collect();
        a.sort();
        a.dedup();
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_scenes: usize,
    pub region_dim: usize,
    pub noise_sigma: f64,
    pub max_regions: usize,
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    /// `[small, large]` words.
    pub sizes: Vec<String>,
    /// `[left, right, top, bottom, center]` words.
    pub locations: Vec<String>,
    /// Seed of the prototype projection, shared by every corpus that should
    /// live in the same feature space.
    pub projection_seed: u64,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_scenes: 2000,
            region_dim: 64,
            noise_sigma: 0.3,
            max_regions: 6,
            shapes: words(&["circle", "square", "triangle", "star", "hexagon"]),
            colors: words(&["red", "green", "blue", "yellow", "purple"]),
            sizes: words(&["small", "large"]),
            locations: words(&["left", "right", "top", "bottom", "center"]),
            projection_seed: 7,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::Config("shape and color inventories must be nonempty".into()));
        }
        if self.n_scenes < 2 {
            return Err(Error::Config("n_scenes must be at least 2".into()));
        }
        let proto = self.shapes.len() + self.colors.len();
        if self.region_dim < proto {
            return Err(Error::Config(format!(
                "region_dim {} is smaller than the prototype width {proto}",
                self.region_dim
            )));
        }
        if self.sizes.len() != 2 || self.locations.len() != 5 {
            return Err(Error::Config("need 2 size words and 5 location words".into()));
        }
        if self.max_regions == 0 || self.max_regions > self.shapes.len() * self.colors.len() {
            return Err(Error::Config("max_regions must be between 1 and shapes x colors".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// `(shapes + colors) x region_dim` projection of the prototype blocks.
    pub fn projection(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.projection_seed);
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        (0..self.shapes.len() + self.colors.len())
            .map(|_| {
                (0..self.region_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * z
                    })
                    .collect::<Vec<f64>>()
            })
            .collect()
    }
}

const SMALL_AREA: f32 = 0.04;
const LARGE_AREA: f32 = 0.12;

/// Size word index (0 small, 1 large) for a box area, if any.
pub fn size_class(area: f32) -> Option<usize> {
    if area < SMALL_AREA {
        Some(0)
    } else if area > LARGE_AREA {
        Some(1)
    } else {
        None
    }
}

/// Location word index (left, right, top, bottom, center) of a box.
pub fn location_class(bbox: &[f32; 5]) -> usize {
    let cx = 0.5 * (bbox[0] + bbox[2]);
    let cy = 0.5 * (bbox[1] + bbox[3]);
    if cx < 1.0 / 3.0 {
        0
    } else if cx > 2.0 / 3.0 {
        1
    } else if cy < 1.0 / 3.0 {
        2
    } else if cy > 2.0 / 3.0 {
        3
    } else {
        4
    }
}

fn sample_pairs(rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = (0..cfg.shapes.len())
        .flat_map(|s| (0..cfg.colors.len()).map(move |c| (s, c)))
        .collect();
    loop {
        let n = rng.random_range(1..=cfg.max_regions);
        let picked: Vec<(usize, usize)> = all.choose_multiple(rng, n).copied().collect();
        let has_unique = picked
            .iter()
            .any(|&(s, _)| picked.iter().filter(|p| p.0 == s).count() == 1);
        if has_unique {
            return picked;
        }
    }
}

fn sample_box(rng: &mut ChaCha8Rng) -> [f32; 5] {
    let w = rng.random_range(0.1f64..0.45);
    let h = rng.random_range(0.1f64..0.45);
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    let b = [x1 as f32, y1 as f32, (x1 + w) as f32, (y1 + h) as f32, (w * h) as f32];
    debug_assert!(b[0] < b[2] && b[1] < b[3]);
    b
}

fn label_dist(rng: &mut ChaCha8Rng, shape: usize, n: usize) -> Vec<f32> {
    let mut d = vec![0.0f64; n];
    if n == 1 {
        d[0] = 1.0;
    } else {
        let peak = rng.random_range(0.8..0.95);
        let rest: Vec<f64> = (0..n - 1).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = rest.iter().sum::<f64>().max(1e-12);
        let mut it = rest.iter();
        for (k, slot) in d.iter_mut().enumerate() {
            *slot = if k == shape {
                peak
            } else {
                (1.0 - peak) * it.next().copied().unwrap_or(0.0) / total
            };
        }
    }
    d.into_iter().map(|p| p as f32).collect()
}

/// Deterministic corpus of `cfg.n_scenes` scenes.
pub fn generate_world(seed: u64, cfg: &WorldConfig) -> Result<Corpus> {
    cfg.validate()?;
    let proj = cfg.projection();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_shapes = cfg.shapes.len();
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for scene_id in 0..cfg.n_scenes as u64 {
        let pairs = sample_pairs(&mut rng, cfg);
        let mut regions = Vec::with_capacity(pairs.len());
        for &(s, c) in &pairs {
            let bbox = sample_box(&mut rng);
            let feat = (0..cfg.region_dim)
                .map(|j| (proj[s][j] + proj[n_shapes + c][j] + noise.sample(&mut rng)) as f32)
                .collect();
            let mut phrase = Vec::with_capacity(4);
            if let Some(k) = size_class(bbox[4]) {
                phrase.push(cfg.sizes[k].clone());
            }
            phrase.push(cfg.colors[c].clone());
            phrase.push(cfg.shapes[s].clone());
            phrase.push(cfg.locations[location_class(&bbox)].clone());
            regions.push(RegionRecord {
                feat,
                bbox,
                label_dist: label_dist(&mut rng, s, n_shapes),
                phrase,
            });
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by(|&a, &b| regions[a].bbox[0].total_cmp(&regions[b].bbox[0]).then(a.cmp(&b)));
        let mut caption = Vec::new();
        for (k, &i) in order.iter().enumerate() {
            if k > 0 {
                caption.push("and".to_string());
            }
            let (s, c) = pairs[i];
            caption.extend(["a".to_string(), cfg.colors[c].clone(), cfg.shapes[s].clone()]);
        }
        let unique: Vec<(usize, usize)> = pairs
            .iter()
            .copied()
            .filter(|&(s, _)| pairs.iter().filter(|p| p.0 == s).count() == 1)
            .collect();
        let (qs, qc) = unique[rng.random_range(0..unique.len())];
        let question = ["what", "color", "is", "the"]
            .iter()
            .map(|w| w.to_string())
            .chain(std::iter::once(cfg.shapes[qs].clone()))
            .collect();
        let answers = BTreeMap::from([(cfg.colors[qc].clone(), 1.0f32)]);
        scenes.push(Scene {
            scene_id,
            regions,
            caption,
            qa: Qa { question, answers },
        });
    }
    Ok(Corpus { scenes })
}

/// `(color, shape)` slots of a caption under the fixed grammar.
pub fn caption_slots(tokens: &[String]) -> Vec<(String, String)> {
    tokens
        .split(|t| t == "and")
        .filter_map(|chunk| match chunk {
            [a, color, shape] if a == "a" => Some((color.clone(), shape.clone())),
            _ => None,
        })
        .collect()
}
