//! Synthetic aligned image/text embeddings with known classes.
//!
//! Each class gets an image prototype drawn uniformly on the unit sphere.
//! Its text prototype mixes that direction (carried into text space by
//! truncation or zero padding) with an independent random direction:
//! `normalize(alpha * shared + (1 - alpha) * independent)`. Items and
//! captions are their prototype plus isotropic Gaussian noise
//! (`sigma` per coordinate), renormalized.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedstore::{write_labels, EmbeddingMatrix, LabelMap};
use crate::linalg;
use crate::retrieval::write_corpus_text;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dims_image: usize,
    pub dims_text: usize,
    pub items_per_class: usize,
    pub captions_per_class: usize,
    pub sigma_image: f64,
    pub sigma_text: f64,
    /// Cross-modal alignment in `[0, 1]`.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dims_image: 64,
            dims_text: 64,
            items_per_class: 50,
            captions_per_class: 20,
            sigma_image: 0.1,
            sigma_text: 0.1,
            alpha: 0.9,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_classes,
            self.dims_image,
            self.dims_text,
            self.items_per_class,
            self.captions_per_class,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("synth counts must all be at least 1"));
        }
        if !(self.sigma_image >= 0.0 && self.sigma_text >= 0.0) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub images: EmbeddingMatrix,
    pub labels: LabelMap,
    pub corpus_texts: Vec<String>,
    pub corpus: EmbeddingMatrix,
    /// True class of each corpus row.
    pub caption_classes: Vec<String>,
    pub warnings: Vec<String>,
}

fn gaussian(dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dims).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = linalg::norm(&v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

fn unit_gaussian(dims: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        if let Some(v) = normalized(gaussian(dims, rng)) {
            return v;
        }
    }
}

fn perturbed(proto: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noisy: Vec<f64> = proto
        .iter()
        .map(|&p| {
            let g: f64 = StandardNormal.sample(rng);
            p + sigma * g
        })
        .collect();
    normalized(noisy)
        .unwrap_or_else(|| proto.to_vec())
        .into_iter()
        .map(|x| x as f32)
        .collect()
}

pub fn class_name(c: usize, num_classes: usize) -> String {
    let width = num_classes.saturating_sub(1).to_string().len().max(3);
    format!("class{c:0width$}")
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut warnings = Vec::new();
    for (name, dims) in [("image", config.dims_image), ("text", config.dims_text)] {
        if dims < 2 || config.num_classes > 2 * dims {
            warnings.push(format!(
                "{name} dims {dims} may be too small to separate {} classes",
                config.num_classes
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.num_classes;
    let image_protos: Vec<Vec<f64>> = (0..c)
        .map(|_| unit_gaussian(config.dims_image, &mut rng))
        .collect();
    let text_protos: Vec<Vec<f64>> = image_protos
        .iter()
        .map(|p| {
            let independent = unit_gaussian(config.dims_text, &mut rng);
            let mut shared = vec![0.0; config.dims_text];
            let m = shared.len().min(p.len());
            shared[..m].copy_from_slice(&p[..m]);
            let shared = normalized(shared).unwrap_or_else(|| independent.clone());
            let mixed = shared
                .iter()
                .zip(&independent)
                .map(|(s, q)| config.alpha * s + (1.0 - config.alpha) * q)
                .collect();
            normalized(mixed).unwrap_or(independent)
        })
        .collect();

    let mut ids = Vec::with_capacity(c * config.items_per_class);
    let mut rows = Vec::with_capacity(ids.capacity());
    let mut pairs = Vec::with_capacity(ids.capacity());
    for (k, proto) in image_protos.iter().enumerate() {
        let class = class_name(k, c);
        for i in 0..config.items_per_class {
            let id = format!("img-{k}-{i}");
            rows.push(perturbed(proto, config.sigma_image, &mut rng));
            pairs.push((id.clone(), class.clone()));
            ids.push(id);
        }
    }

    let mut cap_ids = Vec::new();
    let mut cap_rows = Vec::new();
    let mut texts = Vec::new();
    let mut caption_classes = Vec::new();
    for (k, proto) in text_protos.iter().enumerate() {
        let class = class_name(k, c);
        for j in 0..config.captions_per_class {
            cap_ids.push(format!("cap-{k}-{j}"));
            cap_rows.push(perturbed(proto, config.sigma_text, &mut rng));
            texts.push(format!("caption {j} describing {class}"));
            caption_classes.push(class.clone());
        }
    }

    Ok(SynthData {
        images: EmbeddingMatrix::from_rows(ids, &rows)?,
        labels: LabelMap::from_pairs(pairs)?,
        corpus_texts: texts,
        corpus: EmbeddingMatrix::from_rows(cap_ids, &cap_rows)?,
        caption_classes,
        warnings,
    })
}

pub const IMAGES_FILE: &str = "images.emb";
pub const LABELS_FILE: &str = "labels.csv";
pub const CORPUS_TEXT_FILE: &str = "corpus.txt";
pub const CORPUS_EMB_FILE: &str = "corpus.emb";
pub const CAPTION_CLASSES_FILE: &str = "caption_classes.csv";

impl SynthData {
    /// Writes the standard file set into `dir`.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.images.save(dir.join(IMAGES_FILE))?;
        write_labels(&self.labels, dir.join(LABELS_FILE))?;
        write_corpus_text(&self.corpus_texts, dir.join(CORPUS_TEXT_FILE))?;
        self.corpus.save(dir.join(CORPUS_EMB_FILE))?;
        let path = dir.join(CAPTION_CLASSES_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["corpus_row", "class_name"])?;
        for (row, class) in self.caption_classes.iter().enumerate() {
            w.write_record([row.to_string(), class.clone()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}
