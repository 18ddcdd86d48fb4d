//! Image/text view fusion.
//!
//! The text view of an image is the mean of its top-k retrieved caption
//! embeddings. The fused view is `[image | text]`, each segment L2-normalized
//! unless normalization is switched off. With the text view disabled the
//! fused view is the image view alone.

use std::path::Path;

use crate::embedstore::EmbeddingMatrix;
use crate::linalg;
use crate::reprloss::ProjectionHead;
use crate::retrieval::CorpusIndex;
use crate::{Error, Result};

/// Componentwise mean, accumulated serially in 64-bit.
pub fn mean_pool(vectors: &[&[f32]]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("mean_pool needs at least one vector"))?;
    let dims = first.len();
    let mut sum = vec![0.0f64; dims];
    for v in vectors {
        if v.len() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: v.len(),
            });
        }
        for (s, &x) in sum.iter_mut().zip(v.iter()) {
            *s += f64::from(x);
        }
    }
    let n = vectors.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FuseOptions {
    pub normalize: bool,
    pub use_text: bool,
}

impl Default for FuseOptions {
    fn default() -> Self {
        Self {
            normalize: true,
            use_text: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedView {
    pub vector: Vec<f32>,
    pub image_dims: usize,
    pub text_dims: usize,
}

impl FusedView {
    pub fn image_segment(&self) -> &[f32] {
        &self.vector[..self.image_dims]
    }

    pub fn text_segment(&self) -> &[f32] {
        &self.vector[self.image_dims..]
    }
}

fn push_segment(out: &mut Vec<f32>, v: &[f64], normalize: bool, what: &str) -> Result<()> {
    if normalize {
        let n = linalg::norm(v);
        if n == 0.0 {
            return Err(Error::ZeroNorm { id: what.into() });
        }
        out.extend(v.iter().map(|x| (x / n) as f32));
    } else {
        out.extend(v.iter().map(|&x| x as f32));
    }
    Ok(())
}

fn fuse_parts(image: &[f64], pooled: Option<&[f64]>, normalize: bool) -> Result<FusedView> {
    let text_dims = pooled.map_or(0, <[f64]>::len);
    let mut vector = Vec::with_capacity(image.len() + text_dims);
    push_segment(&mut vector, image, normalize, "<image view>")?;
    if let Some(p) = pooled {
        push_segment(&mut vector, p, normalize, "<text view>")?;
    }
    Ok(FusedView {
        vector,
        image_dims: image.len(),
        text_dims,
    })
}

pub fn fuse(image: &[f32], texts: &[&[f32]], opts: FuseOptions) -> Result<FusedView> {
    let image = linalg::to_f64(image);
    if !opts.use_text {
        return fuse_parts(&image, None, opts.normalize);
    }
    let pooled = mean_pool(texts)?;
    fuse_parts(&image, Some(&pooled), opts.normalize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub image_id: String,
    pub corpus_rows: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct AugmentOptions<'a> {
    /// Captions per image; 0 disables the text view.
    pub k: usize,
    pub fuse: FuseOptions,
    /// Refines the image segment through a trained head when set.
    pub head: Option<&'a ProjectionHead>,
    /// Query the corpus with the refined image view instead of the raw one.
    /// Requires the head's output width to match the corpus.
    pub query_with_head: bool,
}

impl Default for AugmentOptions<'_> {
    fn default() -> Self {
        Self {
            k: crate::retrieval::DEFAULT_TOP_K,
            fuse: FuseOptions::default(),
            head: None,
            query_with_head: false,
        }
    }
}

impl AugmentOptions<'_> {
    fn text_enabled(&self) -> bool {
        self.fuse.use_text && self.k > 0
    }
}

#[derive(Debug, Clone)]
pub struct AugmentedDataset {
    pub fused: EmbeddingMatrix,
    pub provenance: Vec<Provenance>,
}

/// Fuses every image row with its own top-k captions.
pub fn augment_dataset(
    images: &EmbeddingMatrix,
    index: Option<&CorpusIndex>,
    opts: &AugmentOptions<'_>,
) -> Result<AugmentedDataset> {
    let image_views: Vec<Vec<f64>> = match opts.head {
        Some(head) => images
            .iter_rows()
            .map(|r| head.apply(r))
            .collect::<Result<_>>()?,
        None => images.iter_rows().map(linalg::to_f64).collect(),
    };

    let hits = if opts.text_enabled() {
        let index = index.ok_or_else(|| Error::invalid("text view enabled but no corpus index"))?;
        let refined;
        let queries = if opts.query_with_head && opts.head.is_some() {
            let rows: Vec<Vec<f32>> = image_views
                .iter()
                .map(|v| v.iter().map(|&x| x as f32).collect())
                .collect();
            refined = EmbeddingMatrix::from_rows(images.ids().to_vec(), &rows)?;
            &refined
        } else {
            images
        };
        Some(index.batch_query(queries, opts.k)?)
    } else {
        None
    };

    let mut data = Vec::new();
    let mut dims = 0;
    let mut provenance = Vec::with_capacity(images.rows());
    for (i, image) in image_views.iter().enumerate() {
        let (view, rows) = match (&hits, index) {
            (Some(hits), Some(index)) => {
                let rows: Vec<usize> = hits[i].iter().map(|h| h.corpus_row).collect();
                let texts: Vec<&[f32]> = rows.iter().map(|&r| index.embeddings().row(r)).collect();
                let pooled = mean_pool(&texts)?;
                (fuse_parts(image, Some(&pooled), opts.fuse.normalize), rows)
            }
            _ => (fuse_parts(image, None, opts.fuse.normalize), Vec::new()),
        };
        let view = view.map_err(|e| match e {
            Error::ZeroNorm { id } => Error::ZeroNorm {
                id: format!("{} {id}", images.id(i)),
            },
            other => other,
        })?;
        dims = view.vector.len();
        data.extend_from_slice(&view.vector);
        provenance.push(Provenance {
            image_id: images.id(i).to_owned(),
            corpus_rows: rows,
        });
    }
    Ok(AugmentedDataset {
        fused: EmbeddingMatrix::new(images.ids().to_vec(), dims, data)?,
        provenance,
    })
}

/// Writes CSV `image_id,rank,corpus_row`, ranks starting at 1.
pub fn write_provenance(provenance: &[Provenance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "rank", "corpus_row"])?;
    for p in provenance {
        for (rank, row) in p.corpus_rows.iter().enumerate() {
            w.write_record([
                p.image_id.clone(),
                (rank + 1).to_string(),
                row.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::build_index;

    #[test]
    fn mean_of_identical_vectors_is_the_vector() {
        let v = [0.25f32, -1.5, 3.0];
        let m = mean_pool(&[&v, &v, &v]).unwrap();
        for (a, b) in m.iter().zip(v) {
            assert_eq!(*a, f64::from(b));
        }
    }

    #[test]
    fn mean_of_basis_vectors() {
        assert_eq!(
            mean_pool(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
    }

    #[test]
    fn mean_pool_rejects_empty_and_ragged_input() {
        assert!(mean_pool(&[]).is_err());
        assert!(matches!(
            mean_pool(&[&[1.0, 0.0], &[1.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn fuse_unit_views() {
        let f = fuse(&[1.0, 0.0], &[&[0.0, 2.0]], FuseOptions::default()).unwrap();
        assert_eq!(f.vector, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn disabled_text_view_returns_image_view() {
        let opts = FuseOptions {
            normalize: false,
            use_text: false,
        };
        let f = fuse(&[3.0, 4.0], &[], opts).unwrap();
        assert_eq!(f.vector, vec![3.0, 4.0]);
        assert_eq!(f.text_dims, 0);
    }

    #[test]
    fn zero_text_view_is_rejected_under_normalization() {
        let err = fuse(&[1.0, 0.0], &[&[1.0, 0.0], &[-1.0, 0.0]], FuseOptions::default());
        assert!(matches!(err, Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn self_retrieval_copies_the_paired_caption() {
        let ids: Vec<String> = (0..3).map(|i| format!("img{i}")).collect();
        let rows = vec![
            vec![1.0f32, 0.1, 0.0],
            vec![0.0, 1.0, 0.2],
            vec![0.3, 0.0, 1.0],
        ];
        let images = EmbeddingMatrix::from_rows(ids, &rows).unwrap();
        let texts = (0..3).map(|i| format!("cap{i}")).collect();
        let index = build_index(texts, &images).unwrap();
        let out = augment_dataset(
            &images,
            Some(&index),
            &AugmentOptions {
                k: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.fused.dims(), 6);
        for i in 0..3 {
            assert_eq!(out.provenance[i].corpus_rows, vec![i]);
            let seg = &out.fused.row(i)[3..];
            let paired = index.embeddings().row(i);
            for (a, b) in seg.iter().zip(paired) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_k_is_image_only() {
        let images = EmbeddingMatrix::from_rows(vec!["a".into()], &[vec![3.0, 4.0]]).unwrap();
        let out = augment_dataset(
            &images,
            None,
            &AugmentOptions {
                k: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(out.fused.row(0), &[0.6, 0.8]);
        assert!(out.provenance[0].corpus_rows.is_empty());
    }
}
