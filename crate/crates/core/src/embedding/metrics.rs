use crate::error::{shape_err, Error, Result};
use crate::generator::Image;

use super::losses::dot;
use super::{Embedding, Encoder};

/// Mean inner product between a text embedding and image embeddings.
pub fn quality_from_embeddings(text: &Embedding, images: &[Embedding]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Input("quality metric needs at least one image".into()));
    }
    let mut acc = 0.0;
    for e in images {
        if e.dim() != text.dim() {
            return Err(shape_err("image and text embeddings differ in dimension"));
        }
        acc += dot(text.as_slice(), e.as_slice());
    }
    Ok(acc / images.len() as f64)
}

/// Mean pairwise cosine distance. For unit vectors `1 − ⟨a, b⟩` equals
/// `‖a − b‖² / 2`, which is what is summed so identical embeddings give
/// exactly zero.
pub fn diversity_from_embeddings(images: &[Embedding]) -> Result<f64> {
    let n = images.len();
    if n < 2 {
        return Err(Error::Input("diversity metric needs at least two images".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let a = images[i].as_slice();
            let b = images[j].as_slice();
            if a.len() != b.len() {
                return Err(shape_err("embeddings differ in dimension"));
            }
            acc += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 2.0;
        }
    }
    Ok(2.0 * acc / (n * (n - 1)) as f64)
}

pub fn quality_metric(enc: &dyn Encoder, images: &[Image], target_text: &str) -> Result<f64> {
    let text = enc.encode_text(target_text)?;
    let embs = images
        .iter()
        .map(|i| enc.encode_image(i.view()))
        .collect::<Result<Vec<_>>>()?;
    quality_from_embeddings(&text, &embs)
}

pub fn diversity_metric(enc: &dyn Encoder, images: &[Image]) -> Result<f64> {
    let embs = images
        .iter()
        .map(|i| enc.encode_image(i.view()))
        .collect::<Result<Vec<_>>>()?;
    diversity_from_embeddings(&embs)
}
