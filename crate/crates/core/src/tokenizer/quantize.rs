//! Nearest-code vector quantization.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Code indices and their embeddings for an `h × w` latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap {
    pub hw: [usize; 2],
    pub indices: Vec<usize>,
    /// `[h, w, C]` rows of the codebook at `indices`.
    pub embeddings: Tensor,
}

/// Index of the code with the smallest squared L2 distance to `z`; the
/// first (lowest) index wins ties.
pub fn nearest_code(z: &[f64], codebook: &[f64]) -> usize {
    let c = z.len();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, e) in codebook.chunks_exact(c).enumerate() {
        let mut d = 0.0;
        for (a, b) in z.iter().zip(e) {
            let t = a - b;
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Quantizes a `[h, w, C]` latent map against a `[N, C]` codebook.
pub fn quantize(latent: &Tensor, codebook: &Tensor) -> Result<TokenMap> {
    let (sl, sc) = (latent.shape(), codebook.shape());
    if sc.len() != 2 || sc[0] == 0 {
        return Err(Error::config(format!("codebook must be a non-empty [N, C] table, got {sc:?}")));
    }
    if sl.len() != 3 || sl[2] != sc[1] {
        return Err(Error::shape("quantize", sl, sc));
    }
    let c = sc[1];
    let cb = codebook.data();
    let indices: Vec<usize> = latent.data().chunks_exact(c).map(|z| nearest_code(z, cb)).collect();
    let mut emb = Vec::with_capacity(latent.numel());
    for &i in &indices {
        emb.extend_from_slice(&cb[i * c..(i + 1) * c]);
    }
    Ok(TokenMap {
        hw: [sl[0], sl[1]],
        indices,
        embeddings: Tensor::new(sl, emb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_and_tie() {
        let mut cb = vec![0.0; 10 * 2];
        for j in 0..10 {
            cb[2 * j] = j as f64;
        }
        let book = Tensor::new(&[10, 2], cb).unwrap();
        let z = Tensor::new(&[1, 1, 2], vec![7.0, 0.0]).unwrap();
        let t = quantize(&z, &book).unwrap();
        assert_eq!(t.indices, vec![7]);
        assert_eq!(t.embeddings.data(), &[7.0, 0.0]);
        // Equidistant from codes 3 and 4.
        let z = Tensor::new(&[1, 1, 2], vec![3.5, 0.0]).unwrap();
        assert_eq!(quantize(&z, &book).unwrap().indices, vec![3]);
    }

    #[test]
    fn empty_codebook_is_config_error() {
        let z = Tensor::zeros(&[1, 1, 2]);
        let book = Tensor::zeros(&[0, 2]);
        assert!(matches!(quantize(&z, &book), Err(Error::Config(_))));
    }
}
