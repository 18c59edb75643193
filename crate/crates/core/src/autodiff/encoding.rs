use std::f64::consts::PI;

use nalgebra::Vector3;
use ndarray::Array2;

use crate::error::{Error, Result};

/// Output width of [`positional_encode`] for `freqs` frequency bands.
pub fn encoded_dim(freqs: usize) -> usize {
    3 + 6 * freqs
}

/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]`,
/// each block componentwise over the three coordinates.
pub fn positional_encode(x: &Vector3<f64>, freqs: usize) -> Result<Vec<f64>> {
    if !x.iter().all(|c| c.is_finite()) {
        return Err(Error::NonFinite(format!("positional encoding input {x:?}")));
    }
    let mut out = Vec::with_capacity(encoded_dim(freqs));
    out.extend(x.iter().copied());
    let mut scale = PI;
    for _ in 0..freqs {
        out.extend(x.iter().map(|c| (scale * c).sin()));
        out.extend(x.iter().map(|c| (scale * c).cos()));
        scale *= 2.0;
    }
    Ok(out)
}

/// Encodes a batch of points into an `N x encoded_dim` matrix.
pub fn encode_batch(points: &[Vector3<f64>], freqs: usize) -> Result<Array2<f64>> {
    let dim = encoded_dim(freqs);
    let mut out = Array2::zeros((points.len(), dim));
    for (r, p) in points.iter().enumerate() {
        let enc = positional_encode(p, freqs)?;
        out.row_mut(r)
            .iter_mut()
            .zip(enc)
            .for_each(|(dst, v)| *dst = v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_with_one_band() {
        let e = positional_encode(&Vector3::zeros(), 1).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_bands_is_identity() {
        let e = positional_encode(&Vector3::zeros(), 0).unwrap();
        assert_eq!(e, vec![0.0; 3]);
        let p = Vector3::new(0.25, -1.0, 3.0);
        assert_eq!(positional_encode(&p, 0).unwrap(), vec![0.25, -1.0, 3.0]);
    }

    #[test]
    fn half_unit_first_band() {
        let e = positional_encode(&Vector3::new(0.5, 0.0, 0.0), 1).unwrap();
        assert!((e[3] - 1.0).abs() < 1e-15);
        assert_eq!(&e[4..6], &[0.0, 0.0]);
        assert!(e[6].abs() < 1e-15);
        assert_eq!(&e[7..9], &[1.0, 1.0]);
    }

    #[test]
    fn non_finite_input_errors() {
        assert!(positional_encode(&Vector3::new(f64::NAN, 0.0, 0.0), 2).is_err());
    }

    #[test]
    fn width_matches_formula() {
        for l in 0..8 {
            let e = positional_encode(&Vector3::new(0.1, 0.2, 0.3), l).unwrap();
            assert_eq!(e.len(), encoded_dim(l));
        }
    }
}
