//! Row-major serde for small matrices: `[[a, b, c], [d, e, f], …]`.

use nalgebra::SMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<S: Serializer, const R: usize, const C: usize>(m: &SMatrix<f64, R, C>, s: S) -> Result<S::Ok, S::Error> {
    Rows::from(*m).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>, const R: usize, const C: usize>(d: D) -> Result<SMatrix<f64, R, C>, D::Error> {
    Rows::<R, C>::deserialize(d).map(Into::into)
}

/// Row-major mirror of an R×C matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rows<const R: usize, const C: usize>(pub [[f64; C]; R]);

impl<const R: usize, const C: usize> Serialize for Rows<R, C> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = self.0.iter().map(|r| r.as_slice()).collect();
        rows.serialize(s)
    }
}

impl<'de, const R: usize, const C: usize> Deserialize<'de> for Rows<R, C> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        if rows.len() != R || rows.iter().any(|r| r.len() != C) {
            return Err(serde::de::Error::custom(format!("expected a {R}×{C} matrix as {R} rows of {C} numbers")));
        }
        let mut out = [[0.0; C]; R];
        for (o, r) in out.iter_mut().zip(rows) {
            o.copy_from_slice(&r);
        }
        Ok(Rows(out))
    }
}

impl<const R: usize, const C: usize> From<SMatrix<f64, R, C>> for Rows<R, C> {
    fn from(m: SMatrix<f64, R, C>) -> Self {
        Rows(std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])))
    }
}

impl<const R: usize, const C: usize> From<Rows<R, C>> for SMatrix<f64, R, C> {
    fn from(r: Rows<R, C>) -> Self {
        SMatrix::from_fn(|i, j| r.0[i][j])
    }
}
