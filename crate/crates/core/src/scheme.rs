//! Edge-type factorisation schemes and the mapping from ground-truth
//! interaction labels to latent codes.
//!
//! Ordered pairs are laid out row-major over `(i, j)` with `i ≠ j`; `i` is
//! the sender and `j` the receiver.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::sim::System;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Nri,
    Fnri,
    Sfnri,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nri" => Ok(Variant::Nri),
            "fnri" => Ok(Variant::Fnri),
            "sfnri" => Ok(Variant::Sfnri),
            other => Err(Error::Config(format!("unknown model {other:?} (expected nri, fnri or sfnri)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Nri => "nri",
            Variant::Fnri => "fnri",
            Variant::Sfnri => "sfnri",
        })
    }
}

/// Layer sizes `K_1..K_n` of the latent edge-type vector.
///
/// sfNRI layers are single sigmoid units, stored with size 1; each is read
/// as a binary layer (off / on) when discretized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorisationScheme {
    pub variant: Variant,
    pub layer_sizes: Vec<usize>,
    /// Per layer: type 0 is a non-edge that sends no message.
    pub hard_non_edge: Vec<bool>,
}

impl FactorisationScheme {
    /// Builds a scheme with the default non-edge convention: on for every
    /// NRI/fNRI layer, absent for sfNRI.
    pub fn new(variant: Variant, sizes: &[usize]) -> Result<Self> {
        let hard = variant != Variant::Sfnri;
        Self::with_non_edge(variant, sizes, hard)
    }

    pub fn with_non_edge(variant: Variant, sizes: &[usize], hard_non_edge: bool) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config(format!("edge-type counts must be positive, got {sizes:?}")));
        }
        let layer_sizes = match variant {
            Variant::Nri if sizes.len() != 1 => {
                return Err(Error::Config(format!(
                    "nri infers a single graph; got {} layers",
                    sizes.len()
                )))
            }
            Variant::Sfnri if sizes.len() != 1 => {
                return Err(Error::Config(format!(
                    "sfnri takes a single edge-type count K; got {} layers",
                    sizes.len()
                )))
            }
            Variant::Sfnri => vec![1; sizes[0]],
            _ => sizes.to_vec(),
        };
        let hard = hard_non_edge && variant != Variant::Sfnri;
        if hard {
            if let Some(k) = layer_sizes.iter().find(|&&k| k < 2) {
                return Err(Error::Config(format!(
                    "a layer with a hard-coded non-edge needs at least 2 types, got {k}"
                )));
            }
        }
        Ok(Self {
            variant,
            hard_non_edge: vec![hard; layer_sizes.len()],
            layer_sizes,
        })
    }

    /// Parses `"4"`, `"2+2"`, `"2+2+2"` for the given variant.
    pub fn parse(variant: Variant, spec: &str) -> Result<Self> {
        let sizes = spec
            .split('+')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad edge-type string {spec:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(variant, &sizes)
    }

    /// Edge-type counts used for each variant on each system.
    pub fn default_for(variant: Variant, system: System) -> Self {
        let layers = system.layers().len();
        let sizes = match variant {
            Variant::Nri => vec![1 << layers],
            Variant::Fnri => vec![2; layers],
            Variant::Sfnri => vec![layers],
        };
        Self::new(variant, &sizes).expect("valid default scheme")
    }

    /// `K = Σ K_a`, the width of the latent vector.
    pub fn total(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    /// `(start, len)` of each layer's slice of the latent vector.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.layer_sizes
            .iter()
            .map(|&k| {
                let seg = (start, k);
                start += k;
                seg
            })
            .collect()
    }

    /// Number of discrete labels per layer after discretization.
    pub fn label_counts(&self) -> Vec<usize> {
        match self.variant {
            Variant::Sfnri => vec![2; self.num_layers()],
            _ => self.layer_sizes.clone(),
        }
    }

    /// Latent columns that carry a message-passing function.
    pub fn active_types(&self) -> Vec<usize> {
        self.segments()
            .iter()
            .zip(&self.hard_non_edge)
            .flat_map(|(&(start, len), &hard)| (start + usize::from(hard))..(start + len))
            .collect()
    }

    /// Per-layer class of one pair given its binary truth labels, one per
    /// ground-truth layer.
    pub fn truth_codes(&self, truth: &[u8]) -> Result<Vec<usize>> {
        let bits = truth.len();
        match self.variant {
            Variant::Nri => {
                if self.layer_sizes[0] != 1 << bits {
                    return Err(Error::SchemeMismatch(format!(
                        "nri with K={} cannot encode {bits} binary truth layers (needs K={})",
                        self.layer_sizes[0],
                        1 << bits
                    )));
                }
                Ok(vec![truth
                    .iter()
                    .enumerate()
                    .map(|(a, &l)| usize::from(l) << a)
                    .sum()])
            }
            Variant::Fnri | Variant::Sfnri => {
                if self.num_layers() != bits {
                    return Err(Error::SchemeMismatch(format!(
                        "{} layers cannot encode {bits} truth layers",
                        self.num_layers()
                    )));
                }
                if self.variant == Variant::Fnri {
                    if let Some(k) = self.layer_sizes.iter().find(|&&k| k != 2) {
                        return Err(Error::SchemeMismatch(format!(
                            "fnri layer of size {k} cannot encode a binary truth layer"
                        )));
                    }
                }
                Ok(truth.iter().map(|&l| usize::from(l)).collect())
            }
        }
    }

    /// Ground-truth latent vectors `[rows, K]` from per-pair truth labels
    /// `[rows, truth_layers]`.
    pub fn truth_z(&self, pair_labels: &[u8], truth_layers: usize) -> Result<Tensor> {
        let k = self.total();
        let rows = pair_labels.len() / truth_layers.max(1);
        let segments = self.segments();
        let mut z = vec![0.0; rows * k];
        for (r, labels) in pair_labels.chunks_exact(truth_layers).enumerate() {
            let codes = self.truth_codes(labels)?;
            for ((start, _), code) in segments.iter().zip(codes) {
                match self.variant {
                    Variant::Sfnri => z[r * k + start] = code as f64,
                    _ => z[r * k + start + code] = 1.0,
                }
            }
        }
        Tensor::new(&[rows, k], z)
    }
}

impl fmt::Display for FactorisationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            Variant::Sfnri => write!(f, "{}", self.num_layers()),
            _ => {
                let parts: Vec<String> = self.layer_sizes.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

/// Ordered pairs `(sender, receiver)`, row-major, `i ≠ j`.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

/// Truth labels per ordered pair, `[B·N(N−1), layers]` flattened.
pub fn batch_pair_labels(batch: &Batch) -> Vec<u8> {
    let n = batch.n_particles();
    let pairs = ordered_pairs(n);
    let mut out = Vec::with_capacity(batch.size() * pairs.len() * batch.num_layers);
    for b in 0..batch.size() {
        for &(i, j) in &pairs {
            for a in 0..batch.num_layers {
                out.push(batch.label(b, a, i, j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let ic = System::SpringsCharges;
        let icf = System::SpringsChargesFinite;
        assert_eq!(FactorisationScheme::default_for(Variant::Nri, ic).to_string(), "4");
        assert_eq!(FactorisationScheme::default_for(Variant::Fnri, ic).to_string(), "2+2");
        assert_eq!(FactorisationScheme::default_for(Variant::Sfnri, ic).to_string(), "2");
        assert_eq!(FactorisationScheme::default_for(Variant::Nri, icf).to_string(), "8");
        assert_eq!(FactorisationScheme::default_for(Variant::Fnri, icf).to_string(), "2+2+2");
        assert_eq!(FactorisationScheme::default_for(Variant::Sfnri, icf).to_string(), "3");
    }

    #[test]
    fn parse_validates_variant() {
        assert!(FactorisationScheme::parse(Variant::Fnri, "2+2").is_ok());
        assert!(FactorisationScheme::parse(Variant::Nri, "4").is_ok());
        assert!(matches!(
            FactorisationScheme::parse(Variant::Sfnri, "2+2"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            FactorisationScheme::parse(Variant::Nri, "2+2"),
            Err(Error::Config(_))
        ));
        assert!(FactorisationScheme::parse(Variant::Fnri, "2+x").is_err());
    }

    #[test]
    fn active_types_skip_non_edges() {
        let s = FactorisationScheme::parse(Variant::Fnri, "2+3").unwrap();
        assert_eq!(s.active_types(), [1, 3, 4]);
        let s = FactorisationScheme::parse(Variant::Sfnri, "3").unwrap();
        assert_eq!(s.active_types(), [0, 1, 2]);
        assert_eq!(s.label_counts(), [2, 2, 2]);
    }

    #[test]
    fn truth_encodings() {
        let nri = FactorisationScheme::parse(Variant::Nri, "4").unwrap();
        let z = nri.truth_z(&[1, 0, 0, 1], 2).unwrap();
        assert_eq!(z.data(), &[0., 1., 0., 0., 0., 0., 1., 0.]);
        let fnri = FactorisationScheme::parse(Variant::Fnri, "2+2").unwrap();
        let z = fnri.truth_z(&[1, 0], 2).unwrap();
        assert_eq!(z.data(), &[0., 1., 1., 0.]);
        let sf = FactorisationScheme::parse(Variant::Sfnri, "2").unwrap();
        assert_eq!(sf.truth_z(&[1, 0], 2).unwrap().data(), &[1., 0.]);
        assert!(matches!(nri.truth_z(&[1, 0, 1], 3), Err(Error::SchemeMismatch(_))));
    }

    #[test]
    fn pair_order() {
        assert_eq!(ordered_pairs(3), [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]);
    }
}
