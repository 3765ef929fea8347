//! Identifiers for the adaptable weight matrices of a model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Position of a weight matrix inside its layer.
///
/// The declaration order is part of the total order on [`WeightMatrixId`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatrixRole {
    /// First hidden projection, consuming the raw model input.
    FfnIn,
    /// Later hidden projections.
    FfnOut,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    /// Output projection.
    Head,
}

impl MatrixRole {
    pub const ALL: [MatrixRole; 7] = [
        MatrixRole::FfnIn,
        MatrixRole::FfnOut,
        MatrixRole::AttnQ,
        MatrixRole::AttnK,
        MatrixRole::AttnV,
        MatrixRole::AttnO,
        MatrixRole::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixRole::FfnIn => "ffn_in",
            MatrixRole::FfnOut => "ffn_out",
            MatrixRole::AttnQ => "attn_q",
            MatrixRole::AttnK => "attn_k",
            MatrixRole::AttnV => "attn_v",
            MatrixRole::AttnO => "attn_o",
            MatrixRole::Head => "head",
        }
    }
}

impl fmt::Display for MatrixRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies one weight matrix of a model. Ordered by `(layer_index, role)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeightMatrixId {
    pub layer_index: usize,
    pub role: MatrixRole,
}

impl WeightMatrixId {
    pub const fn new(layer_index: usize, role: MatrixRole) -> Self {
        Self { layer_index, role }
    }
}

impl fmt::Display for WeightMatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer_index, self.role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid weight matrix id `{0}` (expected L<layer>.<role>)")]
pub struct ParseIdError(pub String);

impl FromStr for WeightMatrixId {
    type Err = ParseIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseIdError(s.to_string());
        let rest = s.strip_prefix('L').ok_or_else(err)?;
        let (layer, role) = rest.split_once('.').ok_or_else(err)?;
        let layer_index = layer.parse().map_err(|_| err())?;
        let role = MatrixRole::ALL
            .into_iter()
            .find(|r| r.as_str() == role)
            .ok_or_else(err)?;
        Ok(Self { layer_index, role })
    }
}

impl Serialize for WeightMatrixId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WeightMatrixId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_layer_then_role() {
        let a = WeightMatrixId::new(0, MatrixRole::Head);
        let b = WeightMatrixId::new(1, MatrixRole::FfnIn);
        let c = WeightMatrixId::new(1, MatrixRole::AttnQ);
        assert!(a < b && b < c);
    }

    #[test]
    fn display_parse_roundtrip() {
        for role in MatrixRole::ALL {
            let id = WeightMatrixId::new(3, role);
            assert_eq!(id.to_string().parse::<WeightMatrixId>().unwrap(), id);
        }
        assert!("3.head".parse::<WeightMatrixId>().is_err());
        assert!("L3.mlp".parse::<WeightMatrixId>().is_err());
    }
}
